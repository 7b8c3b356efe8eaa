"""Compiled inner loops for reflected Brownian paths in convex polygons.

Paths take Gaussian steps; proposals leaving the polygon are reflected
specularly across the most-violated edge, up to 8 times, then projected
onto the boundary and nudged 1e-9 inward (convex corners only). A running
lower bound on the distance to the boundary lets interior paths skip the
edge scan entirely.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _closest_boundary_point(x, y, vx, vy):
    n = vx.shape[0]
    best = 1e300
    bx = x
    by = y
    for i in range(n):
        ax, ay = vx[i], vy[i]
        j = i + 1 if i + 1 < n else 0
        ex = vx[j] - ax
        ey = vy[j] - ay
        L2 = ex * ex + ey * ey
        t = ((x - ax) * ex + (y - ay) * ey) / L2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        px = ax + t * ex
        py = ay + t * ey
        d2 = (x - px) ** 2 + (y - py) ** 2
        if d2 < best:
            best = d2
            bx = px
            by = py
    return bx, by


@njit(cache=True, fastmath=True)
def _resolve(x, y, nx, ny, boff, vx, vy, icx, icy):
    """Return an inside position and its boundary clearance after a step."""
    m = nx.shape[0]
    for attempt in range(9):
        dmin = 1e300
        worst = 0
        for e in range(m):
            d = nx[e] * x + ny[e] * y - boff[e]
            if d < dmin:
                dmin = d
                worst = e
        if dmin >= 0.0:
            return x, y, dmin
        if attempt == 8:
            break
        x -= 2.0 * dmin * nx[worst]
        y -= 2.0 * dmin * ny[worst]
    # corner fallback: project onto the polygon, step inward
    qx, qy = _closest_boundary_point(x, y, vx, vy)
    dx = icx - qx
    dy = icy - qy
    nrm = math.sqrt(dx * dx + dy * dy)
    if nrm > 0.0:
        x = qx + 1e-9 * dx / nrm
        y = qy + 1e-9 * dy / nrm
    else:
        x, y = qx, qy
    dmin = 1e300
    for e in range(m):
        d = nx[e] * x + ny[e] * y - boff[e]
        if d < dmin:
            dmin = d
    if dmin < 0.0:
        dmin = 0.0
    return x, y, dmin


@njit(cache=True, fastmath=True)
def advance_endpoints(pos, inc, sigma, nx, ny, boff, vx, vy, icx, icy, debug):
    """Advance every path by the increment block. Returns the number of
    no-flux violations seen in debug mode (always 0 otherwise)."""
    npaths = pos.shape[0]
    nsteps = inc.shape[1]
    m = nx.shape[0]
    violations = 0
    for p in range(npaths):
        x = pos[p, 0]
        y = pos[p, 1]
        safe = 1e300
        for e in range(m):
            d = nx[e] * x + ny[e] * y - boff[e]
            if d < safe:
                safe = d
        for s in range(nsteps):
            dx = sigma * inc[p, s, 0]
            dy = sigma * inc[p, s, 1]
            x += dx
            y += dy
            safe -= math.sqrt(dx * dx + dy * dy)
            if safe <= 0.0:
                x, y, safe = _resolve(x, y, nx, ny, boff, vx, vy, icx, icy)
            if debug:
                dmin = 1e300
                for e in range(m):
                    d = nx[e] * x + ny[e] * y - boff[e]
                    if d < dmin:
                        dmin = d
                if dmin < -1e-12:
                    violations += 1
        pos[p, 0] = x
        pos[p, 1] = y
    return violations


@njit(cache=True, fastmath=True)
def advance_hitting(pos, active, t_hit, inc, sigma, dt, t0, barrier, side0,
                    nx, ny, boff, vx, vy, icx, icy):
    """Advance active paths, recording the first crossing of x = barrier.

    The crossing time is linearly interpolated inside the step (pre- or
    post-reflection segment, whichever first changes side)."""
    npaths = pos.shape[0]
    nsteps = inc.shape[1]
    m = nx.shape[0]
    for p in range(npaths):
        if not active[p]:
            continue
        x = pos[p, 0]
        y = pos[p, 1]
        safe = 1e300
        for e in range(m):
            d = nx[e] * x + ny[e] * y - boff[e]
            if d < safe:
                safe = d
        for s in range(nsteps):
            xp = x
            dx = sigma * inc[p, s, 0]
            dy = sigma * inc[p, s, 1]
            x += dx
            y += dy
            crossed = (x - barrier) * side0 <= 0.0 and x != xp
            if not crossed:
                safe -= math.sqrt(dx * dx + dy * dy)
                if safe <= 0.0:
                    x, y, safe = _resolve(x, y, nx, ny, boff, vx, vy, icx, icy)
                    crossed = (x - barrier) * side0 <= 0.0 and x != xp
            if crossed:
                frac = (barrier - xp) / (x - xp)
                if frac < 0.0:
                    frac = 0.0
                elif frac > 1.0:
                    frac = 1.0
                t_hit[p] = t0 + (s + frac) * dt
                active[p] = False
                x = barrier
                break
        pos[p, 0] = x
        pos[p, 1] = y
