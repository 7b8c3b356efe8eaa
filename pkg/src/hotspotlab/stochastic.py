"""Reflected Brownian motion in convex polygons and the path-based checks
built on it: endpoint ensembles, empirical heat kernels, the eigenfunction
path-average identity, kernel domination, and barrier hitting times.

Clock convention: paths are generated by the Laplacian itself (the heat
semigroup), i.e. each Euler step draws increments of variance 2*dt per
coordinate. With this clock the transition density is the Neumann heat
kernel p_t and the path average of an eigenfunction decays as exp(-mu t).

Paths are partitioned into fixed blocks of 8192; each block consumes its
own counter-based substream of the master seed, so results are bit-identical
for any worker count. Workers (default: min(2, cpus), override with the
HOTSPOTLAB_WORKERS environment variable) process whole blocks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from hotspotlab import spectral
from hotspotlab._kernels import advance_endpoints, advance_hitting
from hotspotlab.geometry import ConvexDomain
from hotspotlab.mesh import TriMesh
from hotspotlab.rng import SALT_HITTING, SALT_SIMULATE, substream

__all__ = [
    "PathEnsemble",
    "HeatKernelEstimate",
    "HittingTimeStats",
    "FeynmanKacReport",
    "KernelDominationReport",
    "simulate",
    "feynman_kac_check",
    "estimate_heat_kernel",
    "hitting_time_experiment",
    "verify_kernel_domination",
    "StochasticError",
]

BLOCK_PATHS = 8192
STEP_CHUNK = 512


class StochasticError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    start: np.ndarray
    t_final: float
    dt: float
    n_paths: int
    endpoints: np.ndarray  # (n_paths, 2), all inside the closed domain
    rng_seed: int


@dataclass(frozen=True, eq=False)
class HeatKernelEstimate:
    source: np.ndarray
    time: float
    cell_areas: np.ndarray  # mesh triangle areas
    cell_centers: np.ndarray  # mesh triangle centroids
    density: np.ndarray  # probability per unit area, per cell
    counts: np.ndarray
    n_paths: int


@dataclass(frozen=True)
class FeynmanKacReport:
    lhs: float  # sample mean of phi at path endpoints
    rhs: float  # exp(-mu1 t) * phi(start)
    stderr: float
    z_score: float
    within_3sigma: bool
    rel_error_bound: float  # 3 sigma + dt/h bias allowance, relative
    t: float
    dt: float
    n_paths: int
    seed: int


@dataclass(frozen=True, eq=False)
class HittingTimeStats:
    barrier_x: float
    offset_c2: float
    t_budget: float
    hit_fraction: float  # P(A)
    exp_functional: float  # mean of exp(mu1 T) over paths in A
    exp_indicator: float  # E[exp(mu1 T) 1_A]
    p_B: float
    mu1_used: float
    quantiles: dict  # of T over A
    start: tuple
    n_paths: int
    dt: float
    seed: int


@dataclass(frozen=True, eq=False)
class KernelDominationReport:
    c_delta_hat: float
    argmax_cell_center: np.ndarray
    delta: float
    t_ref: float
    cells_used: int
    ratios: np.ndarray  # per used cell
    min_count: int


def _edge_data(domain: ConvexDomain):
    n = domain.edge_normals
    v = domain.vertices
    ic = domain.incenter
    return (np.ascontiguousarray(n[:, 0]), np.ascontiguousarray(n[:, 1]),
            np.ascontiguousarray(domain.edge_offsets),
            np.ascontiguousarray(v[:, 0]), np.ascontiguousarray(v[:, 1]),
            float(ic[0]), float(ic[1]))


def _workers():
    env = os.environ.get("HOTSPOTLAB_WORKERS", "")
    if env.strip():
        return max(1, int(env))
    return min(2, os.cpu_count() or 1)


def _blocks(n_paths):
    out = []
    lo = 0
    b = 0
    while lo < n_paths:
        hi = min(lo + BLOCK_PATHS, n_paths)
        out.append((b, lo, hi))
        lo = hi
        b += 1
    return out


def _endpoint_block(args):
    (block, n_block, start, n_full, rem, dt, seed, stream, edges, debug) = args
    rng = substream(seed, SALT_SIMULATE, stream, block)
    pos = np.tile(np.asarray(start, dtype=float), (n_block, 1))
    violations = 0
    done = 0
    sig = math.sqrt(2.0 * dt)
    while done < n_full:
        k = min(STEP_CHUNK, n_full - done)
        inc = rng.standard_normal((n_block, k, 2))
        violations += advance_endpoints(pos, inc, sig, *edges, debug)
        done += k
    if rem > 0.0:
        inc = rng.standard_normal((n_block, 1, 2))
        violations += advance_endpoints(pos, inc, math.sqrt(2.0 * rem), *edges, debug)
    return block, pos, violations


def _hitting_block(args):
    (block, n_block, start, steps, dt, t_budget, barrier, side0, seed, stream,
     edges) = args
    rng = substream(seed, SALT_HITTING, stream, block)
    pos = np.tile(np.asarray(start, dtype=float), (n_block, 1))
    active = np.ones(n_block, dtype=np.bool_)
    t_hit = np.full(n_block, np.nan)
    sig = math.sqrt(2.0 * dt)
    done = 0
    while done < steps and active.any():
        k = min(STEP_CHUNK, steps - done)
        idx = np.nonzero(active)[0]
        inc = rng.standard_normal((len(idx), k, 2))
        pos_a = pos[idx].copy()
        act_a = active[idx].copy()
        hit_a = t_hit[idx].copy()
        advance_hitting(pos_a, act_a, hit_a, inc, sig, dt, done * dt,
                        barrier, side0, *edges)
        pos[idx] = pos_a
        active[idx] = act_a
        t_hit[idx] = hit_a
        done += k
    return block, pos, t_hit


def _run_blocks(fn, payloads):
    w = _workers()
    if w <= 1 or len(payloads) <= 1:
        results = [fn(p) for p in payloads]
    else:
        import multiprocessing as mp

        ctx = mp.get_context("fork") if hasattr(os, "fork") else None
        with ProcessPoolExecutor(max_workers=w, mp_context=ctx) as pool:
            results = list(pool.map(fn, payloads))
    results.sort(key=lambda r: r[0])
    return results


def simulate(domain: ConvexDomain, start, t_final: float, dt: float,
             n_paths: int, seed: int, stream: int = 0,
             debug: bool = False) -> PathEnsemble:
    """Euler scheme with Gaussian increments of variance dt per coordinate
    and specular boundary reflection. Deterministic given the seed."""
    start = np.asarray(start, dtype=float)
    if not domain.contains(start, tol=1e-12 * domain.scale):
        raise StochasticError(f"start {start} outside the domain")
    if dt <= 0 or dt > 1e-3 * domain.inradius**2 * (1.0 + 1e-9):
        raise StochasticError(
            f"dt must be in (0, 1e-3*inrad^2 = {1e-3 * domain.inradius**2:.3g}]")
    if n_paths < 1:
        raise StochasticError("n_paths must be >= 1")
    if t_final < 0:
        raise StochasticError("t_final must be >= 0")
    n_full = int(math.floor(t_final / dt + 1e-12))
    rem = t_final - n_full * dt
    if rem < 1e-12 * max(dt, 1.0):
        rem = 0.0
    edges = _edge_data(domain)
    payloads = [(b, hi - lo, start, n_full, rem, dt, seed, stream, edges, debug)
                for b, lo, hi in _blocks(n_paths)]
    results = _run_blocks(_endpoint_block, payloads)
    endpoints = np.concatenate([r[1] for r in results], axis=0)
    violations = sum(r[2] for r in results)
    if violations:
        raise StochasticError(f"{violations} no-flux violations (debug mode)")
    inside = domain.contains_many(endpoints, tol=1e-9 * domain.scale)
    if not inside.all():
        raise StochasticError(
            f"{int((~inside).sum())} endpoints escaped the domain")
    return PathEnsemble(start=start, t_final=t_final, dt=dt, n_paths=n_paths,
                        endpoints=endpoints, rng_seed=seed)


def dump_endpoints(ens: PathEnsemble, path, fmt: str = "csv"):
    if fmt == "csv":
        with open(path, "w") as f:
            f.write("x,y\n")
            for x, y in ens.endpoints:
                f.write(f"{x:.17g},{y:.17g}\n")
    elif fmt == "npy":
        np.save(path, ens.endpoints)
    else:
        raise ValueError(f"unknown endpoint dump format {fmt!r}")


def feynman_kac_check(domain: ConvexDomain, pair, mesh: TriMesh, start,
                      t: float, n_paths: int = 10**5, seed: int = 0,
                      dt: float = 1e-4, stream: int = 0) -> FeynmanKacReport:
    """Path average of the eigenfunction against its exponential decay law."""
    ens = simulate(domain, start, t, dt, n_paths, seed, stream=stream)
    vals = mesh.interpolate(pair.phi, ens.endpoints)
    lhs = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(n_paths))
    phi0 = spectral.evaluate(pair, mesh, np.asarray(start, dtype=float))
    rhs = math.exp(-pair.mu1 * t) * phi0
    z = (lhs - rhs) / stderr if stderr > 0 else 0.0
    bias = (math.sqrt(dt) + mesh.target_h**2) * float(np.abs(pair.phi).max())
    rel_bound = (3.0 * stderr + bias) / abs(rhs) if rhs != 0 else math.inf
    return FeynmanKacReport(lhs=lhs, rhs=rhs, stderr=stderr, z_score=float(z),
                            within_3sigma=bool(abs(z) <= 3.0),
                            rel_error_bound=float(rel_bound), t=t, dt=dt,
                            n_paths=n_paths, seed=seed)


def estimate_heat_kernel(domain: ConvexDomain, mesh: TriMesh, source,
                         t: float, n_paths: int = 10**5, seed: int = 0,
                         dt: float = 1e-4, stream: int = 0) -> HeatKernelEstimate:
    """Endpoint histogram over mesh triangles, normalized to a density."""
    if t <= 0:
        raise StochasticError("t must be positive")
    if n_paths < 10**4:
        raise StochasticError("heat-kernel estimation needs n_paths >= 1e4")
    ens = simulate(domain, source, t, dt, n_paths, seed, stream=stream)
    idx, _ = mesh.locate_many(ens.endpoints)
    counts = np.bincount(idx, minlength=len(mesh.triangles)).astype(float)
    density = counts / (n_paths * mesh.tri_areas)
    return HeatKernelEstimate(source=np.asarray(source, dtype=float), time=t,
                              cell_areas=mesh.tri_areas.copy(),
                              cell_centers=mesh.tri_centroids.copy(),
                              density=density, counts=counts, n_paths=n_paths)


def hitting_time_experiment(domain: ConvexDomain, pair, mesh: TriMesh,
                            offset_c2: float, start_y: Optional[float] = None,
                            t_budget: float = 50.0, n_paths: int = 2 * 10**4,
                            seed: int = 0, dt: Optional[float] = None,
                            stream: int = 0) -> HittingTimeStats:
    """First hitting time of the vertical fiber through the hot spot.

    The start is placed offset_c2 away from the barrier on the side of the
    incenter (the bulk of an elongated domain). Paths not hitting within
    t_budget form the complement set B.
    """
    if domain.aspect < 8:
        raise StochasticError("hitting experiment expects an elongated domain "
                              f"(diam/inrad >= 8), got {domain.aspect:.3g}")
    hs = spectral.hot_spots(pair, mesh)
    x_max = hs.maxima[0][0]
    barrier = float(x_max[0])
    side = 1.0 if domain.incenter[0] >= barrier else -1.0
    start_x = barrier + side * abs(offset_c2)
    if start_y is None:
        start_y = float(domain.incenter[1])
    start = np.array([start_x, start_y])
    if not domain.contains(start):
        raise StochasticError(f"start {start} outside the domain")
    lo, hi = domain.vertices[:, 0].min(), domain.vertices[:, 0].max()
    if not lo <= barrier <= hi:
        raise StochasticError("barrier outside the domain x-range")
    if dt is None:
        dt = 1e-3 * domain.inradius**2
    mu1 = pair.mu1
    if offset_c2 == 0.0:
        t_hit = np.zeros(n_paths)
        hit = np.ones(n_paths, dtype=bool)
    else:
        steps = int(round(t_budget / dt))
        edges = _edge_data(domain)
        side0 = math.copysign(1.0, start_x - barrier)
        payloads = [(b, hi_ - lo_, start, steps, dt, t_budget, barrier, side0,
                     seed, stream, edges) for b, lo_, hi_ in _blocks(n_paths)]
        results = _run_blocks(_hitting_block, payloads)
        t_hit = np.concatenate([r[2] for r in results])
        hit = np.isfinite(t_hit)
    p_a = float(hit.mean())
    th = t_hit[hit]
    w = np.exp(mu1 * th)
    qs = {f"q{int(100 * q)}": float(np.quantile(th, q)) if len(th) else math.nan
          for q in (0.1, 0.25, 0.5, 0.75, 0.9)}
    # unconditional median: misses count as +inf
    t_all = np.where(hit, t_hit, np.inf)
    qs["median_unconditional"] = float(np.median(t_all))
    return HittingTimeStats(
        barrier_x=barrier, offset_c2=offset_c2, t_budget=t_budget,
        hit_fraction=p_a,
        exp_functional=float(w.mean()) if len(w) else math.nan,
        exp_indicator=float(w.sum() / n_paths),
        p_B=1.0 - p_a, mu1_used=mu1, quantiles=qs,
        start=(float(start_x), float(start_y)), n_paths=n_paths, dt=dt,
        seed=seed)


def verify_kernel_domination(domain: ConvexDomain, mesh: TriMesh, x, y,
                             delta: float, t_ref: float = 1.0,
                             n_paths: int = 10**5, seed: int = 0,
                             dt: Optional[float] = None,
                             min_count: int = 20) -> KernelDominationReport:
    """Empirical sup-ratio of the short-time kernel at x over the unit-time
    kernel at y, over cells where the reference kernel is well sampled
    (observed reference count >= min_count)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.hypot(*(x - y)) > 1.0 + 1e-12:
        raise StochasticError("points must satisfy |x - y| <= 1 "
                              "(normalized units)")
    if not 0.0 < delta < 1.0:
        raise StochasticError("delta must be in (0, 1)")
    if dt is None:
        dt = min(1e-4, 1e-3 * domain.inradius**2)
    est_d = estimate_heat_kernel(domain, mesh, x, delta, n_paths, seed, dt,
                                 stream=101)
    est_1 = estimate_heat_kernel(domain, mesh, y, t_ref, n_paths, seed, dt,
                                 stream=102)
    valid = est_1.counts >= min_count
    if not valid.any():
        raise StochasticError(
            f"no cell reached {min_count} reference counts; raise n_paths")
    ratios = est_d.density[valid] / est_1.density[valid]
    k = int(np.argmax(ratios))
    return KernelDominationReport(
        c_delta_hat=float(ratios[k]),
        argmax_cell_center=est_1.cell_centers[valid][k].copy(),
        delta=delta, t_ref=t_ref, cells_used=int(valid.sum()),
        ratios=ratios, min_count=min_count)
