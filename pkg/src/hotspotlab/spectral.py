"""P1 finite elements for the Neumann eigenproblem on a triangulated polygon.

The weak form of -Laplace u = mu u with natural (zero-flux) boundary
conditions leads to the generalized problem K phi = mu M phi, whose kernel
is the constant vector. The first nontrivial eigenpair is found by a
preconditioned block iteration with the constant mode deflated by explicit
projection, never by shifting.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hotspotlab.geometry import ConvexDomain
from hotspotlab.mesh import TriMesh, triangulate
from hotspotlab.rng import SALT_EIGS, substream

__all__ = [
    "EigenPair",
    "HotSpotSet",
    "NodalLineReport",
    "assemble",
    "solve_first_eigenpair",
    "solve_domain",
    "evaluate",
    "hot_spots",
    "nodal_line_report",
    "SolverError",
]


class SolverError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class EigenPair:
    mu1: float
    mu2: float
    phi: np.ndarray  # nodal values, L2(Omega)-normalized
    residual: float  # ||K phi - mu1 M phi|| / ||M phi||
    multiplicity_flag: bool  # (mu2 - mu1)/mu1 < 1e-3
    sign_convention: str = "max_on_right"

    @property
    def gap_rel(self) -> float:
        return (self.mu2 - self.mu1) / self.mu1


@dataclass(frozen=True)
class HotSpotSet:
    maxima: list  # (point, value) per connected component of the max band
    minima: list
    band_epsilon: float


@dataclass(frozen=True)
class NodalLineReport:
    crossing_segments: list  # ((x0,y0),(x1,y1)) per sign-changing triangle
    x_projection_width: float
    distance_to_max_fiber: float
    degenerate: bool  # eigenvalue multiplicity flag of the pair


def assemble(mesh: TriMesh):
    """Stiffness and consistent mass matrices (CSR)."""
    t = mesh.triangles
    p = mesh.nodes
    area = mesh.tri_areas
    # edge vectors opposite each vertex; grad(lambda_k) = perp(e_k) / (2A)
    e = np.stack([p[t[:, 2]] - p[t[:, 1]],
                  p[t[:, 0]] - p[t[:, 2]],
                  p[t[:, 1]] - p[t[:, 0]]], axis=1)  # (m, 3, 2)
    n = mesh.n_nodes
    rows, cols, kv, mv = [], [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(t[:, i])
            cols.append(t[:, j])
            kv.append(np.einsum("md,md->m", e[:, i], e[:, j]) / (4.0 * area))
            mv.append(area / (6.0 if i == j else 12.0))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    K = sp.coo_matrix((np.concatenate(kv), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((np.concatenate(mv), (rows, cols)), shape=(n, n)).tocsr()
    return K, M


def _rough_mu1(K, M, Y_m, maxit=12):
    """Order-of-magnitude estimate of the smallest nonzero eigenvalue by
    deflated inverse iteration with a tiny regularizing shift."""
    n = K.shape[0]
    scale = K.diagonal().mean()
    F = spla.splu((K + (1e-10 * scale) * M).tocsc())
    rng = substream(0, SALT_EIGS, 0xE57)
    v = rng.standard_normal(n)
    for _ in range(maxit):
        v -= Y_m[0] * (Y_m[1] @ v)
        v = F.solve(Y_m[2] @ v)
        v /= np.linalg.norm(v)
    v -= Y_m[0] * (Y_m[1] @ v)
    return float((v @ (K @ v)) / (v @ (Y_m[2] @ v)))


def solve_first_eigenpair(K, M, tol: float = 1e-10, seed: int = 0,
                          mu_hint: Optional[float] = None,
                          maxiter: int = 400,
                          node_xy: Optional[np.ndarray] = None) -> EigenPair:
    """Smallest nonzero generalized eigenpair of (K, M), plus the next
    eigenvalue for gap reporting.

    LOBPCG preconditioned by a factorization of K + delta*M, with the
    constant vector removed from the iteration space by explicit projection
    (constraint), started from a seeded random block. Falls back to ARPACK
    shift-invert if the block iteration stalls.
    """
    if tol < 1e-12:
        raise SolverError("tol below 1e-12 is not resolvable in double precision")
    n = K.shape[0]
    ones = np.ones(n)
    m_ones = M @ ones
    c = ones / math.sqrt(ones @ m_ones)
    Y = c[:, None]
    if mu_hint is None:
        mu_hint = _rough_mu1(K, M, (c, M @ c, M))
    delta = 0.5 * abs(mu_hint) or 1e-8
    F = spla.splu((K + delta * M).tocsc())
    prec = spla.LinearOperator((n, n), matvec=F.solve)
    rng = substream(seed, SALT_EIGS)
    X = rng.standard_normal((n, 3))

    vals = vecs = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            vals, vecs = spla.lobpcg(K, X, B=M, M=prec, Y=Y, largest=False,
                                     tol=1e-14 * K.diagonal().mean() * n,
                                     maxiter=maxiter)
        except Exception:
            vals = None
    pair = _postprocess(vals, vecs, K, M, c, m_ones, node_xy) \
        if vals is not None else None
    if pair is None or pair.residual > 1e-8:
        pair = _arpack_fallback(K, M, delta, seed, c, m_ones, node_xy, pair)
    return pair


def _postprocess(vals, vecs, K, M, c, m_ones, node_xy):
    order = np.argsort(vals)
    vals = np.asarray(vals)[order]
    vecs = np.asarray(vecs)[:, order]
    mu1, mu2 = float(vals[0]), float(vals[1])
    phi = vecs[:, 0].copy()
    # explicit projection: phi orthogonal to constants in the M inner product
    phi -= c * (phi @ (M @ c))
    phi /= math.sqrt(phi @ (M @ phi))
    mu1 = float(phi @ (K @ phi))  # Rayleigh refresh after projection
    r = K @ phi - mu1 * (M @ phi)
    residual = float(np.linalg.norm(r) / np.linalg.norm(M @ phi))
    if node_xy is not None:
        phi = _fix_sign(phi, node_xy)
    flag = (mu2 - mu1) / mu1 < 1e-3
    return EigenPair(mu1=mu1, mu2=mu2, phi=phi, residual=residual,
                     multiplicity_flag=bool(flag))


def _fix_sign(phi, xy):
    """Global max strictly to the right of the global min; ties broken
    toward a positive value at the rightmost extremal node."""
    imax, imin = int(np.argmax(phi)), int(np.argmin(phi))
    dx = xy[imax, 0] - xy[imin, 0]
    if abs(dx) > 1e-12:
        return phi if dx > 0 else -phi
    rightmost = imax if xy[imax, 0] >= xy[imin, 0] else imin
    return phi if phi[rightmost] > 0 else -phi


def _arpack_fallback(K, M, delta, seed, c, m_ones, node_xy, previous):
    n = K.shape[0]
    rng = substream(seed, SALT_EIGS, 0xA59)
    v0 = rng.standard_normal(n)
    try:
        vals, vecs = spla.eigsh(K, k=3, M=M, sigma=-delta, which="LM", v0=v0,
                                maxiter=2000)
    except Exception as exc:
        if previous is not None:
            raise SolverError(
                f"eigensolver stalled at residual {previous.residual:.3e}",
                residual=previous.residual) from exc
        raise SolverError("eigensolver failed to converge") from exc
    # drop the constant mode (eigenvalue ~ 0)
    order = np.argsort(vals)
    vals = vals[order][1:]
    vecs = vecs[:, order][:, 1:]
    pair = _postprocess(vals, vecs, K, M, c, m_ones, node_xy)
    if pair.residual > 1e-8:
        raise SolverError(
            f"eigensolver stalled at residual {pair.residual:.3e}",
            residual=pair.residual)
    return pair


def solve_domain(domain: ConvexDomain, h: float, tol: float = 1e-10,
                 seed: int = 0, mesh: Optional[TriMesh] = None):
    """Mesh the domain (unless given) and solve. Returns (mesh, EigenPair)."""
    if mesh is None:
        mesh = triangulate(domain, h)
    K, M = assemble(mesh)
    # first Neumann eigenvalue of a convex domain is at least pi^2 / diam^2
    hint = math.pi**2 / domain.diameter()[2] ** 2
    pair = solve_first_eigenpair(K, M, tol=tol, seed=seed, mu_hint=hint,
                                 node_xy=mesh.nodes)
    return mesh, pair


def evaluate(pair: EigenPair, mesh: TriMesh, p):
    """P1 interpolation of the eigenfunction at a point or an (n,2) array."""
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    out = mesh.interpolate(pair.phi, pts)
    return float(out[0]) if np.asarray(p).ndim == 1 else out


def _band_components(mesh: TriMesh, selected: np.ndarray):
    """Connected components of the selected nodes in the mesh edge graph."""
    from scipy.sparse.csgraph import connected_components

    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    keep = selected[edges[:, 0]] & selected[edges[:, 1]]
    edges = edges[keep]
    ids = np.nonzero(selected)[0]
    remap = -np.ones(mesh.n_nodes, dtype=int)
    remap[ids] = np.arange(len(ids))
    g = sp.coo_matrix(
        (np.ones(len(edges)), (remap[edges[:, 0]], remap[edges[:, 1]])),
        shape=(len(ids), len(ids)))
    ncomp, labels = connected_components(g, directed=False)
    return ids, labels, ncomp


def hot_spots(pair: EigenPair, mesh: TriMesh, band_epsilon: float = 1e-3,
              refine: bool = False) -> HotSpotSet:
    """All extremal-band nodes clustered into connected components; each
    component is reported by its extremal node (optionally polished by a
    local quadratic fit)."""
    if not 0.0 <= band_epsilon <= 0.05:
        raise ValueError("band_epsilon must be in [0, 0.05]")
    phi = pair.phi
    out = {}
    for kind, sign in (("maxima", 1.0), ("minima", -1.0)):
        v = sign * phi
        cut = v.max() * (1.0 - band_epsilon)
        sel = v >= cut
        ids, labels, ncomp = _band_components(mesh, sel)
        comp = []
        for k in range(ncomp):
            members = ids[labels == k]
            best = members[np.argmax(v[members])]
            point = mesh.nodes[best].copy()
            if refine:
                point = _quadratic_refine(mesh, v, best)
            comp.append((point, float(phi[best])))
        comp.sort(key=lambda pv: -sign * pv[1])
        out[kind] = comp
    return HotSpotSet(maxima=out["maxima"], minima=out["minima"],
                      band_epsilon=band_epsilon)


def _quadratic_refine(mesh: TriMesh, v: np.ndarray, node: int):
    """Least-squares quadratic over the node's neighborhood; returns the
    critical point if it stays within a mesh cell of the node."""
    t = mesh.triangles
    nbr = np.unique(t[np.any(t == node, axis=1)])
    if len(nbr) < 6:
        return mesh.nodes[node].copy()
    xy = mesh.nodes[nbr] - mesh.nodes[node]
    A = np.column_stack([np.ones(len(nbr)), xy[:, 0], xy[:, 1],
                         xy[:, 0] ** 2, xy[:, 0] * xy[:, 1], xy[:, 1] ** 2])
    coef, *_ = np.linalg.lstsq(A, v[nbr], rcond=None)
    H = np.array([[2 * coef[3], coef[4]], [coef[4], 2 * coef[5]]])
    g = np.array([coef[1], coef[2]])
    try:
        step = np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        return mesh.nodes[node].copy()
    if np.linalg.norm(step) > mesh.target_h:
        return mesh.nodes[node].copy()
    p = mesh.nodes[node] + step
    return p if mesh.domain.contains(p) else mesh.nodes[node].copy()


def nodal_line_report(pair: EigenPair, mesh: TriMesh) -> NodalLineReport:
    """Zero level set by linear interpolation per sign-changing triangle."""
    phi = pair.phi
    pos = phi >= 0.0
    t = mesh.triangles
    segs = []
    mixed = np.nonzero(pos[t].sum(axis=1) % 3 != 0)[0]
    for ti in mixed:
        tri = t[ti]
        pts = []
        for k in range(3):
            i, j = tri[k], tri[(k + 1) % 3]
            if pos[i] != pos[j]:
                s = phi[i] / (phi[i] - phi[j])
                pts.append(mesh.nodes[i] + s * (mesh.nodes[j] - mesh.nodes[i]))
        if len(pts) == 2:
            segs.append((pts[0], pts[1]))
    if segs:
        xs = np.array([[a[0], b[0]] for a, b in segs])
        xlo, xhi = float(xs.min()), float(xs.max())
        width = xhi - xlo
    else:
        xlo = xhi = math.nan
        width = 0.0
    x_fiber = float(mesh.nodes[int(np.argmax(phi)), 0])
    if segs:
        dist = 0.0 if xlo <= x_fiber <= xhi else min(
            abs(x_fiber - xlo), abs(x_fiber - xhi))
    else:
        dist = math.nan
    return NodalLineReport(crossing_segments=segs, x_projection_width=width,
                           distance_to_max_fiber=dist,
                           degenerate=pair.multiplicity_flag)


def dump_eigenpair(pair: EigenPair, mesh: TriMesh, csv_path, json_path):
    """CSV of (node_x, node_y, phi) plus a JSON header."""
    with open(csv_path, "w") as f:
        f.write("node_x,node_y,phi\n")
        for (x, y), v in zip(mesh.nodes, pair.phi):
            f.write(f"{x:.17g},{y:.17g},{v:.17g}\n")
    header = {
        "mu1": pair.mu1,
        "mu2": pair.mu2,
        "residual": pair.residual,
        "multiplicity_flag": pair.multiplicity_flag,
        "sign_convention": pair.sign_convention,
        "n_nodes": mesh.n_nodes,
        "target_h": mesh.target_h,
    }
    with open(json_path, "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
