"""Quality triangulation of convex polygons for P1 finite elements.

The initial layout is a hexagonal interior lattice plus boundary nodes at
the target spacing; Delaunay refinement then inserts circumcenters of
skinny triangles (splitting encroached boundary segments instead of
inserting outside points) until every angle clears the quality threshold.
Because the domain is convex and all boundary nodes lie on the hull, plain
Delaunay triangulations conform to the boundary automatically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from hotspotlab.geometry import ConvexDomain

__all__ = ["TriMesh", "triangulate", "MeshError"]


class MeshError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    nodes: np.ndarray  # (n, 2)
    triangles: np.ndarray  # (m, 3) counterclockwise
    boundary_node_flags: np.ndarray  # (n,) bool
    target_h: float
    domain: ConvexDomain
    _delaunay: Delaunay = field(repr=False)
    _raw_to_kept: np.ndarray = field(repr=False)  # qhull simplex -> triangle row

    @cached_property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def tri_areas(self) -> np.ndarray:
        a, b, c = (self.nodes[self.triangles[:, k]] for k in range(3))
        ar = 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                    - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        ar.setflags(write=False)
        return ar

    @cached_property
    def tri_centroids(self) -> np.ndarray:
        c = self.nodes[self.triangles].mean(axis=1)
        c.setflags(write=False)
        return c

    @cached_property
    def min_angle_deg(self) -> float:
        return float(_tri_min_angles(self.nodes, self.triangles).min())

    @cached_property
    def _node_tree(self) -> cKDTree:
        return cKDTree(self.nodes)

    @cached_property
    def _node_to_tris(self):
        lists = [[] for _ in range(self.n_nodes)]
        for t, tri in enumerate(self.triangles):
            for v in tri:
                lists[v].append(t)
        return lists

    def locate(self, p):
        """Containing triangle and barycentric coordinates of a point."""
        idx, bary = self.locate_many(np.asarray(p, dtype=float)[None, :])
        return int(idx[0]), bary[0]

    def locate_many(self, pts: np.ndarray):
        """Vectorized point location; raises if any point is outside."""
        pts = np.asarray(pts, dtype=float)
        raw = self._delaunay.find_simplex(pts)
        idx = np.where(raw >= 0, self._raw_to_kept[raw], -1)
        miss = idx < 0
        if np.any(miss):
            inc = self.domain.incenter
            for k in np.nonzero(miss)[0]:
                idx[k] = self._locate_slow(pts[k], inc)
        a, b, c = (self.nodes[self.triangles[idx, k]] for k in range(3))
        den = ((b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0])
               + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1]))
        l0 = ((b[:, 1] - c[:, 1]) * (pts[:, 0] - c[:, 0])
              + (c[:, 0] - b[:, 0]) * (pts[:, 1] - c[:, 1])) / den
        l1 = ((c[:, 1] - a[:, 1]) * (pts[:, 0] - c[:, 0])
              + (a[:, 0] - c[:, 0]) * (pts[:, 1] - c[:, 1])) / den
        bary = np.stack([l0, l1, 1.0 - l0 - l1], axis=1)
        return idx, bary

    def _locate_slow(self, p, incenter):
        if self.domain.distance_to_boundary(p) < -1e-9 * self.domain.scale:
            raise MeshError(f"point {p} outside the domain")
        # nudge inward, then scan triangles around the nearest node
        q = p + 1e-12 * self.domain.scale * (incenter - p)
        s = int(self._delaunay.find_simplex(q))
        if s >= 0:
            return s
        _, node = self._node_tree.query(p)
        best, best_viol = -1, np.inf
        for t in self._node_to_tris[node]:
            tri = self.triangles[t]
            a, b, c = self.nodes[tri]
            den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
            l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / den
            l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / den
            viol = -min(l1, l2, 1.0 - l1 - l2)
            if viol < best_viol:
                best, best_viol = t, viol
        if best < 0 or best_viol > 1e-7:
            raise MeshError(f"point {p} could not be located")
        return best

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        idx, bary = self.locate_many(np.atleast_2d(pts))
        return np.einsum("nk,nk->n", values[self.triangles[idx]], bary)

    def dump_csv(self, nodes_path, triangles_path):
        """Node/triangle CSV pair for external visualization."""
        header_n = "x,y,boundary"
        rows_n = np.column_stack([self.nodes, self.boundary_node_flags])
        with open(nodes_path, "w") as f:
            f.write(header_n + "\n")
            for x, y, bd in rows_n:
                f.write(f"{x:.17g},{y:.17g},{int(bd)}\n")
        with open(triangles_path, "w") as f:
            f.write("v0,v1,v2\n")
            for t in self.triangles:
                f.write(f"{t[0]},{t[1]},{t[2]}\n")


def _tri_min_angles(nodes, triangles):
    p = nodes[triangles]
    d2 = np.empty((len(triangles), 3))
    for k in range(3):
        e = p[:, (k + 1) % 3] - p[:, (k + 2) % 3]
        d2[:, k] = e[:, 0] ** 2 + e[:, 1] ** 2  # squared edge opposite vertex k
    angles = np.empty_like(d2)
    for k in range(3):
        a2 = d2[:, k]
        b2 = d2[:, (k + 1) % 3]
        c2 = d2[:, (k + 2) % 3]
        cosk = (b2 + c2 - a2) / (2.0 * np.sqrt(b2 * c2))
        angles[:, k] = np.degrees(np.arccos(np.clip(cosk, -1.0, 1.0)))
    return angles.min(axis=1)


def _circumcenters(nodes, triangles):
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]] - a
    c = nodes[triangles[:, 2]] - a
    d = 2.0 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    b2 = b[:, 0] ** 2 + b[:, 1] ** 2
    c2 = c[:, 0] ** 2 + c[:, 1] ** 2
    ux = (c[:, 1] * b2 - b[:, 1] * c2) / d
    uy = (b[:, 0] * c2 - c[:, 0] * b2) / d
    centers = np.stack([ux, uy], axis=1) + a
    radii = np.hypot(ux, uy)
    return centers, radii


class _Boundary:
    """Boundary nodes as per-edge parameter lists; supports segment splits."""

    def __init__(self, domain: ConvexDomain, h: float):
        self.domain = domain
        v = domain.vertices
        self.starts = v
        self.ends = np.roll(v, -1, axis=0)
        self.lengths = np.linalg.norm(self.ends - self.starts, axis=1)
        self.ts = []
        for L in self.lengths:
            m = max(1, int(math.ceil(L / h)))
            self.ts.append(list(np.arange(m) / m))  # [0, 1) per edge

    def points(self) -> np.ndarray:
        pts = []
        for i, ts in enumerate(self.ts):
            a, b = self.starts[i], self.ends[i]
            for t in ts:
                pts.append(a + t * (b - a))
        return np.array(pts)

    def corner_node_ids(self) -> np.ndarray:
        counts = [len(ts) for ts in self.ts]
        return np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)

    def segments(self):
        """(midpoints, half_lengths, (edge, slot)) of all boundary subsegments."""
        mids, halves, ids = [], [], []
        for i, ts in enumerate(self.ts):
            a, b = self.starts[i], self.ends[i]
            full = ts + [1.0]
            for k in range(len(ts)):
                t0, t1 = full[k], full[k + 1]
                mids.append(a + 0.5 * (t0 + t1) * (b - a))
                halves.append(0.5 * (t1 - t0) * self.lengths[i])
                ids.append((i, k))
        return np.array(mids), np.array(halves), ids

    def split(self, edge: int, slot: int, floor: float) -> bool:
        ts = self.ts[edge]
        full = ts + [1.0]
        t0, t1 = full[slot], full[slot + 1]
        if (t1 - t0) * self.lengths[edge] < floor:
            return False
        ts.insert(slot + 1, 0.5 * (t0 + t1))
        return True


def triangulate(domain: ConvexDomain, target_h: float,
                max_nodes: int = 400_000,
                min_angle_deg: float = 20.0,
                max_rounds: int = 50) -> TriMesh:
    """Delaunay-refined quality mesh with edge length near target_h.

    Boundary nodes are exact convex combinations of the polygon vertices,
    so they sit on the boundary to round-off. Interior corners sharper than
    the quality threshold (not produced by the shipped domain generators)
    keep their corner triangle as-is.
    """
    if not 0.0 < target_h <= domain.inradius / 2.0 + 1e-15:
        raise MeshError(
            f"target_h must be in (0, inradius/2 = {domain.inradius / 2:.6g}]")
    est = int(1.6 * domain.area / target_h**2 + 2 * domain.perimeter / target_h)
    if est > max_nodes:
        raise MeshError(
            f"target_h={target_h} needs about {est} nodes; raise max_nodes")

    boundary = _Boundary(domain, target_h)
    interior = _hex_lattice(domain, target_h)
    corner_ok = _corner_angles_deg(domain) >= min_angle_deg + 1.0
    floor = target_h / 64.0
    batch_cap = 4000

    tri = None
    pts = None
    nb = 0
    for _round in range(max_rounds):
        bpts = boundary.points()
        nb = len(bpts)
        pts = np.concatenate([bpts, interior], axis=0)
        tri = Delaunay(pts)
        simplices = tri.simplices
        min_ang = _tri_min_angles(pts, simplices)
        bad = min_ang < min_angle_deg
        # exact slivers between collinear boundary nodes are coverage-neutral
        # and get dropped at the end; never try to refine them
        bad &= ~_degenerate_mask(pts, simplices)
        if not np.all(corner_ok) and np.any(bad):
            # triangles pinned at a too-sharp polygon corner cannot be fixed
            sharp = boundary.corner_node_ids()[~corner_ok]
            pinned = np.isin(simplices, sharp).any(axis=1)
            bad &= ~pinned
        if not np.any(bad):
            break
        centers, radii, tri_rows = _refinement_candidates(pts, simplices[bad])
        if len(centers) > batch_cap:
            centers, radii = centers[:batch_cap], radii[:batch_cap]
            tri_rows = tri_rows[:batch_cap]
        mids, halves, seg_ids = boundary.segments()
        d2 = ((centers[:, None, :] - mids[None, :, :]) ** 2).sum(axis=-1)
        enc_score = d2 - halves[None, :] ** 2
        encroaching = (enc_score < 0).any(axis=1)
        nearest_seg = np.argmin(enc_score, axis=1)
        outside = domain.distance_to_boundary(centers) < 0.0
        new_interior, split_slots = [], set()
        acc = np.empty((0, 2))
        acc_r = np.empty(0)
        for i in range(len(centers)):
            c, r = centers[i], radii[i]
            if outside[i] or encroaching[i]:
                for s in _segments_to_split(
                        enc_score[i], nearest_seg[i], tri_rows[i], nb, halves):
                    split_slots.add(seg_ids[s])
                continue
            if len(acc) and bool(np.any(
                    np.hypot(acc[:, 0] - c[0], acc[:, 1] - c[1])
                    < 0.7 * np.minimum(acc_r, r))):
                continue
            acc = np.concatenate([acc, c[None, :]], axis=0)
            acc_r = np.concatenate([acc_r, [r]])
            new_interior.append(c)
        did = False
        for edge, slot in sorted(split_slots):
            did |= boundary.split(edge, slot, floor)
        if new_interior:
            interior = np.concatenate([interior, np.array(new_interior)], axis=0)
            did = True
        if not did:
            break
    else:
        raise MeshError("mesh refinement did not converge")

    simplices = tri.simplices.copy()
    keep = ~_degenerate_mask(pts, simplices)
    raw_to_kept = np.full(len(simplices), -1, dtype=int)
    raw_to_kept[keep] = np.arange(int(keep.sum()))
    simplices = simplices[keep]
    # enforce counterclockwise triangles
    a, b, c = (pts[simplices[:, k]] for k in range(3))
    cw = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
          - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])) < 0
    simplices[cw] = simplices[cw][:, ::-1]
    flags = np.zeros(len(pts), dtype=bool)
    flags[:nb] = True
    mesh = TriMesh(nodes=pts, triangles=simplices, boundary_node_flags=flags,
                   target_h=target_h, domain=domain, _delaunay=tri,
                   _raw_to_kept=raw_to_kept)
    _validate(mesh, min_angle_deg, corner_ok, boundary)
    return mesh


def _degenerate_mask(pts, simplices) -> np.ndarray:
    """Zero-area slivers emitted by qhull when boundary nodes are collinear."""
    p = pts[simplices]
    area2 = np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                   - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    edge2 = np.stack([np.sum((p[:, (k + 1) % 3] - p[:, k]) ** 2, axis=1)
                      for k in range(3)], axis=1).max(axis=1)
    return area2 <= 1e-12 * edge2


def _segments_to_split(enc_row, nearest, tri_row, nb, halves):
    """Boundary subsegments to split for a rejected circumcenter: everything
    it encroaches, or the triangle's own boundary edge, or the nearest one."""
    enc = np.nonzero(enc_row < 0)[0]
    if len(enc):
        return enc[np.argsort(enc_row[enc])][:4].tolist()
    own = []
    bverts = sorted(v for v in tri_row if v < nb)
    for u, v in zip(bverts, bverts[1:]):
        if v == u + 1:
            own.append(u)
    if len({0, nb - 1} & set(bverts)) == 2:
        own.append(nb - 1)
    if own:
        return [max(own, key=lambda s: halves[s])]
    return [int(nearest)]


def _refinement_candidates(pts, bad_tris):
    """Circumcenters of bad triangles, worst (largest) first."""
    with np.errstate(divide="ignore", invalid="ignore"):
        centers, radii = _circumcenters(pts, bad_tris)
    ok = np.isfinite(radii) & np.all(np.isfinite(centers), axis=1)
    centers, radii, bad_tris = centers[ok], radii[ok], bad_tris[ok]
    order = np.argsort(-radii)
    return centers[order], radii[order], bad_tris[order]


def _corner_angles_deg(domain: ConvexDomain) -> np.ndarray:
    v = domain.vertices
    e_in = v - np.roll(v, 1, axis=0)
    e_out = np.roll(v, -1, axis=0) - v
    cos = -np.einsum("ij,ij->i", e_in, e_out) / (
        np.linalg.norm(e_in, axis=1) * np.linalg.norm(e_out, axis=1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _hex_lattice(domain: ConvexDomain, h: float) -> np.ndarray:
    """Equilateral lattice clipped to the polygon with a boundary margin.

    The lattice lives in the domain's canonical frame (minimal-width
    direction along y, anchored at the incenter), so congruent domains get
    congruent meshes and eigenvalues are isometry-invariant to round-off."""
    from hotspotlab.geometry import _min_width_direction

    margin = 0.6 * h
    angle, _ = _min_width_direction(domain)
    ca, sa = math.cos(angle), math.sin(angle)
    R = np.array([[ca, -sa], [sa, ca]])  # world -> canonical
    inc = np.asarray(domain.incenter)
    q = (domain.vertices - inc) @ R.T
    lo = q.min(axis=0) - h
    hi = q.max(axis=0) + h
    dy = h * math.sqrt(3.0) / 2.0
    rows = []
    for j in range(int(math.floor(lo[1] / dy)), int(math.ceil(hi[1] / dy)) + 1):
        y = j * dy
        off = 0.5 * h if j % 2 else 0.0
        i0 = int(math.floor((lo[0] - off) / h))
        i1 = int(math.ceil((hi[0] - off) / h))
        xs = off + h * np.arange(i0, i1 + 1)
        rows.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    pts = np.concatenate(rows, axis=0) @ R + inc
    keep = domain.distance_to_boundary(pts) >= margin
    return pts[keep]


def _validate(mesh: TriMesh, min_angle_deg, corner_ok, boundary):
    areas = mesh.tri_areas
    if np.any(areas <= 0):
        raise MeshError("non-positive triangle area")
    total = float(areas.sum())
    if abs(total - mesh.domain.area) > 1e-9 * mesh.domain.area:
        raise MeshError(f"mesh area {total} != polygon area {mesh.domain.area}")
    if np.all(corner_ok):  # sharp input corners keep their corner triangle
        ang = _tri_min_angles(mesh.nodes, mesh.triangles).min()
        if ang < min_angle_deg - 1e-9:
            raise MeshError(f"mesh quality {ang:.3f} deg below {min_angle_deg}")
    bd = mesh.nodes[mesh.boundary_node_flags]
    d = np.abs(mesh.domain.distance_to_boundary(bd))
    if d.max() > 1e-12 * mesh.domain.scale:
        raise MeshError("boundary node off the boundary")
