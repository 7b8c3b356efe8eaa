"""Exact convex-polygon computations.

Domains are convex polygons with counterclockwise vertices. Curved shapes
(disk, ellipse, stadium) are represented as k-gons so that a single code
path serves all geometry queries. All operations are pure functions on
immutable data and safe to call from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

__all__ = [
    "ConvexDomain",
    "NormalizationReport",
    "DiameterPairSet",
    "ClusteringReport",
    "Provenance",
    "polygon",
    "rectangle",
    "disk",
    "ellipse",
    "stadium",
    "random_hull",
    "from_spec",
]

# scale-free tolerance for collinearity / duplicate detection
_TURN_TOL = 1e-12


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    """Construction record: explicit polygon, or polygonalized curved shape."""

    kind: str
    params: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True, eq=False)
class ConvexDomain:
    """Strictly convex polygon, counterclockwise, no repeated or collinear vertices."""

    vertices: np.ndarray
    provenance: Provenance = field(default_factory=lambda: Provenance("polygon"))

    def __init__(self, vertices, provenance: Optional[Provenance] = None):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("need at least 3 planar vertices")
        v = _clean_vertices(v)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(
            self, "provenance", provenance or Provenance("polygon")
        )
        self.vertices.setflags(write=False)

    # -- cached derived data -------------------------------------------------

    @cached_property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def area(self) -> float:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        return 0.5 * float(np.sum(v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]))

    @cached_property
    def perimeter(self) -> float:
        v = self.vertices
        return float(np.sum(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)))

    @cached_property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        c = v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]
        g = ((v + w) * c[:, None]).sum(axis=0) / (6.0 * self.area)
        g.setflags(write=False)
        return g

    @cached_property
    def edge_normals(self) -> np.ndarray:
        """Unit inward normals, one per edge (edge i joins vertex i to i+1)."""
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.stack([-e[:, 1], e[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1)[:, None]
        n.setflags(write=False)
        return n

    @cached_property
    def edge_offsets(self) -> np.ndarray:
        """Offsets b with inside test  n . p - b >= 0."""
        b = np.einsum("ij,ij->i", self.edge_normals, self.vertices)
        b.setflags(write=False)
        return b

    @cached_property
    def _inradius_incenter(self):
        return _chebyshev_center(self)

    @property
    def inradius(self) -> float:
        return self._inradius_incenter[0]

    @property
    def incenter(self) -> np.ndarray:
        return self._inradius_incenter[1]

    @cached_property
    def _diameter(self):
        return _diameter_calipers(self.vertices)

    # -- queries ---------------------------------------------------------------

    def signed_edge_distances(self, p) -> np.ndarray:
        """Distance to each edge line, positive on the inside."""
        p = np.asarray(p, dtype=float)
        return p @ self.edge_normals.T - self.edge_offsets

    def distance_to_boundary(self, p):
        """min over edges of the signed edge-line distance (positive inside)."""
        d = self.signed_edge_distances(p)
        return d.min(axis=-1)

    def contains(self, p, tol: Optional[float] = None) -> bool:
        if tol is None:
            tol = 1e-12 * self.scale
        return bool(np.all(self.signed_edge_distances(p) >= -tol))

    def contains_many(self, pts, tol: Optional[float] = None) -> np.ndarray:
        if tol is None:
            tol = 1e-12 * self.scale
        return np.all(self.signed_edge_distances(pts) >= -tol, axis=-1)

    @cached_property
    def scale(self) -> float:
        v = self.vertices
        return float(np.abs(v).max() + (v.max(0) - v.min(0)).max())

    def diameter(self):
        """Farthest vertex pair: (point, point, distance), by rotating calipers."""
        p, q, d = self._diameter
        return p.copy(), q.copy(), d

    def all_diameter_pairs(self, rel_tol: Optional[float] = None) -> "DiameterPairSet":
        """All vertex pairs within rel_tol of the diameter, with a 2-means
        clustering of their endpoints.

        rel_tol defaults to 1e-9 for explicit polygons and to 16/k^2 for
        polygonalized curved domains (absorbs the chord-sampling error).
        """
        if rel_tol is None:
            rel_tol = self.default_diameter_rel_tol
        if not 0.0 < rel_tol <= 1e-3:
            raise GeometryError("rel_tol must be in (0, 1e-3]")
        return _near_diameter_pairs(self, rel_tol)

    @cached_property
    def default_diameter_rel_tol(self) -> float:
        k = self.provenance.params.get("polygonalization_k")
        if self.provenance.kind in ("disk", "ellipse", "stadium") and k:
            return min(1e-3, max(1e-9, 16.0 / k**2))
        return 1e-9

    def verify_diameter_clustering(self, c_max: float = 10.0,
                                   rel_tol: Optional[float] = None) -> "ClusteringReport":
        """Check that near-diameter endpoints fall in two tips of radius
        c_max * inradius. Requires an elongated domain (diam/inrad >= 4)."""
        aspect = self._diameter[2] / self.inradius
        if aspect < 4.0:
            raise GeometryError(
                f"diameter clustering verifier needs diam/inrad >= 4, got {aspect:.3g}"
            )
        ps = self.all_diameter_pairs(rel_tol)
        c_est = ps.cluster_radius_over_inrad
        return ClusteringReport(
            c_estimate=c_est, passed=bool(c_est <= c_max), c_max=c_max,
            n_pairs=len(ps.pairs), aspect=aspect,
        )

    def inradius_incenter(self):
        r, c = self._inradius_incenter
        return r, c.copy()

    def ball_volume(self, center, radius: float) -> float:
        """Exact area of the polygon intersected with a disk.

        The boundary of the intersection is walked edge by edge; inside-disk
        portions contribute triangle areas, outside portions contribute
        circular-sector sweeps. Center must lie in the closed polygon.
        """
        return _ball_volume(self, np.asarray(center, dtype=float), float(radius))

    def normalize(self):
        """Rotate so the minimal-width direction is the y-axis, dilate to
        inradius 1, translate so the leftmost vertex sits at x = 0 and the
        incenter at y = 0. Returns (domain, NormalizationReport)."""
        return _normalize(self)

    def transformed(self, angle: float = 0.0, scale: float = 1.0,
                    translation=(0.0, 0.0)) -> "ConvexDomain":
        """Rotate by angle, then scale about the origin, then translate."""
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s], [s, c]])
        v = (self.vertices @ R.T) * scale + np.asarray(translation, dtype=float)
        return ConvexDomain(v, provenance=self.provenance)

    @cached_property
    def aspect(self) -> float:
        """diam / inrad, the normalized diameter."""
        return self._diameter[2] / self.inradius


def _clean_vertices(v: np.ndarray) -> np.ndarray:
    scale = float(np.abs(v).max()) or 1.0
    # drop consecutive duplicates
    keep = [0]
    for i in range(1, len(v)):
        if np.linalg.norm(v[i] - v[keep[-1]]) > 1e-12 * scale:
            keep.append(i)
    if len(keep) > 1 and np.linalg.norm(v[keep[-1]] - v[keep[0]]) <= 1e-12 * scale:
        keep.pop()
    v = v[keep]
    if len(v) < 3:
        raise GeometryError("degenerate polygon after duplicate removal")
    # enforce counterclockwise
    w = np.roll(v, -1, axis=0)
    if 0.5 * np.sum(v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]) < 0:
        v = v[::-1].copy()
    # remove collinear vertices (normalized turn below tolerance), verify convex
    out = []
    n = len(v)
    for i in range(n):
        a, b, c = v[i - 1], v[i], v[(i + 1) % n]
        e1, e2 = b - a, c - b
        cross = e1[0] * e2[1] - e1[1] * e2[0]
        sin_turn = cross / (np.linalg.norm(e1) * np.linalg.norm(e2))
        if sin_turn < -_TURN_TOL:
            raise GeometryError("polygon is not convex")
        if sin_turn > _TURN_TOL:
            out.append(b)
    if len(out) < 3:
        raise GeometryError("degenerate polygon after collinearity removal")
    return np.array(out)


# -- diameter -------------------------------------------------------------------


def _diameter_calipers(v: np.ndarray):
    """Rotating calipers over the upper/lower chains. Returns (p, q, distance)."""

    def orient(p, q, r):
        return (q[1] - p[1]) * (r[0] - p[0]) - (q[0] - p[0]) * (r[1] - p[1])

    pts = sorted(map(tuple, v))
    upper, lower = [], []
    for p in pts:
        while len(upper) > 1 and orient(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        while len(lower) > 1 and orient(lower[-2], lower[-1], p) >= 0:
            lower.pop()
        upper.append(p)
        lower.append(p)
    i, j = 0, len(lower) - 1
    best = (-1.0, None, None)
    while i < len(upper) - 1 or j > 0:
        p, q = upper[i], lower[j]
        d = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2
        if d > best[0]:
            best = (d, p, q)
        if i == len(upper) - 1:
            j -= 1
        elif j == 0:
            i += 1
        elif ((upper[i + 1][1] - upper[i][1]) * (lower[j][0] - lower[j - 1][0])
              > (lower[j][1] - lower[j - 1][1]) * (upper[i + 1][0] - upper[i][0])):
            i += 1
        else:
            j -= 1
    p, q = upper[i], lower[j]
    d = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2
    if d > best[0]:
        best = (d, p, q)
    return np.array(best[1]), np.array(best[2]), math.sqrt(best[0])


@dataclass(frozen=True)
class DiameterPairSet:
    pairs: list  # (point, point, distance), distance within rel_tol of diam
    cluster_centers: np.ndarray  # (2, 2)
    cluster_radius_over_inrad: float
    rel_tol: float


@dataclass(frozen=True)
class ClusteringReport:
    c_estimate: float
    passed: bool
    c_max: float
    n_pairs: int
    aspect: float


def _near_diameter_pairs(dom: ConvexDomain, rel_tol: float) -> DiameterPairSet:
    v = dom.vertices
    d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
    diam = math.sqrt(d2.max())
    cut = ((1.0 - rel_tol) * diam) ** 2
    ii, jj = np.nonzero(np.triu(d2 >= cut, k=1))
    pairs = [(v[i].copy(), v[j].copy(), math.sqrt(d2[i, j])) for i, j in zip(ii, jj)]
    ends = np.concatenate([v[ii], v[jj]], axis=0)
    centers = _two_means(ends, ends[0], ends[len(ii)])
    radius = 0.0
    for p in ends:
        radius = max(radius, min(np.linalg.norm(p - centers[0]),
                                 np.linalg.norm(p - centers[1])))
    return DiameterPairSet(
        pairs=pairs,
        cluster_centers=centers,
        cluster_radius_over_inrad=radius / dom.inradius,
        rel_tol=rel_tol,
    )


def _two_means(pts: np.ndarray, c0, c1, max_iter: int = 100):
    """Lloyd iteration with deterministic initialization."""
    centers = np.array([c0, c1], dtype=float)
    labels = None
    for _ in range(max_iter):
        d0 = np.linalg.norm(pts - centers[0], axis=1)
        d1 = np.linalg.norm(pts - centers[1], axis=1)
        new = (d1 < d0).astype(int)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in (0, 1):
            sel = pts[labels == k]
            if len(sel):
                centers[k] = sel.mean(axis=0)
    return centers


# -- Chebyshev center via a self-contained dense simplex ----------------------


def _chebyshev_center(dom: ConvexDomain):
    """Largest inscribed disk: maximize r s.t. n_i . c + r <= n_i . v_i.

    Solved by a dense simplex on at most a few hundred constraints; the
    origin is shifted to the vertex centroid so the slack basis is feasible.
    """
    g = dom.vertices.mean(axis=0)
    n = dom.edge_normals
    # distance from the interior shift point g to each edge; all positive,
    # which makes the slack basis feasible. Constraint: -n.u + r <= dist_g
    dist_g = n @ g - dom.edge_offsets
    if np.any(dist_g <= 0):
        raise GeometryError("interior shift failed; corrupted polygon")
    m = len(dist_g)
    # variables: u+, u-, v+, v-, r  (all >= 0)
    A = np.column_stack([-n[:, 0], n[:, 0], -n[:, 1], n[:, 1], np.ones(m)])
    c = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
    x = _simplex_max(c, A, dist_g)
    center = g + np.array([x[0] - x[1], x[2] - x[3]])
    r = float(x[4])
    # the LP optimum must equal the min edge distance at the center
    check = float(dom.distance_to_boundary(center))
    if abs(check - r) > 1e-9 * max(1.0, r):
        raise GeometryError(f"inradius LP post-check failed: {r} vs {check}")
    center.setflags(write=False)
    return r, center


def _simplex_max(c, A, b, max_iter: Optional[int] = None):
    """Dense tableau simplex for  max c.x  s.t.  A x <= b, x >= 0, b >= 0.

    Dantzig pricing with a Bland fallback for anti-cycling.
    """
    m, n = A.shape
    max_iter = max_iter or 50 * (m + n)
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, :n] = -c
    basis = list(range(n, n + m))
    tol = 1e-11
    for it in range(max_iter):
        row = T[m, :-1]
        if it < 20 * m:
            j = int(np.argmin(row))
            if row[j] >= -tol:
                break
        else:  # Bland's rule
            neg = np.nonzero(row < -tol)[0]
            if len(neg) == 0:
                break
            j = int(neg[0])
        col = T[:m, j]
        pos = col > tol
        if not np.any(pos):
            raise GeometryError("unbounded LP; corrupted polygon")
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / col[pos]
        i = int(np.argmin(ratios))
        piv = T[i, j]
        T[i] /= piv
        for k in range(m + 1):
            if k != i and T[k, j] != 0.0:
                T[k] -= T[k, j] * T[i]
        basis[i] = j
    else:
        raise GeometryError("simplex did not terminate")
    x = np.zeros(n + m)
    for i, bi in enumerate(basis):
        x[bi] = T[i, -1]
    return x[:n]


# -- normalization --------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationReport:
    rotation_angle: float
    scale: float
    inradius: float  # post-normalization, = 1
    diameter: float  # post-normalization
    aspect_N: float  # = normalized diameter
    incenter: np.ndarray  # post-normalization


def _min_width_direction(dom: ConvexDomain):
    """Width is minimized with one edge flush; scan edge normals."""
    v = dom.vertices
    proj = v @ dom.edge_normals.T  # (n_vertices, n_edges)
    widths = proj.max(axis=0) - proj.min(axis=0)
    wmin = widths.min()
    # tie-break: smallest rotation angle needed, then lowest edge index
    cand = np.nonzero(widths <= wmin * (1.0 + 1e-12))[0]
    best = None
    for i in cand:
        nx, ny = dom.edge_normals[i]
        theta = math.pi / 2 - math.atan2(ny, nx)  # rotation sending normal to +y
        while theta > math.pi / 2:  # width direction is sign-ambiguous
            theta -= math.pi
        while theta <= -math.pi / 2:
            theta += math.pi
        key = (abs(theta), i)
        if best is None or key < best[0]:
            best = (key, theta, i)
    return best[1], float(wmin)


def _normalize(dom: ConvexDomain):
    angle, width = _min_width_direction(dom)
    rotated = dom.transformed(angle=angle)
    r, _ = rotated.inradius_incenter()
    scale = 1.0 / r
    scaled = rotated.transformed(scale=scale)
    r2, c2 = scaled.inradius_incenter()
    shift = np.array([-scaled.vertices[:, 0].min(), -c2[1]])
    normed = scaled.transformed(translation=shift)
    rn, cn = normed.inradius_incenter()
    _, _, diam = normed.diameter()
    report = NormalizationReport(
        rotation_angle=angle,
        scale=scale,
        inradius=rn,
        diameter=diam,
        aspect_N=diam / rn,
        incenter=cn,
    )
    return normed, report


# -- polygon/disk intersection area ----------------------------------------------


def _angle(u, v) -> float:
    return math.atan2(u[0] * v[1] - u[1] * v[0], u[0] * v[0] + u[1] * v[1])


def _edge_clip_area(a, b, R: float) -> float:
    """Contribution of directed edge a->b (origin at disk center, radius R)."""
    d = b - a
    qa = d @ d
    if qa == 0.0:
        return 0.0
    qb = 2.0 * (a @ d)
    qc = a @ a - R * R
    disc = qb * qb - 4.0 * qa * qc
    if disc <= 0.0:
        # no chord: segment entirely outside (tangency has zero area)
        return 0.5 * R * R * _angle(a, b)
    s = math.sqrt(disc)
    t1 = (-qb - s) / (2.0 * qa)
    t2 = (-qb + s) / (2.0 * qa)
    lo = min(1.0, max(0.0, t1))
    hi = min(1.0, max(0.0, t2))
    p_lo = a + lo * d
    p_hi = a + hi * d
    area = 0.0
    if lo > 0.0:
        area += 0.5 * R * R * _angle(a, p_lo)
    area += 0.5 * (p_lo[0] * p_hi[1] - p_lo[1] * p_hi[0])
    if hi < 1.0:
        area += 0.5 * R * R * _angle(p_hi, b)
    return area


def _ball_volume(dom: ConvexDomain, center: np.ndarray, radius: float) -> float:
    if radius <= 0.0:
        raise GeometryError("radius must be positive")
    if not dom.contains(center, tol=1e-9 * dom.scale):
        raise GeometryError(f"ball center {center} outside the domain")
    v = dom.vertices
    total = 0.0
    n = len(v)
    for i in range(n):
        a = v[i] - center
        b = v[(i + 1) % n] - center
        # split an edge passing through the center so each piece subtends < pi
        cr = a[0] * b[1] - a[1] * b[0]
        if abs(cr) < 1e-14 * dom.scale**2 and (a @ b) < 0.0:
            total += _edge_clip_area(a, np.zeros(2), radius)
            total += _edge_clip_area(np.zeros(2), b, radius)
        else:
            total += _edge_clip_area(a, b, radius)
    return total


# -- builders ---------------------------------------------------------------------


def polygon(vertices) -> ConvexDomain:
    return ConvexDomain(vertices, provenance=Provenance("polygon"))


def rectangle(length: float, height: float = 1.0) -> ConvexDomain:
    if length <= 0 or height <= 0:
        raise GeometryError("rectangle sides must be positive")
    v = [(0.0, 0.0), (length, 0.0), (length, height), (0.0, height)]
    return ConvexDomain(v, provenance=Provenance(
        "rectangle", {"length": length, "height": height}))


def disk(radius: float = 1.0, k: int = 256, center=(0.0, 0.0)) -> ConvexDomain:
    if radius <= 0 or k < 8:
        raise GeometryError("disk needs radius > 0 and k >= 8")
    th = 2.0 * math.pi * np.arange(k) / k
    v = np.stack([radius * np.cos(th), radius * np.sin(th)], axis=1)
    v += np.asarray(center, dtype=float)
    return ConvexDomain(v, provenance=Provenance(
        "disk", {"radius": radius, "polygonalization_k": k}))


def ellipse(a: float, b: float = 1.0, k: int = 256) -> ConvexDomain:
    """Polygonalized ellipse with semi-axes (a, b).

    Vertices are spaced so every chord has the same sagitta (arc spacing
    proportional to curvature^(-1/2)): tips are resolved accurately without
    the extreme point crowding of equal-parameter sampling. Both axis
    endpoints are sampled exactly when k is even.
    """
    if a <= 0 or b <= 0 or k < 8:
        raise GeometryError("ellipse needs positive semi-axes and k >= 8")
    phi = np.linspace(0.0, 2.0 * math.pi, 100001)
    g = np.sqrt(a**2 * np.sin(phi) ** 2 + b**2 * np.cos(phi) ** 2)
    kappa = a * b / g**3
    w = np.sqrt(kappa) * g  # d(sample measure)/d(phi)
    W = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(phi))])
    targets = W[-1] * np.arange(k) / k
    th = np.interp(targets, W, phi)
    v = np.stack([a * np.cos(th), b * np.sin(th)], axis=1)
    return ConvexDomain(v, provenance=Provenance(
        "ellipse", {"semi_axis_a": a, "semi_axis_b": b, "polygonalization_k": k}))


def stadium(length: float, radius: float = 1.0, k: int = 256) -> ConvexDomain:
    """Rectangle of the given straight length and height 2*radius, with
    semicircular caps; total length = length + 2*radius."""
    if length <= 0 or radius <= 0 or k < 16:
        raise GeometryError("stadium needs positive dimensions and k >= 16")
    half = k // 2
    right = -math.pi / 2 + math.pi * (np.arange(half + 1) / half)
    left = math.pi / 2 + math.pi * (np.arange(half + 1) / half)
    pts = []
    for t in right:
        pts.append((length + radius * math.cos(t), radius * math.sin(t)))
    for t in left:
        pts.append((radius * math.cos(t), radius * math.sin(t)))
    return ConvexDomain(pts, provenance=Provenance(
        "stadium", {"straight_length": length, "radius": radius,
                    "polygonalization_k": k}))


def random_hull(n_points: int, box_aspect: float, seed: int) -> ConvexDomain:
    """Convex hull of n_points uniform samples in a box_aspect x 1 box."""
    from scipy.spatial import ConvexHull

    if n_points < 3 or box_aspect <= 0:
        raise GeometryError("random_hull needs n_points >= 3, box_aspect > 0")
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(0x48554C4C,))))
    pts = rng.uniform(size=(n_points, 2)) * np.array([box_aspect, 1.0])
    hull = ConvexHull(pts)
    return ConvexDomain(pts[hull.vertices], provenance=Provenance(
        "random_hull", {"n_points": n_points, "box_aspect": box_aspect,
                        "seed": int(seed)}))


def from_spec(spec: dict) -> ConvexDomain:
    """Build a domain from a JSON-style spec dict (see schemas/domain_spec)."""
    kind = spec.get("kind")
    k = int(spec.get("polygonalization_k", 256))
    if kind == "polygon":
        return polygon(spec["vertices"])
    if kind == "rectangle":
        return rectangle(float(spec["length"]), float(spec.get("height", 1.0)))
    if kind == "disk":
        return disk(float(spec.get("radius", 1.0)), k)
    if kind == "ellipse":
        if "aspect" in spec:
            return ellipse(float(spec["aspect"]), 1.0, k)
        return ellipse(float(spec["semi_axis_a"]), float(spec["semi_axis_b"]), k)
    if kind == "stadium":
        if "aspect" in spec:
            # aspect = total length / height, with unit cap radius
            a = float(spec["aspect"])
            return stadium(2.0 * a - 2.0, 1.0, k)
        return stadium(float(spec["straight_length"]),
                       float(spec.get("radius", 1.0)), k)
    if kind == "random_hull":
        return random_hull(int(spec["n_points"]), float(spec["box_aspect"]),
                           int(spec["seed"]))
    raise GeometryError(f"unknown domain kind: {kind!r}")
