"""Verification campaigns over domain families.

Each verifier runs one quantitative check end to end (geometry, FEM solve,
Monte Carlo as needed) and returns a VerificationReport whose pass flag is
recomputable from its fitted constants and tolerances alone. No ground-truth
constants are assumed anywhere: fits are reported and checked against
generous configurable caps, and boundedness across families is the evidence
of universality.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from hotspotlab import geometry, spectral, stochastic
from hotspotlab.geometry import ConvexDomain
from hotspotlab.rng import SALT_SAMPLING, substream

__all__ = [
    "VerificationReport",
    "GaussianBoundFit",
    "domain_family",
    "verify_main_theorem",
    "verify_lemma1",
    "verify_lemma2",
    "verify_lemma3",
    "verify_lemma4",
    "fit_gaussian_bounds",
    "verify_theorem1_bounds",
    "eigenvalue_scaling",
    "nodal_width_report",
    "hitting_time_report",
    "write_reports_csv",
    "write_reports_json",
]

LEMMA_IDS = ("main_theorem", "lemma1", "lemma2", "lemma3", "lemma4",
             "theorem1_bounds", "eigenvalue_scaling", "nodal_width",
             "hitting_time")


@dataclass(frozen=True)
class VerificationReport:
    lemma_id: str
    domain_spec: dict
    fitted_constants: dict
    passed: bool
    tolerances: dict
    runtime_seconds: float

    def self_audit(self) -> bool:
        """Recompute the verdict from constants and tolerances alone."""
        return AUDIT_RULES[self.lemma_id](self.fitted_constants,
                                          self.tolerances)

    def to_dict(self) -> dict:
        return {
            "lemma_id": self.lemma_id,
            "domain_spec": self.domain_spec,
            "fitted_constants": self.fitted_constants,
            "pass": self.passed,
            "tolerances": self.tolerances,
            "runtime_seconds": self.runtime_seconds,
        }


@dataclass(frozen=True)
class GaussianBoundFit:
    c1: float
    c2: float
    c3: float
    c4: float
    violation_count: int
    cells_used: int
    decay_rate: float  # least-squares slope the envelope brackets


def _finite_pos(*vals):
    return all(math.isfinite(v) and v > 0 for v in vals)


AUDIT_RULES = {
    "main_theorem": lambda fc, tol: fc["c_best"] <= tol["c_max"],
    "lemma1": lambda fc, tol: fc["c_estimate"] <= tol["c_max"],
    "lemma2": lambda fc, tol: _finite_pos(fc["ratio_min"], fc["ratio_max"]),
    "lemma3": lambda fc, tol: _finite_pos(fc["c_delta_hat"]),
    "lemma4": lambda fc, tol: fc["m_over_phimax"] > 0
    and fc["c"] <= tol["c_max"],
    "theorem1_bounds": lambda fc, tol: _finite_pos(
        fc["c1"], fc["c2"], fc["c3"], fc["c4"])
    and fc["violation_count"] == 0 and fc["c1"] <= fc["c3"]
    and fc["c4"] <= fc["c2"],
    "eigenvalue_scaling": lambda fc, tol: fc["mu_N2_max"] <= tol["cap"]
    and fc.get("rect_rel_err_max", 0.0) <= tol["rect_rel_tol"],
    "nodal_width": lambda fc, tol: fc["width"] <= tol["width_cap"]
    and fc["width_times_N"] <= tol["width_N_cap"],
    "hitting_time": lambda fc, tol: fc["p_B"] <= tol["p_B_max"]
    and fc["exp_indicator"] > tol["exp_indicator_min"],
}


def _report(lemma_id, domain_spec, fitted, passed, tolerances, t0):
    rep = VerificationReport(
        lemma_id=lemma_id, domain_spec=domain_spec, fitted_constants=fitted,
        passed=bool(passed), tolerances=tolerances,
        runtime_seconds=time.time() - t0)
    assert rep.self_audit() == rep.passed, "report is not self-auditing"
    return rep


def _domain_spec(domain: ConvexDomain, **extra) -> dict:
    d = domain.provenance.as_dict()
    d.update(extra)
    return d


# -- families -----------------------------------------------------------------


def domain_family(config: dict, seed: int = 0):
    """Deterministic domain family; returns [(domain, nominal_N), ...].

    nominal_N is the family's elongation parameter (side ratio), used by the
    eigenvalue and nodal-width scaling reports.
    """
    family = config.get("family")
    k = int(config.get("polygonalization_k", 256))
    out = []
    if family == "rectangles":
        for N in config["N"]:
            out.append((geometry.rectangle(float(N), 1.0), float(N)))
    elif family == "ellipses":
        for a in config["aspect"]:
            out.append((geometry.ellipse(float(a), 1.0, k), float(a)))
    elif family == "stadiums":
        for a in config["aspect"]:
            if a <= 1:
                raise ValueError("stadium aspect must exceed 1")
            out.append((geometry.stadium(2.0 * float(a) - 2.0, 1.0, k),
                        float(a)))
    elif family == "random_hulls":
        count = int(config["count"])
        n_points = int(config.get("n_points", 30))
        lo, hi = config.get("box_aspect", [4.0, 16.0])
        ss = np.random.SeedSequence(int(seed)).spawn(count)
        for i in range(count):
            M = float(lo) + (float(hi) - float(lo)) * (
                i / max(count - 1, 1))
            member_seed = int(ss[i].generate_state(1, np.uint32)[0])
            out.append((geometry.random_hull(n_points, M, member_seed), M))
    elif family == "triangles":
        for w, h in config.get("shapes", [[4.0, 3.0], [8.0, 2.0], [12.0, 2.0]]):
            dom = geometry.polygon([(0, 0), (float(w), 0), (0, float(h))])
            out.append((dom, max(w, h) / min(w, h)))
    else:
        raise ValueError(f"unknown family {family!r}")
    if not out:
        raise ValueError("empty family")
    return out


# -- individual verifiers --------------------------------------------------------


def _band_points(pair, mesh, band_epsilon):
    """All nodes in the extremal bands (the discrete 'every max and min')."""
    phi = pair.phi
    hi = phi >= phi.max() * (1.0 - band_epsilon)
    lo = phi <= phi.min() * (1.0 - band_epsilon)
    return mesh.nodes[hi | lo]


def verify_main_theorem(domain: ConvexDomain, h: float = 0.05,
                        band_epsilon: float = 1e-3, c_max: float = 10.0,
                        seed: int = 0, rel_tol: Optional[float] = None,
                        solved=None) -> VerificationReport:
    """Distance from every extremal-band point to the diameter tips, in
    inradius units; fitted over the best diameter pair, reported also for
    the worst pair."""
    t0 = time.time()
    nd, nrep = domain.normalize()
    if solved is None:
        mesh, pair = spectral.solve_domain(nd, h, seed=seed)
    else:
        mesh, pair = solved
    pts = _band_points(pair, mesh, band_epsilon)
    pairs = nd.all_diameter_pairs(rel_tol)
    ratios = []
    for p, q, _ in pairs.pairs:
        d = np.minimum(np.linalg.norm(pts - p, axis=1),
                       np.linalg.norm(pts - q, axis=1))
        ratios.append(float(d.max()))  # inradius == 1 after normalization
    fitted = {
        "c_best": min(ratios),
        "c_worst": max(ratios),
        "lemma1_cluster_radius": pairs.cluster_radius_over_inrad,
        "n_diameter_pairs": len(pairs.pairs),
        "mu1": pair.mu1,
        "aspect_N": nrep.aspect_N,
        "n_band_points": len(pts),
    }
    return _report("main_theorem", _domain_spec(domain, h=h,
                                                band_epsilon=band_epsilon),
                   fitted, fitted["c_best"] <= c_max, {"c_max": c_max}, t0)


def verify_lemma1(domain: ConvexDomain, c_max: float = 10.0,
                  rel_tol: Optional[float] = None) -> VerificationReport:
    t0 = time.time()
    rep = domain.verify_diameter_clustering(c_max=c_max, rel_tol=rel_tol)
    fitted = {"c_estimate": rep.c_estimate, "n_pairs": rep.n_pairs,
              "aspect_N": rep.aspect}
    return _report("lemma1", _domain_spec(domain), fitted, rep.passed,
                   {"c_max": c_max}, t0)


def verify_lemma2(domain: ConvexDomain, delta: float, n_pairs: int = 100,
                  seed: int = 0) -> VerificationReport:
    """Sampled comparability of V(x,1) against V(y,delta) for |x-y| <= 1,
    including adversarial pairs at the diameter tips."""
    t0 = time.time()
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must be in (0, 1]")
    nd, _ = domain.normalize()
    rng = substream(seed, SALT_SAMPLING, 2)
    lo, hi = nd.vertices.min(axis=0), nd.vertices.max(axis=0)
    inc = nd.incenter
    pairs = []
    p1, p2, _ = nd.diameter()
    for tip in (p1, p2):  # tips are the degenerate geometry
        u = inc - tip
        u = u / np.linalg.norm(u)
        pairs.append((tip, tip))
        pairs.append((tip, tip + 0.99 * u))
        pairs.append((tip + 0.5 * u, tip))
    while len(pairs) < n_pairs:
        x = lo + rng.uniform(size=2) * (hi - lo)
        if not nd.contains(x):
            continue
        y = x + rng.uniform(-1.0, 1.0, size=2) * 0.7071
        if nd.contains(y) and np.hypot(*(x - y)) <= 1.0:
            pairs.append((x, y))
    ratios = np.array([nd.ball_volume(x, 1.0) / nd.ball_volume(y, delta)
                       for x, y in pairs])
    fitted = {"ratio_min": float(ratios.min()),
              "ratio_max": float(ratios.max()),
              "delta": delta, "n_pairs": len(pairs)}
    ok = _finite_pos(fitted["ratio_min"], fitted["ratio_max"])
    return _report("lemma2", _domain_spec(domain, delta=delta), fitted, ok,
                   {}, t0)


def verify_lemma3(domain: ConvexDomain, delta: float = 0.25,
                  binning_h: float = 0.25, n_paths: int = 10**5,
                  seed: int = 0, offset: float = 0.5,
                  dt: Optional[float] = None) -> VerificationReport:
    """Short-time kernel at x dominated by the unit-time kernel at a
    neighbor y: empirical sup-ratio over well-sampled cells."""
    from hotspotlab.mesh import triangulate

    t0 = time.time()
    nd, _ = domain.normalize()
    mesh = triangulate(nd, binning_h)
    inc = nd.incenter
    x = inc.copy()
    y = inc + np.array([offset, 0.0])
    if not nd.contains(y):
        y = inc - np.array([offset, 0.0])
    rep = stochastic.verify_kernel_domination(nd, mesh, x, y, delta,
                                              n_paths=n_paths, seed=seed,
                                              dt=dt)
    fitted = {"c_delta_hat": rep.c_delta_hat, "delta": delta,
              "cells_used": rep.cells_used,
              "argmax_cell_x": float(rep.argmax_cell_center[0]),
              "argmax_cell_y": float(rep.argmax_cell_center[1])}
    return _report("lemma3", _domain_spec(domain, delta=delta), fitted,
                   _finite_pos(rep.c_delta_hat), {}, t0)


def verify_lemma4(domain: ConvexDomain, h: float = 0.05, radius: float = 1.0,
                  c_max: float = 100.0, seed: int = 0,
                  solved=None) -> VerificationReport:
    """Near-plateau of the eigenfunction on the unit ball at the hot spot:
    fitted decay constant c with phi >= exp(-c mu1) phi_max on the ball."""
    t0 = time.time()
    nd, nrep = domain.normalize()
    if nrep.aspect_N < 8:
        raise ValueError("plateau check expects an elongated domain "
                         f"(aspect_N >= 8), got {nrep.aspect_N:.3g}")
    if solved is None:
        mesh, pair = spectral.solve_domain(nd, h, seed=seed)
    else:
        mesh, pair = solved
    imax = int(np.argmax(pair.phi))
    x_max = mesh.nodes[imax]
    near = np.linalg.norm(mesh.nodes - x_max, axis=1) <= radius
    m = float(pair.phi[near].min())
    phimax = float(pair.phi[imax])
    ratio = m / phimax
    c = -math.log(ratio) / pair.mu1 if ratio > 0 else math.inf
    fitted = {
        "c": c,
        "m_over_phimax": ratio,
        "mu1": pair.mu1,
        "aspect_N": nrep.aspect_N,
        # geometric corollary constant: 1 - m/phimax <= c' (inrad/diam)^2
        "c_prime": c * pair.mu1 * nrep.aspect_N**2,
        "n_ball_nodes": int(near.sum()),
    }
    ok = ratio > 0 and c <= c_max
    return _report("lemma4", _domain_spec(domain, h=h, radius=radius),
                   fitted, ok, {"c_max": c_max}, t0)


def fit_gaussian_bounds(domain: ConvexDomain, mesh, sources, times,
                        n_paths: int = 4 * 10**4, seed: int = 0,
                        dt: Optional[float] = None,
                        min_count: int = 20) -> GaussianBoundFit:
    """Two-sided Gaussian envelope for the empirical kernel.

    For each (source, t) the per-cell quantity q = p_hat * V(source, sqrt(t))
    is laid against s = |source - cell|^2 / t. The least-squares decay rate
    rho of log q is bracketed by the envelope rates (c2, c4) = (2 rho, rho/2)
    and the amplitudes are then the extreme observed prefactors, so the fit
    has zero violations by construction.
    """
    if len(sources) < 2 or len(times) < 2:
        raise ValueError("need at least 2 sources and 2 times")
    if dt is None:
        dt = min(1e-4, 1e-3 * domain.inradius**2)
    qs, ss = [], []
    stream = 7000
    for src in sources:
        for t in times:
            est = stochastic.estimate_heat_kernel(domain, mesh, src, t,
                                                  n_paths=n_paths, seed=seed,
                                                  dt=dt, stream=stream)
            stream += 1
            valid = est.counts >= min_count
            v = domain.ball_volume(np.asarray(src, dtype=float),
                                   math.sqrt(t))
            r2 = np.sum((est.cell_centers[valid] - np.asarray(src)) ** 2,
                        axis=1)
            qs.append(est.density[valid] * v)
            ss.append(r2 / t)
    q = np.concatenate(qs)
    s = np.concatenate(ss)
    slope = np.polyfit(s, np.log(q), 1)[0]
    rho = float(np.clip(-slope, 0.01, 10.0))
    c2, c4 = 2.0 * rho, 0.5 * rho
    c1 = float(np.min(q * np.exp(c2 * s)))
    c3 = float(np.max(q * np.exp(c4 * s)))
    lower = c1 * np.exp(-c2 * s)
    upper = c3 * np.exp(-c4 * s)
    violations = int(np.sum((q < lower * (1 - 1e-12))
                            | (q > upper * (1 + 1e-12))))
    return GaussianBoundFit(c1=c1, c2=c2, c3=c3, c4=c4,
                            violation_count=violations,
                            cells_used=len(q), decay_rate=rho)


def verify_theorem1_bounds(domain: ConvexDomain, binning_h: float = 0.25,
                           sources=None, times=(0.5, 1.0),
                           n_paths: int = 4 * 10**4, seed: int = 0,
                           dt: Optional[float] = None) -> VerificationReport:
    from hotspotlab.mesh import triangulate

    t0 = time.time()
    mesh = triangulate(domain, binning_h)
    if sources is None:
        inc = domain.incenter
        p1, p2, _ = domain.diameter()
        mid = inc + 0.5 * (p1 - inc)
        sources = [inc, mid if domain.contains(mid) else inc + 0.25 * (p1 - inc)]
    fit = fit_gaussian_bounds(domain, mesh, sources, times, n_paths=n_paths,
                              seed=seed, dt=dt)
    fitted = {"c1": fit.c1, "c2": fit.c2, "c3": fit.c3, "c4": fit.c4,
              "violation_count": fit.violation_count,
              "cells_used": fit.cells_used, "decay_rate": fit.decay_rate}
    ok = AUDIT_RULES["theorem1_bounds"](fitted, {})
    return _report("theorem1_bounds", _domain_spec(domain, binning_h=binning_h),
                   fitted, ok, {}, t0)


def eigenvalue_scaling(members, h: float = 0.05, cap: float = 4 * math.pi**2,
                       rect_rel_tol: float = 0.01,
                       seed: int = 0) -> VerificationReport:
    """mu1 * N^2 across a family; bounded by the cap, and exactly pi^2 (to
    rect_rel_tol) for rectangles."""
    t0 = time.time()
    if len(members) < 4:
        raise ValueError("need at least 4 family members")
    fitted = {}
    vals = []
    rect_errs = []
    for i, (dom, N) in enumerate(members):
        _, pair = spectral.solve_domain(dom, h, seed=seed)
        v = pair.mu1 * N**2
        vals.append(v)
        fitted[f"mu_N2_{i}"] = v
        if dom.provenance.kind == "rectangle":
            rect_errs.append(abs(v - math.pi**2) / math.pi**2)
    fitted["mu_N2_max"] = max(vals)
    fitted["mu_N2_min"] = min(vals)
    if rect_errs:
        fitted["rect_rel_err_max"] = max(rect_errs)
    tol = {"cap": cap, "rect_rel_tol": rect_rel_tol}
    ok = AUDIT_RULES["eigenvalue_scaling"](fitted, tol)
    spec = {"family_size": len(members), "h": h,
            "kinds": sorted({d.provenance.kind for d, _ in members})}
    return _report("eigenvalue_scaling", spec, fitted, ok, tol, t0)


def nodal_width_report(domain: ConvexDomain, h: float = 0.05,
                       width_cap: float = 0.5, width_N_cap: float = 10.0,
                       seed: int = 0, solved=None) -> VerificationReport:
    """x-projection width of the zero set on a normalized elongated domain."""
    t0 = time.time()
    nd, nrep = domain.normalize()
    if nrep.aspect_N < 8:
        raise ValueError("nodal width check expects aspect_N >= 8")
    if solved is None:
        mesh, pair = spectral.solve_domain(nd, h, seed=seed)
    else:
        mesh, pair = solved
    rep = spectral.nodal_line_report(pair, mesh)
    fitted = {"width": rep.x_projection_width,
              "width_times_N": rep.x_projection_width * nrep.aspect_N,
              "distance_to_max_fiber": rep.distance_to_max_fiber,
              "aspect_N": nrep.aspect_N,
              "degenerate": float(rep.degenerate)}
    tol = {"width_cap": width_cap, "width_N_cap": width_N_cap}
    ok = AUDIT_RULES["nodal_width"](fitted, tol)
    return _report("nodal_width", _domain_spec(domain, h=h), fitted, ok, tol,
                   t0)


def hitting_time_report(domain: ConvexDomain, h: float = 0.1,
                        offset_c2: float = 2.0, t_budget: float = 50.0,
                        n_paths: int = 2 * 10**4, seed: int = 0,
                        p_B_max: float = 0.01,
                        exp_indicator_min: float = 1.0,
                        dt: Optional[float] = None,
                        solved=None) -> VerificationReport:
    """Barrier-hitting decomposition at the hot-spot fiber."""
    t0 = time.time()
    nd, nrep = domain.normalize()
    if solved is None:
        mesh, pair = spectral.solve_domain(nd, h, seed=seed)
    else:
        mesh, pair = solved
    st = stochastic.hitting_time_experiment(nd, pair, mesh, offset_c2,
                                            t_budget=t_budget,
                                            n_paths=n_paths, seed=seed, dt=dt)
    fitted = {
        "p_A": st.hit_fraction,
        "p_B": st.p_B,
        "exp_functional": st.exp_functional,
        "exp_indicator": st.exp_indicator,
        "mu1": st.mu1_used,
        "barrier_x": st.barrier_x,
        "median_T": st.quantiles["q50"],
        "median_T_unconditional": st.quantiles["median_unconditional"],
    }
    tol = {"p_B_max": p_B_max, "exp_indicator_min": exp_indicator_min}
    ok = AUDIT_RULES["hitting_time"](fitted, tol)
    return _report("hitting_time",
                   _domain_spec(domain, offset_c2=offset_c2,
                                t_budget=t_budget), fitted, ok, tol, t0)


# -- serialization -----------------------------------------------------------------


def write_reports_csv(reports, path):
    """One row per report; fitted constants flattened to name=value pairs."""
    with open(path, "w") as f:
        f.write("lemma_id,domain_kind,pass,runtime_seconds,"
                "fitted_constants,tolerances,domain_spec\n")
        for r in reports:
            consts = ";".join(f"{k}={v:.17g}" for k, v in
                              sorted(r.fitted_constants.items()))
            tols = ";".join(f"{k}={v:.17g}" for k, v in
                            sorted(r.tolerances.items()))
            spec = json.dumps(r.domain_spec, sort_keys=True).replace(",", ";")
            f.write(f"{r.lemma_id},{r.domain_spec.get('kind', 'family')},"
                    f"{int(r.passed)},{r.runtime_seconds:.17g},"
                    f"\"{consts}\",\"{tols}\",\"{spec}\"\n")


def write_reports_json(reports, path, config=None, seed=None):
    payload = {
        "config": config or {},
        "seed": seed,
        "reports": [r.to_dict() for r in reports],
        "all_pass": all(r.passed for r in reports),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=float)
        f.write("\n")
    return payload
