import math
import os

import numpy as np
import pytest
from scipy.stats import chi2, kstest

from hotspotlab import geometry as G
from hotspotlab import spectral as S
from hotspotlab import stochastic as ST
from hotspotlab.mesh import triangulate

import oracles


SQUARE = G.rectangle(1.0, 1.0)
RECT10 = G.rectangle(10.0, 1.0)


@pytest.fixture(scope="module")
def rect5_solved():
    dom = G.rectangle(5.0, 1.0)
    mesh, pair = S.solve_domain(dom, 0.05)
    return dom, mesh, pair


def test_zero_time_returns_start():
    ens = ST.simulate(SQUARE, (0.3, 0.4), 0.0, 2.5e-4, 50, seed=1)
    assert np.all(ens.endpoints == np.array([0.3, 0.4]))
    assert ens.n_paths == 50


def test_start_outside_raises():
    with pytest.raises(ST.StochasticError):
        ST.simulate(SQUARE, (1.5, 0.5), 1.0, 2.5e-4, 10, seed=1)


def test_dt_precondition():
    with pytest.raises(ST.StochasticError):
        ST.simulate(SQUARE, (0.5, 0.5), 1.0, 1e-3, 10, seed=1)  # > 1e-3*inrad^2


def test_deterministic_and_worker_independent():
    a = ST.simulate(SQUARE, (0.5, 0.5), 0.05, 2.5e-4, 10000, seed=42)
    b = ST.simulate(SQUARE, (0.5, 0.5), 0.05, 2.5e-4, 10000, seed=42)
    assert np.array_equal(a.endpoints, b.endpoints)
    old = os.environ.get("HOTSPOTLAB_WORKERS")
    try:
        os.environ["HOTSPOTLAB_WORKERS"] = "1"
        c = ST.simulate(SQUARE, (0.5, 0.5), 0.05, 2.5e-4, 10000, seed=42)
    finally:
        if old is None:
            os.environ.pop("HOTSPOTLAB_WORKERS")
        else:
            os.environ["HOTSPOTLAB_WORKERS"] = old
    assert np.array_equal(a.endpoints, c.endpoints)


def test_endpoints_stay_inside_debug_mode():
    # debug mode asserts the no-flux property after every step
    tri = G.polygon([(0, 0), (4, 0), (0, 3)])
    ens = ST.simulate(tri, (1.0, 1.0), 0.5, 1e-3, 2000, seed=3, debug=True)
    assert np.all(tri.contains_many(ens.endpoints, tol=1e-9))


def test_square_uniform_at_long_time():
    # stationary distribution of reflected paths is uniform
    ens = ST.simulate(SQUARE, (0.25, 0.25), 5.0, 2.5e-4, 20000, seed=7)
    H, _, _ = np.histogram2d(ens.endpoints[:, 0], ens.endpoints[:, 1],
                             bins=4, range=[[0, 1], [0, 1]])
    expected = 20000 / 16.0
    stat = ((H - expected) ** 2 / expected).sum()
    assert stat <= chi2.ppf(0.99, 15)


def test_rectangle_marginal_matches_cosine_kernel():
    ens = ST.simulate(RECT10, (2.0, 0.5), 5.0, 2.5e-4, 30000, seed=3)
    res = kstest(ens.endpoints[:, 0],
                 lambda x: oracles.reflected_kernel_1d_cdf(x, 2.0, 10.0, 5.0))
    assert res.statistic <= 0.01


def test_feynman_kac_constant_mode(rect5_solved):
    dom, mesh, _ = rect5_solved
    const = S.EigenPair(mu1=0.0, mu2=0.0, phi=np.ones(mesh.n_nodes),
                        residual=0.0, multiplicity_flag=False)
    rep = ST.feynman_kac_check(dom, const, mesh, (1.0, 0.5), 0.2,
                               n_paths=500, seed=5, dt=2e-4)
    assert rep.lhs == pytest.approx(1.0, abs=1e-12)
    assert rep.rhs == pytest.approx(1.0, abs=1e-12)


def test_feynman_kac_rectangle_analytic():
    dom = G.rectangle(5.0, 1.0)
    ens = ST.simulate(dom, (1.0, 0.5), 0.5, 1e-4, 50000, seed=11)
    vals = oracles.rect_phi1(ens.endpoints, 5.0)
    lhs = vals.mean()
    stderr = vals.std(ddof=1) / math.sqrt(len(vals))
    rhs = math.exp(-oracles.rect_mu1(5.0) * 0.5) * oracles.rect_phi1(
        np.array([[1.0, 0.5]]), 5.0)[0]
    assert abs(lhs - rhs) / abs(rhs) <= 0.02
    assert abs(lhs - rhs) / stderr <= 3.0


def test_feynman_kac_fem_pair(rect5_solved):
    dom, mesh, pair = rect5_solved
    rep = ST.feynman_kac_check(dom, pair, mesh, (1.0, 0.5), 0.5,
                               n_paths=30000, seed=11, dt=1e-4)
    assert rep.within_3sigma
    assert abs(rep.lhs - rep.rhs) / abs(rep.rhs) <= 0.02


def test_feynman_kac_from_max(rect5_solved):
    # started at the hot spot, the average decays by exp(-mu1 t)
    dom, mesh, pair = rect5_solved
    hs = S.hot_spots(pair, mesh, 1e-3)
    x_max = hs.maxima[0][0]
    rep = ST.feynman_kac_check(dom, pair, mesh, x_max, 1.0,
                               n_paths=30000, seed=13, dt=1e-4)
    ratio = rep.lhs / S.evaluate(pair, mesh, x_max)
    assert ratio == pytest.approx(math.exp(-pair.mu1), rel=0.02)


def test_dt_refinement_weak_order(rect5_solved):
    dom, mesh, pair = rect5_solved
    r1 = ST.feynman_kac_check(dom, pair, mesh, (1.0, 0.5), 0.5,
                              n_paths=100000, seed=21, dt=2e-4)
    r2 = ST.feynman_kac_check(dom, pair, mesh, (1.0, 0.5), 0.5,
                              n_paths=100000, seed=22, dt=1e-4)
    # independent-seed difference: 3 sigma on the combined MC error
    assert abs(r1.lhs - r2.lhs) <= 3.0 * math.sqrt(2.0) * max(r1.stderr,
                                                              r2.stderr)


def test_heat_kernel_total_mass_and_positivity():
    mesh = triangulate(RECT10, 0.25)
    est = ST.estimate_heat_kernel(RECT10, mesh, (5.0, 0.5), 1.0,
                                  n_paths=20000, seed=9, dt=2.5e-4)
    total = float((est.density * est.cell_areas).sum())
    assert abs(total - 1.0) <= 3.0 / math.sqrt(est.n_paths)
    assert np.all(est.density >= 0)


def test_heat_kernel_matches_analytic_rectangle():
    mesh = triangulate(RECT10, 0.25)
    est = ST.estimate_heat_kernel(RECT10, mesh, (5.0, 0.5), 1.0,
                                  n_paths=60000, seed=9, dt=2.5e-4)
    an = oracles.rect_kernel_2d(est.cell_centers, (5.0, 0.5), 10.0, 1.0, 1.0)
    sd = np.sqrt(np.maximum(est.counts, 1.0)) / (est.n_paths * est.cell_areas)
    use = est.counts >= 20
    z = (est.density[use] - an[use]) / sd[use]
    assert np.abs(z).max() <= 4.0  # per-cell agreement, ~300 cells


def test_heat_kernel_stationary_uniform():
    mesh = triangulate(SQUARE, 0.25)
    est = ST.estimate_heat_kernel(SQUARE, mesh, (0.2, 0.8), 5.0,
                                  n_paths=20000, seed=4, dt=2.5e-4)
    sd = np.sqrt(np.maximum(est.counts, 1.0)) / (est.n_paths * est.cell_areas)
    z = (est.density - 1.0) / sd  # uniform density = 1/area = 1
    assert np.abs(z).max() <= 4.0


def test_heat_kernel_disk_radial_symmetry():
    dk = G.disk(1.0, 256)
    mesh = triangulate(dk, 0.25)
    est = ST.estimate_heat_kernel(dk, mesh, (0.0, 0.0), 0.15,
                                  n_paths=40000, seed=6, dt=9e-4)
    r = np.hypot(est.cell_centers[:, 0], est.cell_centers[:, 1])
    sd = np.sqrt(np.maximum(est.counts, 1.0)) / (est.n_paths * est.cell_areas)
    # density in a thin ring should not depend on the angle
    for lo, hi in ((0.1, 0.25), (0.35, 0.5), (0.6, 0.75)):
        ring = (r >= lo) & (r < hi) & (est.counts >= 20)
        if ring.sum() < 4:
            continue
        mean = np.average(est.density[ring], weights=1.0 / sd[ring] ** 2)
        z = (est.density[ring] - mean) / sd[ring]
        assert np.abs(z).max() <= 4.0


def test_kernel_domination_identical_kernels():
    mesh = triangulate(RECT10, 0.25)
    rep = ST.verify_kernel_domination(RECT10, mesh, (5.0, 0.5), (5.0, 0.5),
                                      1.0, t_ref=1.0, n_paths=40000, seed=15,
                                      dt=2.5e-4)
    assert rep.c_delta_hat == pytest.approx(1.0, abs=0.25)


def test_kernel_domination_matches_analytic():
    mesh = triangulate(RECT10, 0.25)
    rep = ST.verify_kernel_domination(RECT10, mesh, (5.0, 0.5), (5.0, 0.5),
                                      0.25, t_ref=1.0, n_paths=100000, seed=9,
                                      dt=2.5e-4)
    an_d = oracles.rect_kernel_2d(mesh.tri_centroids, (5.0, 0.5), 10, 1, 0.25)
    an_1 = oracles.rect_kernel_2d(mesh.tri_centroids, (5.0, 0.5), 10, 1, 1.0)
    well_sampled = an_1 * mesh.tri_areas * 100000 >= 20
    sup_an = float((an_d / an_1)[well_sampled].max())
    assert rep.c_delta_hat == pytest.approx(sup_an, rel=0.2)


def test_kernel_domination_monotone_in_delta():
    mesh = triangulate(RECT10, 0.25)
    cs = []
    for delta in (0.5, 0.25):
        rep = ST.verify_kernel_domination(RECT10, mesh, (5.0, 0.5), (5.0, 0.5),
                                          delta, n_paths=40000, seed=16,
                                          dt=2.5e-4)
        cs.append(rep.c_delta_hat)
    assert cs[1] > cs[0]


def test_kernel_domination_validates_inputs():
    mesh = triangulate(RECT10, 0.25)
    with pytest.raises(ST.StochasticError):
        ST.verify_kernel_domination(RECT10, mesh, (1.0, 0.5), (5.0, 0.5), 0.25)
    with pytest.raises(ST.StochasticError):
        ST.verify_kernel_domination(RECT10, mesh, (5.0, 0.5), (5.0, 0.5), 1.5)
    with pytest.raises(ST.StochasticError):
        ST.verify_kernel_domination(RECT10, mesh, (5.0, 0.5), (5.0, 0.5), 0.25,
                                    n_paths=10000, seed=1, dt=2.5e-4,
                                    min_count=10**9)


def test_hitting_offset_zero():
    nd, _ = G.rectangle(40.0, 2.0).normalize()
    mesh, pair = S.solve_domain(nd, 0.1)
    st = ST.hitting_time_experiment(nd, pair, mesh, 0.0, n_paths=100, seed=1)
    assert st.hit_fraction == 1.0
    assert st.exp_functional == 1.0
    assert st.quantiles["q50"] == 0.0


def test_hitting_median_matches_line_oracle():
    # long rectangle, barrier far from the left end: clean 1D first passage
    nd, _ = G.rectangle(40.0, 2.0).normalize()
    mesh, pair = S.solve_domain(nd, 0.1)
    st = ST.hitting_time_experiment(nd, pair, mesh, 2.0, t_budget=50.0,
                                    n_paths=20000, seed=5, dt=1e-3)
    med = st.quantiles["median_unconditional"]
    oracle = oracles.fp_median_1d(2.0)
    assert abs(med - oracle) / oracle <= 0.2
    # P(B) agrees with the line law at the budget
    pb_an = 1.0 - oracles.fp_cdf_1d(50.0, 2.0)[0]
    assert st.p_B == pytest.approx(pb_an, abs=0.02)


def test_hitting_seed_agreement():
    nd, _ = G.rectangle(40.0, 2.0).normalize()
    mesh, pair = S.solve_domain(nd, 0.1)
    s1 = ST.hitting_time_experiment(nd, pair, mesh, 2.0, t_budget=20.0,
                                    n_paths=10000, seed=101, dt=1e-3)
    s2 = ST.hitting_time_experiment(nd, pair, mesh, 2.0, t_budget=20.0,
                                    n_paths=10000, seed=202, dt=1e-3)
    sd = math.sqrt(s1.hit_fraction * (1 - s1.hit_fraction) / 10000)
    assert abs(s1.hit_fraction - s2.hit_fraction) <= 3.0 * math.sqrt(2) * sd


def test_hitting_invariants():
    nd, _ = G.rectangle(40.0, 2.0).normalize()
    mesh, pair = S.solve_domain(nd, 0.1)
    st = ST.hitting_time_experiment(nd, pair, mesh, 1.0, t_budget=20.0,
                                    n_paths=5000, seed=8, dt=1e-3)
    assert 0.0 <= st.hit_fraction <= 1.0
    assert st.exp_functional >= 1.0
    assert st.p_B == pytest.approx(1.0 - st.hit_fraction, abs=1e-12)


def test_endpoint_dump(tmp_path):
    ens = ST.simulate(SQUARE, (0.5, 0.5), 0.01, 2.5e-4, 100, seed=2)
    p = tmp_path / "ends.csv"
    ST.dump_endpoints(ens, p)
    rows = p.read_text().strip().splitlines()
    assert rows[0] == "x,y"
    assert len(rows) == 101
    q = tmp_path / "ends.npy"
    ST.dump_endpoints(ens, q, fmt="npy")
    assert np.array_equal(np.load(q), ens.endpoints)
