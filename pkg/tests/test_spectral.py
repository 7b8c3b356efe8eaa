import math

import numpy as np
import pytest

from hotspotlab import geometry as G
from hotspotlab import spectral as S
from hotspotlab.mesh import TriMesh, triangulate

import oracles

J1P_ROOT_SQ = 3.389957716671889  # frozen from the series-bisection oracle


@pytest.fixture(scope="module")
def rect10():
    return S.solve_domain(G.rectangle(10.0, 1.0), 0.05)


@pytest.fixture(scope="module")
def disk256():
    return S.solve_domain(G.disk(1.0, 256), 0.05)


def _single_triangle_mesh():
    dom = G.polygon([(0, 0), (1, 0), (0, 1)])
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    return TriMesh(nodes=nodes, triangles=tris,
                   boundary_node_flags=np.ones(3, dtype=bool), target_h=1.0,
                   domain=dom, _delaunay=None, _raw_to_kept=np.array([0]))


def test_reference_element_matrices():
    K, M = S.assemble(_single_triangle_mesh())
    K_exact = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    M_exact = (0.5 / 12.0) * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]])
    assert np.allclose(K.toarray(), K_exact, atol=1e-14)
    assert np.allclose(M.toarray(), M_exact, atol=1e-14)


def test_assembled_matrix_structure(rect10):
    mesh, _ = rect10
    K, M = S.assemble(mesh)
    ones = np.ones(mesh.n_nodes)
    assert np.abs(K @ ones).max() < 1e-10  # constants in the kernel
    assert M.sum() == pytest.approx(mesh.domain.area, rel=1e-9)
    assert K.nnz / mesh.n_nodes <= 9.0
    assert (K - K.T).nnz == 0 or np.abs((K - K.T).data).max() < 1e-12


@pytest.mark.parametrize("N", [5, 10, 20])
def test_rectangle_eigenvalue(N):
    _, pair = S.solve_domain(G.rectangle(float(N), 1.0), 0.05)
    exact = math.pi**2 / N**2
    assert abs(pair.mu1 - exact) / exact < 0.01
    assert not pair.multiplicity_flag
    assert pair.mu2 == pytest.approx(4.0 * exact, rel=0.01)


def test_disk_eigenvalue_and_multiplicity(disk256):
    _, pair = disk256
    root = oracles.j1_prime_first_root()
    assert root**2 == pytest.approx(J1P_ROOT_SQ, rel=1e-12)
    assert abs(pair.mu1 - root**2) / root**2 < 0.01
    assert pair.multiplicity_flag


def test_square_eigenvalue_degenerate():
    _, pair = S.solve_domain(G.rectangle(1.0, 1.0), 0.05)
    assert abs(pair.mu1 - math.pi**2) / math.pi**2 < 0.01
    assert pair.multiplicity_flag


def test_eigenpair_normalization(rect10):
    mesh, pair = rect10
    K, M = S.assemble(mesh)
    assert pair.phi @ (M @ pair.phi) == pytest.approx(1.0, abs=1e-9)
    ones = np.ones(mesh.n_nodes)
    assert abs(pair.phi @ (M @ ones)) < 1e-9 * math.sqrt(ones @ (M @ ones))
    assert pair.residual <= 1e-8
    rayleigh = (pair.phi @ (K @ pair.phi)) / (pair.phi @ (M @ pair.phi))
    assert rayleigh == pytest.approx(pair.mu1, rel=1e-8)


def test_sign_convention(rect10):
    mesh, pair = rect10
    imax, imin = np.argmax(pair.phi), np.argmin(pair.phi)
    assert mesh.nodes[imax, 0] > mesh.nodes[imin, 0]


def test_evaluate_at_node(rect10):
    mesh, pair = rect10
    assert S.evaluate(pair, mesh, mesh.nodes[123]) == pytest.approx(
        pair.phi[123], abs=1e-12)


def test_evaluate_matches_cosine(rect10):
    mesh, pair = rect10
    vmax = S.evaluate(pair, mesh, np.array([10.0, 0.5]))
    assert abs(S.evaluate(pair, mesh, np.array([5.0, 0.5])) / vmax) < 0.02
    for y in (0.1, 0.5, 0.9):
        # max-on-right convention: phi ~ -cos(pi x / N)
        got = S.evaluate(pair, mesh, np.array([2.5, y])) / vmax
        assert got == pytest.approx(-math.cos(math.pi / 4), abs=0.02)


def test_hot_spots_rectangle(rect10):
    mesh, pair = rect10
    hs = S.hot_spots(pair, mesh, 1e-3)
    h = mesh.target_h
    assert all(abs(p[0] - 10.0) <= h for p, _ in hs.maxima)
    assert all(abs(p[0] - 0.0) <= h for p, _ in hs.minima)


def test_hot_spots_disk(disk256):
    mesh, pair = disk256
    hs = S.hot_spots(pair, mesh, 1e-3)
    assert len(hs.maxima) == 1 and len(hs.minima) == 1
    pmax, pmin = hs.maxima[0][0], hs.minima[0][0]
    assert np.hypot(*pmax) > 0.99  # on the boundary
    assert np.hypot(*pmin) > 0.99
    # antipodal extrema
    assert np.linalg.norm(pmax + pmin) < 0.05
    # structure matches the analytic mode along the recovered axis
    axis = math.atan2(pmax[1], pmax[0])
    ref = oracles.disk_phi1(mesh.nodes, axis_angle=axis)
    corr = np.corrcoef(ref, pair.phi)[0, 1]
    assert corr > 0.999


def test_hot_spots_ellipse_tip():
    nd, _ = G.ellipse(8.0, 1.0, 256).normalize()
    mesh, pair = S.solve_domain(nd, 0.1)
    hs = S.hot_spots(pair, mesh, 1e-3)
    xmax = nd.vertices[:, 0].max()
    assert all(p[0] > xmax - 1.0 for p, _ in hs.maxima)
    assert all(p[0] < 1.0 for p, _ in hs.minima)


def test_band_epsilon_semantics(rect10):
    mesh, pair = rect10
    hs = S.hot_spots(pair, mesh, 5e-3)
    vmax = pair.phi.max()
    for p, v in hs.maxima:
        assert v >= (1 - 5e-3) * vmax
        assert mesh.domain.contains(p)


def test_nodal_line_rectangle(rect10):
    mesh, pair = rect10
    rep = S.nodal_line_report(pair, mesh)
    h = mesh.target_h
    xs = np.array([[a[0], b[0]] for a, b in rep.crossing_segments])
    assert np.all(np.abs(xs - 5.0) <= h)
    assert rep.x_projection_width <= 2 * h
    assert not rep.degenerate
    assert rep.distance_to_max_fiber == pytest.approx(5.0, abs=2 * h)
    # the eigenfunction changes sign across every reported triangle
    assert len(rep.crossing_segments) > 0


def test_nodal_line_square_flagged():
    mesh, pair = S.solve_domain(G.rectangle(1.0, 1.0), 0.05)
    rep = S.nodal_line_report(pair, mesh)
    assert rep.degenerate


def test_refinement_convergence_order():
    # second-order scheme: consecutive Cauchy differences shrink ~4x
    mus = [S.solve_domain(G.rectangle(5.0, 1.0), h)[1].mu1
           for h in (0.2, 0.1, 0.05)]
    d1, d2 = abs(mus[0] - mus[1]), abs(mus[1] - mus[2])
    assert d2 < d1 < 6.0 * d2


def test_isometry_invariance():
    dom = G.ellipse(4.0, 1.0, 256)
    m1, p1 = S.solve_domain(dom, 0.1)
    iso = dict(angle=0.7, translation=(3.0, -2.0))
    m2, p2 = S.solve_domain(dom.transformed(**iso), 0.1)
    assert abs(p1.mu1 - p2.mu1) / p1.mu1 < 1e-6
    hs1 = S.hot_spots(p1, m1, 1e-3)
    hs2 = S.hot_spots(p2, m2, 1e-3)
    c, s = math.cos(0.7), math.sin(0.7)
    R = np.array([[c, -s], [s, c]])
    mapped = R @ hs1.maxima[0][0] + np.array([3.0, -2.0])
    assert np.linalg.norm(mapped - hs2.maxima[0][0]) <= 2 * 0.1


def test_scaling_law():
    _, p1 = S.solve_domain(G.ellipse(4.0, 1.0, 256), 0.1)
    _, p2 = S.solve_domain(G.ellipse(4.0, 1.0, 256).transformed(scale=2.0), 0.2)
    assert p2.mu1 * 4.0 == pytest.approx(p1.mu1, rel=1e-6)


def test_rectangle_family_scaling_law():
    for N in (5, 10, 20, 40):
        _, pair = S.solve_domain(G.rectangle(float(N), 1.0), 0.1)
        assert pair.mu1 * N**2 == pytest.approx(math.pi**2, rel=0.01)


def test_solver_rejects_bad_tol(rect10):
    mesh, _ = rect10
    K, M = S.assemble(mesh)
    with pytest.raises(S.SolverError):
        S.solve_first_eigenpair(K, M, tol=1e-15)


def test_eigenpair_dump(tmp_path, rect10):
    mesh, pair = rect10
    csv = tmp_path / "phi.csv"
    hdr = tmp_path / "phi.json"
    S.dump_eigenpair(pair, mesh, csv, hdr)
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "node_x,node_y,phi"
    assert len(lines) == mesh.n_nodes + 1
    import json
    meta = json.loads(hdr.read_text())
    assert meta["mu1"] == pair.mu1
    assert meta["multiplicity_flag"] is False
