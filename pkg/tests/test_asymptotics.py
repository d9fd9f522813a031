import math

import numpy as np
import pytest

from helivortex.asymptotics import (
    CSV_COLUMNS,
    CoreReport,
    PredictedLimits,
    circulation,
    convergence_report,
    core_components,
    core_energy,
    core_energy_weak,
    core_metrics,
    core_potential_energy,
    core_report,
    energy_decomposition_defect,
    predicted_limits,
    read_convergence_csv,
    refined_grid_argmin,
    vortex_core,
    write_convergence_csv,
)
from helivortex.domain import DomainSpec, build_domain, rotate_mesh, rotation_matrix
from helivortex.errors import EmptyCore, InsufficientData
from helivortex.groundstate import ProblemState, evaluate_solution, solve_ground_state
from helivortex.helical_operator import boundary_angle, solve_harmonic_q


@pytest.fixture(scope="module")
def resolved_solution(disk_medium):
    return solve_ground_state(ProblemState.constant_q(disk_medium, 1.0, 2.0, 0.1))


def _wrap(state, u):
    return evaluate_solution(state, u)


def test_empty_core_for_zero(disk_coarse):
    state = ProblemState.constant_q(disk_coarse, 1.0, 2.0, 0.1)
    sol = _wrap(state, np.zeros(disk_coarse.n_vertices))
    assert vortex_core(sol).size == 0
    assert circulation(sol) == 0.0
    assert core_energy(sol) == 0.0
    with pytest.raises(EmptyCore):
        core_metrics(vortex_core(sol), disk_coarse)


def test_single_cell_bump(disk_coarse):
    mesh = disk_coarse
    state = ProblemState.constant_q(mesh, 1.0, 2.0, 0.1)
    u = state.q * state.log_inv_eps
    u[mesh.boundary_mask] = 0.0
    v = int(np.argmin(np.linalg.norm(mesh.vertices - [2.2, 0.1], axis=1)))
    u[v] += 0.5
    core = vortex_core(_wrap(state, u))
    star = np.flatnonzero((mesh.triangles == v).any(axis=1))
    np.testing.assert_array_equal(np.sort(core), star)


def test_core_metrics_small_sets(disk_coarse):
    mesh = disk_coarse
    t = 10
    geo = core_metrics([t], mesh)
    p = mesh.vertices[mesh.triangles[t]]
    longest = max(np.linalg.norm(p[i] - p[j]) for i, j in ((0, 1), (1, 2), (2, 0)))
    assert geo.diam == pytest.approx(longest, rel=1e-14)
    assert geo.components == 1
    far = int(np.argmax(np.linalg.norm(mesh.barycenters - mesh.barycenters[t], axis=1)))
    assert core_metrics([t, far], mesh).components == 2
    np.testing.assert_allclose(geo.centroid, mesh.barycenters[t])


def test_superlevel_connectivity_joins_at_positive_vertex(disk_coarse):
    mesh = disk_coarse
    v = mesh.triangles[50, 0]
    star = np.flatnonzero((mesh.triangles == v).any(axis=1))
    # two star triangles that share only the vertex v
    a = star[0]
    others = [s for s in star[1:] if len(set(mesh.triangles[s]) & set(mesh.triangles[a])) == 1]
    pair = [a, others[0]]
    phi = -np.ones(mesh.n_vertices)
    phi[v] = 1.0
    assert core_components(pair, mesh) == 2
    assert core_components(pair, mesh, phi) == 1


def test_solution_diagnostics(resolved_solution):
    sol = resolved_solution
    st = sol.state
    kappa = circulation(sol)
    assert kappa > 0
    # Nehari identity evaluated on the same quadrature path
    plus = np.maximum(st.at_quadrature(sol.phi), 0.0)
    rhs = st.integrate(plus**st.p * st.at_quadrature(sol.u)) / st.eps**2
    assert sol.norm_sq == pytest.approx(rhs, rel=1e-7)
    # core-energy identity on a core resolved by many cells
    rep = core_report(sol)
    assert rep.diam / st.mesh.h >= 8
    assert rep.core_energy == pytest.approx(core_potential_energy(sol), rel=1e-2)
    assert core_energy_weak(sol) == pytest.approx(core_potential_energy(sol), rel=1e-3)
    assert abs(energy_decomposition_defect(sol)) <= 1e-6 * sol.energy
    assert rep.components == 1
    assert rep.diam >= 0 and rep.dist_boundary >= 0


def test_thresholding_consistency(resolved_solution):
    sol = resolved_solution
    mesh = sol.state.mesh
    core = vortex_core(sol)
    incore = np.zeros(mesh.n_triangles, dtype=bool)
    incore[core] = True
    bary = sol.phi[mesh.triangles].mean(axis=1)
    assert np.all(bary[~incore] <= 0)
    # vertices whose whole star lies in the core carry phi > 0
    outside_count = np.bincount(mesh.triangles[~incore].ravel(), minlength=mesh.n_vertices)
    inner = np.unique(mesh.triangles[core])
    inner = inner[outside_count[inner] == 0]
    assert inner.size > 0
    assert np.all(sol.phi[inner] > 0)


def test_predicted_limits_canonical(disk_medium):
    q = np.ones(disk_medium.n_vertices)
    lim = predicted_limits(disk_medium, q, 1.0)
    assert np.linalg.norm(lim.x_star - [3.0, 0.0]) <= disk_medium.h
    assert lim.energy_limit == pytest.approx(math.pi / math.sqrt(10), rel=1e-12)
    assert lim.circulation_limit == pytest.approx(2 * math.pi / math.sqrt(10), rel=1e-12)
    assert not lim.interior
    radii = np.linalg.norm(disk_medium.vertices, axis=1)
    assert abs(np.linalg.norm(lim.x_star) - radii.max()) <= disk_medium.h
    two = predicted_limits(disk_medium, 2 * q, 1.0)
    assert two.energy_limit == pytest.approx(4 * lim.energy_limit, rel=1e-12)
    assert two.circulation_limit == pytest.approx(2 * lim.circulation_limit, rel=1e-12)


def test_predicted_limits_harmonic_matches_refined_grid(disk_medium):
    q = solve_harmonic_q(disk_medium, 2 + np.cos(boundary_angle(disk_medium)), 1.0)
    lim = predicted_limits(disk_medium, q, 1.0)
    x_ref, _ = refined_grid_argmin(disk_medium, q, 1.0, factor=10)
    assert np.linalg.norm(lim.x_star - x_ref) <= 2 * disk_medium.h


def test_predicted_limits_tie_break():
    mesh = build_domain(DomainSpec.disk((0, 0), 1.0, 0.1))
    lim = predicted_limits(mesh, np.ones(mesh.n_vertices), 1.0)
    assert lim.multiplicity > 1
    np.testing.assert_allclose(lim.x_star, [1.0, 0.0], atol=1e-12)


def test_predicted_limits_interior_flag():
    # q grows toward the boundary so the minimiser sits inside
    mesh = build_domain(DomainSpec.disk((0, 0), 1.0, 0.05))
    q = 1 + np.sum(mesh.vertices**2, axis=1)
    lim = predicted_limits(mesh, q, 1.0)
    assert lim.interior
    np.testing.assert_allclose(lim.x_star, [0, 0], atol=1e-12)


def test_predicted_limits_rotation_equivariant(disk_medium):
    # asymmetric trace: a mirror-symmetric one gives exact ties, which the
    # polar-angle tiebreak resolves in a frame-dependent way
    ang = boundary_angle(disk_medium)
    q = solve_harmonic_q(disk_medium, 2 + np.cos(ang) + 0.3 * np.sin(ang), 1.0)
    lim = predicted_limits(disk_medium, q, 1.0)
    assert lim.multiplicity == 1
    theta = 0.9
    rot = predicted_limits(rotate_mesh(disk_medium, theta), q, 1.0)
    np.testing.assert_allclose(rot.x_star, rotation_matrix(theta) @ lim.x_star, atol=1e-12)
    assert rot.energy_limit == pytest.approx(lim.energy_limit, rel=1e-12)
    assert rot.circulation_limit == pytest.approx(lim.circulation_limit, rel=1e-12)


def synthetic(eps, diam, ratio=1.0, kappa=2.0, centroid=(2.9, 0.0), components=1):
    return CoreReport(
        eps=eps, core=np.arange(3), diam=diam, dist_boundary=0.1, centroid=np.array(centroid),
        components=components, circulation=kappa, core_energy=1.0, energy_ratio=ratio,
        diam_log_ratio=math.log(0.1 / diam) / math.log(1 / eps), diam_over_eps=diam / eps,
        logdiam_over_logeps=math.log(diam) / math.log(eps),
    )


LIMITS = PredictedLimits(np.array([3.0, 0.0]), 1.0, 2.0, interior=False)


def test_convergence_duplicates_stagnant():
    reps = [synthetic(0.05, 0.1)] * 3
    table = convergence_report(reps, LIMITS)
    assert all(table.trends[k].status == "stagnant" for k in ("energy_ratio", "circulation", "log_diameter", "centroid"))
    assert table.trends["diam_over_eps"].status == "not-applicable"


def test_convergence_log_diameter_law():
    eps = [0.1, 0.05, 0.025, 0.0125]
    table = convergence_report([synthetic(e, 3 * e) for e in eps], LIMITS)
    assert table.trends["log_diameter"].status == "pass"
    np.testing.assert_allclose([r["logdiam_over_logeps"] for r in table.rows], [1 + math.log(3) / math.log(e) for e in eps])


def test_convergence_interior_window():
    lim = PredictedLimits(np.array([0.0, 0.0]), 1.0, 2.0, interior=True)
    eps = [0.1, 0.05, 0.025, 0.0125]
    ok = convergence_report([synthetic(e, 3 * e) for e in eps], lim)
    assert ok.trends["diam_over_eps"].status == "pass"
    bad = convergence_report([synthetic(e, 0.3) for e in eps], lim)
    assert bad.trends["diam_over_eps"].status == "fail"


def test_convergence_needs_two_rows():
    with pytest.raises(InsufficientData):
        convergence_report([synthetic(0.1, 0.3)], LIMITS)


def test_csv_roundtrip(tmp_path):
    eps = [0.1, 0.05]
    table = convergence_report([synthetic(e, 3 * e) for e in eps], LIMITS)
    path = tmp_path / "c.csv"
    write_convergence_csv(path, table.rows, comment="config_sha256=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_sha256=abc"
    assert lines[1] == ",".join(CSV_COLUMNS)
    back = read_convergence_csv(path)
    assert back[1]["eps"] == 0.05 and back[1]["components"] == 1
    assert back[0]["diam"] == pytest.approx(0.3, rel=1e-12)
