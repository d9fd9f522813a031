import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from helivortex.errors import CenterOutsideDomain, MaxIterations, NotProjectable
from helivortex.groundstate import (
    ProblemState,
    SolverOptions,
    aspect_axes,
    cap_profile,
    continue_in_epsilon,
    default_center,
    dual_norm,
    evaluate_solution,
    functional_gradient,
    functional_value,
    initial_guess,
    nehari_pairing,
    nehari_project,
    solve_ground_state,
)


def smooth_field(mesh, rng, amplitude=4.0):
    x = mesh.vertices
    r2 = np.sum((x - [2, 0]) ** 2, axis=1)
    a, b, c = rng.uniform(0.5, 3, 3)
    u = (1 - r2) * (1 + 0.4 * np.sin(a * x[:, 0] + c) * np.cos(b * x[:, 1]))
    u[mesh.boundary_mask] = 0.0
    return amplitude * u / u.max()


def refined_functional(state, u, n=6):
    """I(u) for the P1 field u, integrating the nonlinear term on n^2 subtriangles per element."""
    mesh = state.mesh
    ij = [(i, j) for i in range(n) for j in range(n - i)]
    subs = []
    for i, j in ij:
        subs.append([(i, j), (i + 1, j), (i, j + 1)])
        if i + j < n - 1:
            subs.append([(i + 1, j), (i + 1, j + 1), (i, j + 1)])
    mids = []
    for s in subs:
        pts = np.array([[1 - (a + b) / n, a / n, b / n] for a, b in s])
        mids.extend([(pts[0] + pts[1]) / 2, (pts[1] + pts[2]) / 2, (pts[2] + pts[0]) / 2])
    bary = np.array(mids)
    uq = np.einsum("qj,tj->tq", bary, u[mesh.triangles])
    qq = np.einsum("qj,tj->tq", bary, state.q[mesh.triangles])
    integrand = np.maximum(uq - qq * state.log_inv_eps, 0) ** (state.p + 1)
    nonlinear = (mesh.areas * integrand.mean(axis=1)).sum()
    a = u @ (state.operator.matrix @ u)
    return 0.5 * a - nonlinear / ((state.p + 1) * state.eps**2)


@pytest.fixture(scope="module")
def state(disk_medium):
    return ProblemState.constant_q(disk_medium, 1.0, 2.0, 0.1)


def test_state_validation(disk_coarse):
    with pytest.raises(ValueError):
        ProblemState.constant_q(disk_coarse, 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        ProblemState.constant_q(disk_coarse, 1.0, 2.0, 1.5)
    with pytest.raises(ValueError):
        ProblemState.constant_q(disk_coarse, 1.0, 2.0, 0.1, m=-1.0)


def test_functional_trivial_cases(state, rng):
    zero = np.zeros(state.mesh.n_vertices)
    assert functional_value(state, zero) == 0.0
    np.testing.assert_array_equal(functional_gradient(state, zero), 0.0)
    u = smooth_field(state.mesh, rng, amplitude=0.9 * state.log_inv_eps)
    assert functional_value(state, u) == 0.5 * (u @ (state.operator.matrix @ u))


def test_functional_matches_refined_quadrature(state, rng):
    for _ in range(3):
        u = smooth_field(state.mesh, rng)
        ref = refined_functional(state, u)
        assert functional_value(state, u) == pytest.approx(ref, rel=1e-3)


def test_gradient_finite_differences(state, rng):
    u = smooth_field(state.mesh, rng)
    r = functional_gradient(state, u)
    assert np.all(r[state.mesh.boundary_mask] == 0)
    delta = 1e-5
    for _ in range(20):
        v = rng.standard_normal(state.mesh.n_vertices)
        v[state.mesh.boundary_mask] = 0.0
        fd = (functional_value(state, u + delta * v) - functional_value(state, u - delta * v)) / (2 * delta)
        rv = r @ v
        assert abs(fd - rv) <= 1e-6 * (1 + abs(rv))


def test_nehari_rejects_nonpositive(state):
    u = -np.ones(state.mesh.n_vertices)
    u[state.mesh.boundary_mask] = 0.0
    with pytest.raises(NotProjectable):
        nehari_project(state, u)


def test_nehari_scale_invariance(state, rng):
    u = smooth_field(state.mesh, rng)
    t1, _ = nehari_project(state, u)
    t2, _ = nehari_project(state, 2 * u)
    assert t2 == pytest.approx(t1 / 2, rel=1e-9)


def test_nehari_matches_brute_force(state, rng):
    for _ in range(10):
        u = smooth_field(state.mesh, rng, amplitude=rng.uniform(0.5, 8))
        t, w = nehari_project(state, u)
        assert abs(nehari_pairing(state, w)) <= 1e-10 * (w @ (state.operator.matrix @ w))
        ts = np.linspace(1e-3, 4 * t, 2000)
        vals = [functional_value(state, s * u) for s in ts]
        i = int(np.argmax(vals))
        res = minimize_scalar(
            lambda s: -functional_value(state, s * u),
            bracket=(ts[max(i - 1, 0)], ts[i], ts[min(i + 1, len(ts) - 1)]),
            method="golden",
            tol=1e-10,
        )
        assert res.x == pytest.approx(t, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 20.0))
def test_nehari_scaling_property(disk_coarse, s):
    state = ProblemState.constant_q(disk_coarse, 1.0, 2.0, 0.1)
    u = smooth_field(disk_coarse, np.random.default_rng(3))
    t, _ = nehari_project(state, u)
    ts, _ = nehari_project(state, s * u)
    assert ts * s == pytest.approx(t, rel=1e-9)


def test_cap_profile():
    s = np.array([0.0, 0.5, 1.0, 2.0])
    np.testing.assert_allclose(cap_profile(s), [1.0, 1 - 0.375 + 0.03125, 0.0, -np.log(2)])
    h = 1e-6
    left = (cap_profile(1 - h) - cap_profile(1 - 2 * h)) / h
    right = (cap_profile(1 + 2 * h) - cap_profile(1 + h)) / h
    assert left == pytest.approx(-1, abs=1e-4) and right == pytest.approx(-1, abs=1e-4)


def test_initial_guess_examples(state):
    mesh = state.mesh
    center = np.array([2.5, 0.0])
    g = initial_guess(state, center, 1.0)
    delta = min(0.5 / 2, 0.25)
    far = np.linalg.norm(mesh.vertices - center, axis=1) > 2 * delta
    assert np.all(g[far] == 0)
    node = np.argmin(np.linalg.norm(mesh.vertices - center, axis=1))
    if np.allclose(mesh.vertices[node], center):
        assert g[node] == pytest.approx(1.0 + math.log(1 / state.eps))
    assert g.max() > 0
    assert np.all(g[mesh.boundary_mask] == 0)


@pytest.mark.parametrize("tau", [1.0, 2.0])
def test_initial_guess_support_ellipse(state, tau):
    mesh = state.mesh
    center = np.array([2.4, 0.1])
    g = initial_guess(state, center, tau)
    e_r, e_t, l1, l2 = aspect_axes(center, state.k)
    d = mesh.vertices - center
    z1 = (d @ e_r) / (tau * l1 * state.eps)
    z2 = (d @ e_t) / (tau * l2 * state.eps)
    inside = z1**2 + z2**2 < 1
    plus = g - state.q * state.log_inv_eps > 0
    assert np.all(plus[inside] | (np.hypot(z1, z2)[inside] > 1 - 1e-9))
    # outside the ellipse grown by one cell the plus part vanishes
    grown = np.hypot(np.abs(z1) - mesh.h / (tau * l1 * state.eps), np.abs(z2) - mesh.h / (tau * l2 * state.eps))
    outside = (np.abs(z1) > 1 + mesh.h / (tau * l1 * state.eps)) | (np.abs(z2) > 1 + mesh.h / (tau * l2 * state.eps))
    assert not np.any(plus & outside)
    assert grown.size == mesh.n_vertices


def test_aspect_ratio_formula():
    e_r, e_t, l1, l2 = aspect_axes((3.0, 0.0), 1.0)
    assert l2 / l1 == pytest.approx(math.sqrt(10.0))
    np.testing.assert_allclose(e_r, [1, 0])
    assert max(l1, l2) == 1.0


def test_initial_guess_outside(state):
    with pytest.raises(CenterOutsideDomain):
        initial_guess(state, (0.0, 0.0), 1.0)


def test_default_center_is_inside(state):
    c = default_center(state)
    assert c[0] < 3.0 and c[0] > 2.0


def test_ground_state_invariants(small_solution):
    sol = small_solution
    st_ = sol.state
    a = sol.norm_sq
    assert sol.residual_norm <= 1e-8
    assert dual_norm(st_, functional_gradient(st_, sol.u)) == pytest.approx(sol.residual_norm, abs=1e-12)
    assert abs(sol.nehari_defect) <= 1e-8 * max(1.0, a)
    assert sol.u.min() >= -1e-12
    assert sol.energy > 0
    p = st_.p
    assert (0.5 - 1 / (p + 1)) * a <= sol.energy + 1e-8
    assert a <= 2 * (p + 1) / (p - 1) * sol.energy + 1e-6
    for t in np.linspace(0.5, 2.0, 50):
        assert functional_value(st_, t * sol.u) <= sol.energy + 1e-8


def test_tau_restarts_agree(disk_coarse):
    state = ProblemState.constant_q(disk_coarse, 1.0, 2.0, 0.1)
    center = (2.6, 0.0)
    e1 = solve_ground_state(state, center=center, tau=1.0).energy
    e2 = solve_ground_state(state, center=center, tau=2.0).energy
    assert e2 == pytest.approx(e1, rel=1e-6)


def test_max_iterations(disk_coarse):
    state = ProblemState.constant_q(disk_coarse, 1.0, 2.0, 0.1)
    opts = SolverOptions(max_gradient_iters=0, max_newton_iters=0)
    with pytest.raises(MaxIterations):
        solve_ground_state(state, options=opts)


def test_evaluate_solution_roundtrip(small_solution):
    again = evaluate_solution(small_solution.state, small_solution.u)
    assert again.energy == small_solution.energy
    assert again.residual_norm == pytest.approx(small_solution.residual_norm, abs=1e-12)


def test_continuation(disk_coarse):
    state = ProblemState.constant_q(disk_coarse, 1.0, 2.0, 0.1)
    single = continue_in_epsilon(state, [0.1])
    direct = solve_ground_state(state)
    assert single[0].energy == pytest.approx(direct.energy, rel=1e-12)
    sols = continue_in_epsilon(state, [0.1, 0.07, 0.05])
    energies = [s.energy for s in sols]
    assert energies[0] < energies[1] < energies[2]
    assert "UnderResolved" in continue_in_epsilon(state, [0.1, 0.03])[-1].flags
    with pytest.raises(ValueError):
        continue_in_epsilon(state, [0.05, 0.1])


def test_metadata_record(small_solution):
    meta = small_solution.metadata()
    assert set(meta) >= {"k", "p", "eps", "energy", "residual_norm", "nehari_defect", "newton_iters", "gradient_iters"}
