"""Exact flows, reference integration, composition generators, expansions."""

import warnings

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from symflow.bracket import DegenerateInputError, OutOfRangeError, SymbolicRequiredError, poisson
from symflow.flow import (
    ClosureHamiltonian,
    CocycleGenerator,
    EquivalenceOrders,
    InterpolationDominatesWarning,
    LinearPathHamiltonian,
    NoConvergenceError,
    NotRecognizedError,
    StaticHamiltonian,
    cocycle_hamiltonian,
    compose_scheme,
    composition_expansion,
    default_probes,
    exact_flow,
    expansion_lhs,
    expansion_partial_sum,
    flow_equivalence_order,
    point_distances,
    reference_flow,
    remainder_norm,
    remainder_ratio_sweep,
)
from symflow.manifold import ScalarField, build_sphere, build_torus, sample, uniform_norm
from symflow.scheme import lie_trotter, strang, yoshida


@pytest.fixture(scope="module")
def torus():
    return build_torus(64, 64)


@pytest.fixture(scope="module")
def sphere():
    return build_sphere(4)


@pytest.fixture(scope="module")
def torus_pair(torus):
    return (
        sample(torus, "0.3*sin(2*pi*q)", name="f"),
        sample(torus, "0.2*cos(2*pi*p)", name="g"),
    )


@pytest.fixture(scope="module")
def sphere_pair(sphere):
    return (
        sample(sphere, "0.35*x", name="f"),
        sample(sphere, "0.25*z", name="g"),
    )


# ---------------------------------------------------------------------------
# Exact flows
# ---------------------------------------------------------------------------


def test_shear_q_closed_form(torus):
    h = sample(torus, "0.3*sin(2*pi*q)")
    pts = default_probes("torus", 50, seed=1)
    out = exact_flow(h, 0.3).apply(pts)
    expect_p = (pts[:, 1] - 0.3 * (0.3 * 2 * np.pi * np.cos(2 * np.pi * pts[:, 0]))) % 1.0
    assert np.allclose(out[:, 0], pts[:, 0], atol=1e-14)
    assert np.allclose(out[:, 1], expect_p, atol=1e-13)


def test_shear_p_closed_form(torus):
    h = sample(torus, "0.2*cos(2*pi*p)")
    pts = default_probes("torus", 50, seed=2)
    out = exact_flow(h, 0.7).apply(pts)
    expect_q = (pts[:, 0] + 0.7 * (-0.2 * 2 * np.pi * np.sin(2 * np.pi * pts[:, 1]))) % 1.0
    assert np.allclose(out[:, 1], pts[:, 1], atol=1e-14)
    assert np.allclose(out[:, 0], expect_q, atol=1e-13)


def test_rotation_about_z(sphere):
    h = sample(sphere, "0.25*z")
    t = 0.15
    theta = 4 * np.pi * 0.25 * t
    pts = default_probes("sphere", 40, seed=3)
    out = exact_flow(h, t).apply(pts)
    expect = np.column_stack(
        [
            np.cos(theta) * pts[:, 0] - np.sin(theta) * pts[:, 1],
            np.sin(theta) * pts[:, 0] + np.cos(theta) * pts[:, 1],
            pts[:, 2],
        ]
    )
    assert np.allclose(out, expect, atol=1e-12)


def test_rotation_group_properties(sphere):
    h = sample(sphere, "0.3*x + 0.1*y - 0.2*z")
    axis = np.array([0.3, 0.1, -0.2])
    rot = exact_flow(h, 0.23).steps[0]
    r = rot.matrix
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-13)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-13)
    assert np.allclose(r @ axis, axis, atol=1e-13)
    theta = 4 * np.pi * np.linalg.norm(axis) * 0.23
    assert np.trace(r) == pytest.approx(1 + 2 * np.cos(theta), abs=1e-12)
    # composing two partial rotations equals one full rotation
    pts = default_probes("sphere", 20, seed=4)
    two_step = exact_flow(h, 0.09).apply(exact_flow(h, 0.14).apply(pts))
    one_step = exact_flow(h, 0.23).apply(pts)
    assert np.max(np.abs(two_step - one_step)) < 1e-13


@pytest.mark.parametrize(
    "mesh_name,h_src,a_src",
    [
        ("torus", "0.3*sin(2*pi*q)", "cos(2*pi*p)*sin(2*pi*q)"),
        ("torus", "0.2*cos(2*pi*p)", "sin(2*pi*q)+cos(2*pi*p)"),
        ("sphere", "0.3*x + 0.1*y - 0.2*z", "x^2*z - y"),
    ],
)
def test_flow_consistency_with_bracket(mesh_name, h_src, a_src, torus, sphere):
    """d/dt A(flow_H^t(x)) at t=0 must equal {A, H}(x)."""
    mesh = torus if mesh_name == "torus" else sphere
    h = sample(mesh, h_src)
    a = sample(mesh, a_src)
    pts = default_probes(mesh.kind, 60, seed=5)
    eps = 1e-5
    ahead = a.expr.eval_at(exact_flow(h, eps).apply(pts))
    behind = a.expr.eval_at(exact_flow(h, eps, direction=-1).apply(pts))
    rate = (ahead - behind) / (2 * eps)
    bracket = poisson(a, h).expr.eval_at(pts)
    assert np.max(np.abs(rate - bracket)) < 5e-7 * (1 + np.max(np.abs(bracket)))


def test_recognition_rejections(torus, sphere):
    with pytest.raises(NotRecognizedError):
        exact_flow(sample(torus, "sin(2*pi*q)*cos(2*pi*p)"), 0.1)
    with pytest.raises(NotRecognizedError):
        exact_flow(sample(sphere, "x^2"), 0.1)
    numeric = ScalarField(torus, np.ones(torus.n_points), None)
    with pytest.raises(NotRecognizedError):
        exact_flow(numeric, 0.1)


def test_zero_fields_give_identity(torus, sphere):
    pts_t = default_probes("torus", 10, seed=6)
    assert np.array_equal(exact_flow(sample(torus, "0"), 0.4).apply(pts_t), pts_t)
    zero_numeric = ScalarField(sphere, np.zeros(sphere.n_points), None)
    pts_s = default_probes("sphere", 10, seed=7)
    assert np.array_equal(exact_flow(zero_numeric, 0.4).apply(pts_s), pts_s)
    const = exact_flow(sample(sphere, "0.7"), 0.4)
    assert const.label == "identity"


def test_compose_inverse_consistency(sphere_pair):
    f, g = sphere_pair
    flow = compose_scheme(yoshida(4), f, g, 0.37)
    pts = default_probes("sphere", 80, seed=8)
    back = flow.inverse().apply(flow.apply(pts))
    assert np.max(point_distances("sphere", back, pts)) < 1e-12


def test_compose_preserves_sphere(sphere_pair):
    f, g = sphere_pair
    out = compose_scheme(yoshida(6), f, g, 0.9).apply(default_probes("sphere", 100, seed=9))
    assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-10


def test_compose_with_zero_g_is_exact_flow(torus_pair):
    f, _ = torus_pair
    zero = sample(f.mesh, "0")
    pts = default_probes("torus", 40, seed=10)
    a = compose_scheme(strang(), f, zero, 0.31).apply(pts)
    b = exact_flow(f, 0.31).apply(pts)
    assert np.max(point_distances("torus", a, b)) < 1e-14


# ---------------------------------------------------------------------------
# Reference integration
# ---------------------------------------------------------------------------


def test_reference_matches_exact_rotation(sphere):
    h = sample(sphere, "0.3*x + 0.1*y - 0.2*z")
    pts = default_probes("sphere", 30, seed=11)
    ref = reference_flow(h, 0.3, tol=1e-12, probes=pts)
    assert ref.error_estimate <= 1e-12
    exact = exact_flow(h, 0.3).apply(pts)
    assert np.max(point_distances("sphere", ref.apply(pts), exact)) < 5e-12


def test_reference_matches_scipy_on_torus(torus_pair):
    f, g = torus_pair
    h = f + g

    def rhs(_t, y):
        pts = y.reshape(-1, 2)
        vel = StaticHamiltonian(h).velocity(pts, 0.0)
        return vel.ravel()

    pts = default_probes("torus", 12, seed=12)
    ref = reference_flow(h, 0.6, tol=1e-12, probes=pts).apply(pts)
    ivp = solve_ivp(rhs, (0.0, 0.6), pts.ravel(), rtol=1e-12, atol=1e-13, dense_output=False)
    end = ivp.y[:, -1].reshape(-1, 2) % 1.0
    assert np.max(point_distances("torus", ref, end)) < 1e-9


def test_reference_energy_drift(sphere):
    h = sample(sphere, "x*y + 0.5*z^2")
    pts = default_probes("sphere", 30, seed=13)
    ref = reference_flow(h, 0.5, tol=1e-11, probes=pts)
    out = ref.apply(pts)
    drift = np.max(np.abs(h.expr.eval_at(out) - h.expr.eval_at(pts)))
    assert drift < 1e-9


def test_reference_no_convergence(sphere):
    h = sample(sphere, "x*y + 0.5*z^2")
    with pytest.raises(NoConvergenceError):
        reference_flow(h, 0.5, tol=1e-16, max_steps=64)


# ---------------------------------------------------------------------------
# Composition generator (cocycle)
# ---------------------------------------------------------------------------


def test_generator_at_zero_is_sum(torus_pair):
    f, g = torus_pair
    k = cocycle_hamiltonian(strang(), f, g, 0.0)
    assert np.max(np.abs(k.values - (f.values + g.values))) < 1e-15


def test_generator_class_matches_field(torus_pair):
    f, g = torus_pair
    gen = CocycleGenerator(yoshida(4), f, g)
    k = cocycle_hamiltonian(yoshida(4), f, g, 0.27)
    assert np.max(np.abs(gen.value(f.mesh.points, 0.27) - k.values)) < 1e-14


@pytest.mark.parametrize("mesh_name", ["torus", "sphere"])
def test_generator_velocity_matches_finite_differences(mesh_name, torus_pair, sphere_pair):
    f, g = torus_pair if mesh_name == "torus" else sphere_pair
    gen = CocycleGenerator(strang(), f, g)
    fd = ClosureHamiltonian(gen.value, gen.mesh_kind)
    pts = default_probes(gen.mesh_kind, 40, seed=14)
    exactv = gen.velocity(pts, 0.3)
    approx = fd.velocity(pts, 0.3)
    assert np.max(np.abs(exactv - approx)) < 1e-8


@pytest.mark.parametrize("mesh_name,scheme_fn", [("torus", strang), ("sphere", yoshida)])
def test_generator_flow_reproduces_composition(mesh_name, scheme_fn, torus_pair, sphere_pair):
    """Integrating the generator's vector field lands on the composition."""
    f, g = torus_pair if mesh_name == "torus" else sphere_pair
    scheme = strang() if scheme_fn is strang else yoshida(4)
    t = 0.25
    pts = default_probes(f.mesh.kind, 24, seed=15)
    gen = CocycleGenerator(scheme, f, g)
    ref = reference_flow(gen, t, tol=1e-11, probes=pts)
    direct = compose_scheme(scheme, f, g, t).apply(pts)
    gap = np.max(point_distances(f.mesh.kind, ref.apply(pts), direct))
    assert gap < max(1e-9, 20 * ref.error_estimate)


def test_generator_interpolation_warning(torus_pair):
    f, _ = torus_pair
    g_num = ScalarField(f.mesh, sample(f.mesh, "cos(2*pi*p)").values, None)
    with pytest.warns(InterpolationDominatesWarning):
        cocycle_hamiltonian(lie_trotter(), f, g_num, 0.2)


def test_generator_symbolic_emits_no_warning(torus_pair):
    f, g = torus_pair
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cocycle_hamiltonian(yoshida(4), f, g, 0.2)


# ---------------------------------------------------------------------------
# Remainder sweeps
# ---------------------------------------------------------------------------


# Sup-norm remainders saturate once the stage shears move points by O(1),
# so the unit sweeps start at a t0 small enough to stay asymptotic for
# these amplitudes.
SMALL_T = tuple(0.05 * 2.0**-k for k in range(6))


def test_remainder_lie_trotter(torus_pair):
    f, g = torus_pair
    sweep = remainder_ratio_sweep(lie_trotter(), f, g, t_list=SMALL_T)
    assert sweep.generation == 2
    assert sweep.exponent == pytest.approx(1.0, abs=0.1)
    assert 0.4 < sweep.kappa_max < 1.5
    ratios = [row["ratio"] for row in sweep.rows[-4:]]
    assert max(ratios) / min(ratios) < 2.0


def test_remainder_strang(torus_pair):
    f, g = torus_pair
    sweep = remainder_ratio_sweep(strang(), f, g, t_list=SMALL_T)
    assert sweep.generation == 3
    assert sweep.exponent == pytest.approx(2.0, abs=0.1)
    assert np.isfinite(sweep.kappa_max)


def test_remainder_commuting_pair_degenerate(torus):
    f = sample(torus, "sin(2*pi*q)")
    g = sample(torus, "cos(2*pi*q)")
    with pytest.raises(DegenerateInputError):
        remainder_ratio_sweep(lie_trotter(), f, g)


def test_remainder_norm_l1_below_uniform(torus_pair):
    f, g = torus_pair
    assert remainder_norm(strang(), f, g, 0.2, norm="l1") <= remainder_norm(strang(), f, g, 0.2)


# ---------------------------------------------------------------------------
# Bracket expansion of compositions
# ---------------------------------------------------------------------------


def test_expansion_single_flow_terms(torus):
    a = sample(torus, "cos(2*pi*p)")
    h = sample(torus, "0.3*sin(2*pi*q)")
    terms = composition_expansion(a, [h], 4)
    assert [t.powers for t in terms] == [(0,), (1,), (2,), (3,)]
    assert [t.coefficient for t in terms] == [1.0, 1.0, 0.5, pytest.approx(1 / 6)]
    assert np.allclose(terms[0].field.values, a.values)
    assert np.allclose(terms[1].field.values, poisson(a, h).values, atol=1e-12)


def test_expansion_residual_order_single(torus):
    a = sample(torus, "cos(2*pi*p)")
    h = sample(torus, "0.3*sin(2*pi*q)")
    cap = 3
    terms = composition_expansion(a, [h], cap)
    t_list = [0.2 * 2.0**-k for k in range(5)]
    errs = [
        np.max(np.abs(expansion_lhs(a, [h], t) - expansion_partial_sum(terms, t)))
        for t in t_list
    ]
    slope = np.polyfit(np.log(t_list), np.log(errs), 1)[0]
    assert slope == pytest.approx(cap, abs=0.2)


def test_expansion_residual_order_two_flows(torus_pair):
    f, g = torus_pair
    a = sample(f.mesh, "sin(2*pi*q)*cos(2*pi*p)")
    cap = 3
    terms = composition_expansion(a, [f, g], cap)
    # powers with total degree <= 2 over two flows: 6 terms
    assert len(terms) == 6
    t_list = [0.2 * 2.0**-k for k in range(5)]
    errs = [
        np.max(np.abs(expansion_lhs(a, [f, g], t) - expansion_partial_sum(terms, t)))
        for t in t_list
    ]
    slope = np.polyfit(np.log(t_list), np.log(errs), 1)[0]
    assert slope == pytest.approx(cap, abs=0.2)


def test_expansion_mixed_term_field(torus_pair):
    f, g = torus_pair
    a = sample(f.mesh, "sin(2*pi*q)*cos(2*pi*p)")
    terms = {t.powers: t for t in composition_expansion(a, [f, g], 3)}
    mixed = terms[(1, 1)]
    # bracket with the first flow's Hamiltonian applies first
    expected = poisson(poisson(a, f), g)
    assert np.max(np.abs(mixed.field.values - expected.values)) < 1e-12
    assert mixed.coefficient == 1.0
    assert mixed.t_power == 2


def test_expansion_guards(torus_pair):
    f, g = torus_pair
    a = sample(f.mesh, "sin(2*pi*q)")
    with pytest.raises(OutOfRangeError):
        composition_expansion(a, [f, g], 7)
    with pytest.raises(OutOfRangeError):
        composition_expansion(a, [f] * 5, 3)
    numeric = ScalarField(f.mesh, g.values, None)
    with pytest.raises(SymbolicRequiredError):
        composition_expansion(a, [numeric], 3)


# ---------------------------------------------------------------------------
# Flow equivalence orders
# ---------------------------------------------------------------------------


def test_flow_equivalence_gap():
    mesh = build_sphere(3)
    u = sample(mesh, "x + 0.4*y")
    w = sample(mesh, "0.5*z")
    static = LinearPathHamiltonian([(lambda s: 1.0, u)])
    perturbed = LinearPathHamiltonian([(lambda s: 1.0, u), (lambda s: s * s, w)])
    t_list = [0.05 * 2.0**-k for k in range(5)]
    result = flow_equivalence_order(static, perturbed, mesh, t_list=t_list, tol=1e-12)
    assert isinstance(result, EquivalenceOrders)
    assert result.hamiltonian_exponent == pytest.approx(2.0, abs=0.02)
    assert result.flow_exponent == pytest.approx(3.0, abs=0.15)
    assert result.gap == pytest.approx(1.0, abs=0.15)


# ---------------------------------------------------------------------------
# Probe and distance helpers
# ---------------------------------------------------------------------------


def test_default_probes_deterministic():
    a = default_probes("torus")
    b = default_probes("torus")
    assert np.array_equal(a, b)
    assert a.shape == (160, 2)
    assert np.all((a >= 0) & (a < 1))
    s = default_probes("sphere", 50)
    assert np.allclose(np.linalg.norm(s, axis=1), 1.0, atol=1e-14)


def test_point_distance_wraps():
    a = np.array([[0.99, 0.5]])
    b = np.array([[0.01, 0.5]])
    assert point_distances("torus", a, b)[0] == pytest.approx(0.02, abs=1e-12)
    assert point_distances("sphere", np.eye(3), np.eye(3)).max() == 0.0
