import numpy as np
import pytest

from symflow.bracket import (
    DegenerateInputError,
    LieMonomial,
    OutOfRangeError,
    SymbolicRequiredError,
    enumerate_monomials,
    eval_monomial,
    khl_ratio,
    poisson,
    q_norm,
)
from symflow.manifold import ScalarField, build_sphere, build_torus, sample, uniform_norm

FOUR_PI_SQ = 4.0 * np.pi**2


@pytest.fixture(scope="module")
def torus():
    return build_torus(64, 64)


@pytest.fixture(scope="module")
def sphere():
    return build_sphere(4)


@pytest.fixture(scope="module")
def torus_pair(torus):
    return sample(torus, "sin(2*pi*q)"), sample(torus, "sin(2*pi*p)")


def strip_expr(f):
    return ScalarField(f.mesh, f.values.copy(), None)


def test_torus_bracket_closed_form(torus, torus_pair):
    f, g = torus_pair
    b = poisson(f, g)
    q, p = torus.points[:, 0], torus.points[:, 1]
    expected = FOUR_PI_SQ * np.cos(2 * np.pi * q) * np.cos(2 * np.pi * p)
    assert np.max(np.abs(b.values - expected)) <= 1e-10
    assert b.expr is not None
    assert uniform_norm(b) == pytest.approx(FOUR_PI_SQ, rel=1e-12)


def test_sphere_bracket_closed_form(sphere):
    x = sample(sphere, "x")
    y = sample(sphere, "y")
    b = poisson(x, y)
    expected = 4.0 * np.pi * sphere.points[:, 2]
    assert np.max(np.abs(b.values - expected)) <= 1e-10


def test_bracket_against_sympy_on_torus(torus):
    import sympy

    sq, sp = sympy.symbols("q p")
    fs = sympy.sin(2 * sympy.pi * sq) * sympy.cos(2 * sympy.pi * sp)
    gs = sympy.cos(2 * sympy.pi * (sq + sp))
    bs = sympy.diff(fs, sq) * sympy.diff(gs, sp) - sympy.diff(fs, sp) * sympy.diff(gs, sq)
    oracle = sympy.lambdify((sq, sp), bs, "numpy")
    f = sample(torus, "sin(2*pi*q)*cos(2*pi*p)")
    g = sample(torus, "cos(2*pi*(q+p))")
    b = poisson(f, g)
    expected = oracle(torus.points[:, 0], torus.points[:, 1])
    np.testing.assert_allclose(b.values, expected, rtol=1e-10, atol=1e-10)


def test_antisymmetry_symbolic(torus, sphere):
    for mesh, sources in [
        (torus, ("sin(2*pi*q)*cos(2*pi*p)", "cos(2*pi*q)+sin(2*pi*p)")),
        (sphere, ("x*y-z^2", "x+2*y*z")),
    ]:
        f = sample(mesh, sources[0])
        g = sample(mesh, sources[1])
        assert np.max(np.abs(poisson(f, f).values)) == 0.0
        asym = poisson(f, g).values + poisson(g, f).values
        assert np.max(np.abs(asym)) <= 1e-10


def test_antisymmetry_numeric(torus, sphere):
    rng = np.random.default_rng(17)
    f = ScalarField(torus, rng.normal(size=torus.n_points))
    assert np.max(np.abs(poisson(f, f).values)) <= 1e-10
    g = ScalarField(sphere, rng.normal(size=sphere.n_points))
    assert np.max(np.abs(poisson(g, g).values)) <= 1e-10


def test_jacobi_identity(torus, sphere):
    cases = [
        (torus, ["sin(2*pi*q)", "sin(2*pi*p)", "cos(2*pi*(q+p))"]),
        (sphere, ["x", "y", "z"]),
        (sphere, ["1-2*x^2", "1-2*y^2", "x*y+z"]),
    ]
    for mesh, sources in cases:
        f, g, h = (sample(mesh, s) for s in sources)
        total = (
            poisson(poisson(f, g), h).values
            + poisson(poisson(g, h), f).values
            + poisson(poisson(h, f), g).values
        )
        assert np.max(np.abs(total)) <= 1e-8


def test_leibniz_rule(torus, sphere):
    for mesh, sources in [
        (torus, ("sin(2*pi*q)", "cos(2*pi*p)", "sin(2*pi*(q+p))")),
        (sphere, ("x*y", "z", "1-2*x^2")),
    ]:
        f, g, h = (sample(mesh, s) for s in sources)
        lhs = poisson(f * g, h).values
        rhs = f.values * poisson(g, h).values + g.values * poisson(f, h).values
        assert np.max(np.abs(lhs - rhs)) <= 1e-8


def test_numeric_matches_symbolic(torus, sphere):
    f = sample(torus, "sin(2*pi*q)")
    g = sample(torus, "sin(2*pi*p)")
    sym = poisson(f, g)
    num = poisson(strip_expr(f), strip_expr(g))
    scale = uniform_norm(sym)
    assert np.max(np.abs(sym.values - num.values)) <= 0.01 * scale

    f2 = sample(sphere, "x")
    g2 = sample(sphere, "y")
    sym2 = poisson(f2, g2)
    num2 = poisson(strip_expr(f2), strip_expr(g2))
    assert np.max(np.abs(sym2.values - num2.values)) <= 0.05 * uniform_norm(sym2)


def test_enumerate_counts_and_order():
    for n in range(1, 9):
        monomials = enumerate_monomials(n)
        assert len(monomials) == 2 ** (n - 1)
        assert len(set(monomials)) == len(monomials)
        words = [m.word for m in monomials]
        assert words == sorted(words)
    assert [str(m) for m in enumerate_monomials(2)] == ["{{F,G},F}", "{{F,G},G}"]
    with pytest.raises(OutOfRangeError):
        enumerate_monomials(0)
    with pytest.raises(OutOfRangeError):
        enumerate_monomials(9)


def test_eval_monomial_left_fold(torus_pair):
    f, g = torus_pair
    base = poisson(f, g)
    m = LieMonomial(("F", "G"))
    direct = poisson(poisson(base, f), g)
    via = eval_monomial(m, f, g)
    np.testing.assert_allclose(via.values, direct.values, rtol=1e-12, atol=1e-12)


def test_q2_torus_value(torus_pair):
    f, g = torus_pair
    assert q_norm(2, f, g) == pytest.approx(FOUR_PI_SQ, abs=1e-6)


def test_q_norm_l1_le_uniform(torus_pair):
    f, g = torus_pair
    for n in (2, 3):
        assert q_norm(n, f, g, norm="l1") <= q_norm(n, f, g, norm="uniform") + 1e-12


def test_monomial_scaling_degree(sphere):
    f = sample(sphere, "1-2*x^2")
    g = sample(sphere, "1-2*y^2")
    scale = 2.0
    for word in [(), ("F",), ("G", "F")]:
        m = LieMonomial(word)
        base = eval_monomial(m, f, g)
        scaled = eval_monomial(m, scale * f, scale * g)
        k = m.bracket_count + 1  # total letters: word + the core pair
        np.testing.assert_allclose(scaled.values, scale**k * base.values, rtol=1e-12, atol=1e-9)


def test_q_norm_homogeneity(sphere):
    f = sample(sphere, "1-2*x^2")
    g = sample(sphere, "1-2*y^2")
    for e in (0.5, 2.0, 4.0):
        for n in (2, 3, 4):
            qn = q_norm(n, f, g)
            qn_scaled = q_norm(n, e * f, e * g)
            assert qn_scaled == pytest.approx(e**n * qn, rel=1e-6)


def test_numeric_guard(torus):
    rng = np.random.default_rng(23)
    f = ScalarField(torus, rng.normal(size=torus.n_points))
    g = ScalarField(torus, rng.normal(size=torus.n_points))
    deep = LieMonomial(("F", "G", "F"))  # four bracket applications
    with pytest.raises(SymbolicRequiredError):
        eval_monomial(deep, f, g)
    eval_monomial(deep, f, g, allow_numeric=True)  # explicit override runs
    with pytest.raises(SymbolicRequiredError):
        q_norm(5, f, g)


def test_khl_ratio_reduces_to_one(torus_pair):
    f, g = torus_pair
    assert khl_ratio(2, f, g) == pytest.approx(1.0, rel=1e-12)


def test_khl_degenerate(torus):
    f = sample(torus, "sin(2*pi*q)")
    g = sample(torus, "cos(2*pi*q)")  # commutes with f: both depend on q only
    with pytest.raises(DegenerateInputError):
        khl_ratio(3, f, g)


def test_q_norm_out_of_range(torus_pair):
    f, g = torus_pair
    with pytest.raises(OutOfRangeError):
        q_norm(1, f, g)
    with pytest.raises(OutOfRangeError):
        q_norm(9, f, g)
    with pytest.raises(OutOfRangeError):
        q_norm(3, f, g, norm="L3")
