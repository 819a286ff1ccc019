"""Acceptance gate: eleven pinned checks covering the whole package.

Each test prints exactly one PASS/FAIL line (visible with ``pytest -s``
or on failure) and asserts with tolerances that are fixed here, not
derived from the data.  Seeds are pinned; reruns are byte-identical.
"""

import math
import time

import numpy as np
import pytest

from symflow.bracket import enumerate_monomials, q_norm
from symflow.cli import ExperimentConfig, inequality_sweep
from symflow.flow import (
    CocycleGenerator,
    LinearPathHamiltonian,
    composition_expansion,
    compose_scheme,
    default_probes,
    expansion_lhs,
    expansion_partial_sum,
    flow_equivalence_order,
    point_distances,
    reference_flow,
    remainder_ratio_sweep,
)
from symflow.manifold import ScalarField, build_sphere, build_torus, sample, uniform_norm
from symflow.reeb import build_reeb, pi_defect, quasi_state, tau
from symflow.scheme import lie_trotter, strang, validate_order, yoshida

TORUS_T_GRID = tuple(0.025 * 2.0**-k for k in range(7))
SPHERE_T_GRID = tuple(0.05 * 2.0**-k for k in range(7))

_RANDOM_MONOMIALS = (
    "x", "y", "z",
    "x*x", "y*y", "z*z", "x*y", "y*z", "x*z",
    "x*x*x", "y*y*y", "z*z*z", "x*x*y", "x*x*z",
    "y*y*x", "y*y*z", "z*z*x", "z*z*y", "x*y*z",
)


def _random_expr(rng, amp=1.0):
    coefs = rng.uniform(-amp, amp, len(_RANDOM_MONOMIALS))
    return " + ".join(f"({c:.17g})*{m}" for c, m in zip(coefs, _RANDOM_MONOMIALS))


def _report(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def torus():
    return build_torus(64, 64)


@pytest.fixture(scope="module")
def torus_pair(torus):
    return (
        sample(torus, "0.3*sin(2*pi*q)", name="f"),
        sample(torus, "0.2*cos(2*pi*p)", name="g"),
    )


@pytest.fixture(scope="module")
def sphere4():
    return build_sphere(4)


# 1 -------------------------------------------------------------------------


def test_01_extremal_pair_defect_at_level_five():
    started = time.perf_counter()
    mesh = build_sphere(5)
    d = pi_defect(sample(mesh, "1 - 2*x^2"), sample(mesh, "1 - 2*y^2"))
    elapsed = time.perf_counter() - started
    ok = (
        abs(d.defect - 2.0) <= 0.05
        and abs(d.zeta_f - 1.0) <= 0.05
        and abs(d.zeta_g - 1.0) <= 0.05
        and abs(d.zeta_sum) <= 0.05
        and elapsed < 30.0
    )
    _report(1, ok, f"defect {d.defect:.6f}, states ({d.zeta_f:.4f}, "
                   f"{d.zeta_g:.4f}, {d.zeta_sum:.4f}), {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------


def test_02_quasi_state_axiom_suite(sphere4):
    """100 random instances per property at level 4, tolerance tau(4)."""
    started = time.perf_counter()
    mesh = sphere4
    tol = tau(4)
    rng = np.random.default_rng(2024)

    assert quasi_state(sample(mesh, "1")) == 1.0

    worst = dict(additivity=0.0, monotonicity=-np.inf, homogeneity=0.0,
                 lipschitz=-np.inf, pi_lipschitz=-np.inf, pi_bound=-np.inf,
                 vanishing=0.0)
    for _ in range(100):
        h = sample(mesh, _random_expr(rng))
        h = h * (1.0 / uniform_norm(h))
        a, b = rng.uniform(-2.0, 2.0, 2)
        al = rng.uniform(-1.0, 1.0, 2)
        be = rng.uniform(-1.0, 1.0, 2)
        u = al[0] * h + al[1] * (h * h)      # two functions of the same
        v = be[0] * h + be[1] * (h * h * h)  # field: a commuting pair
        z_u, z_v = quasi_state(u), quasi_state(v)

        z_comb = quasi_state(a * u + b * v)
        worst["additivity"] = max(worst["additivity"],
                                  abs(z_comb - a * z_u - b * z_v))

        worst["homogeneity"] = max(worst["homogeneity"],
                                   abs(quasi_state(a * u) - a * z_u))

        p = sample(mesh, _random_expr(rng))
        p = p * (0.3 / uniform_norm(p))
        lower = ScalarField(mesh, u.values - np.abs(p.values))
        worst["monotonicity"] = max(worst["monotonicity"],
                                    quasi_state(lower) - z_u)

        z_up = quasi_state(u + p)
        worst["lipschitz"] = max(worst["lipschitz"],
                                 abs(z_up - z_u) - uniform_norm(p))

        pi_uv = abs(quasi_state(u + v) - z_u - z_v)
        pi_pert = abs(quasi_state(u + p + v) - z_up - z_v)
        worst["vanishing"] = max(worst["vanishing"], pi_uv)
        worst["pi_lipschitz"] = max(worst["pi_lipschitz"],
                                    abs(pi_uv - pi_pert) - 2 * uniform_norm(p))
        worst["pi_bound"] = max(
            worst["pi_bound"],
            pi_pert - 2 * max(uniform_norm(u + p), uniform_norm(v)),
        )

    elapsed = time.perf_counter() - started
    ok = (
        worst["additivity"] <= tol
        and worst["monotonicity"] <= tol
        and worst["homogeneity"] <= tol
        and worst["lipschitz"] <= tol
        and worst["pi_lipschitz"] <= tol
        and worst["pi_bound"] <= 1e-9
        and worst["vanishing"] <= tol
        and elapsed < 120.0
    )
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    _report(2, ok, f"{detail}, {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------


def test_03_monomial_counts_and_base_bracket_norm(torus):
    counts_ok = all(
        len(enumerate_monomials(n)) == 2 ** (n - 1) for n in range(1, 9)
    )
    f = sample(torus, "sin(2*pi*q)")
    g = sample(torus, "sin(2*pi*p)")
    q2 = q_norm(2, f, g)
    expected = 4.0 * math.pi**2
    ok = counts_ok and abs(q2 - expected) <= 1e-6
    _report(3, ok, f"counts 2^(n-1) for n=1..8: {counts_ok}; "
                   f"Q2 {q2:.9f} vs 4*pi^2 {expected:.9f}")


# 4 -------------------------------------------------------------------------


def test_04_defect_and_bracket_scaling(sphere4):
    f = sample(sphere4, "1 - 2*x^2")
    g = sample(sphere4, "1 - 2*y^2")
    pi_base = pi_defect(f, g).defect
    qn_base = {n: q_norm(n, f, g) for n in (2, 3, 4)}
    worst = 0.0
    for e in (0.5, 2.0, 4.0):
        pi_scaled = pi_defect(e * f, e * g).defect
        worst = max(worst, abs(pi_scaled - e * pi_base) / (e * pi_base))
        for n in (2, 3, 4):
            qn_scaled = q_norm(n, e * f, e * g)
            worst = max(worst, abs(qn_scaled - e**n * qn_base[n]) / (e**n * qn_base[n]))
            ratio_base = pi_base / qn_base[n] ** (1.0 / n)
            ratio_scaled = pi_scaled / qn_scaled ** (1.0 / n)
            worst = max(worst, abs(ratio_scaled - ratio_base) / ratio_base)
    ok = worst <= 1e-6
    _report(4, ok, f"worst relative deviation {worst:.2e} over E in (1/2, 2, 4), n in (2, 3, 4)")


# 5 -------------------------------------------------------------------------


def test_05_integrator_order_fits(torus_pair, sphere4):
    sphere_pair = (
        sample(sphere4, "0.35*x", name="f"),
        sample(sphere4, "0.25*z", name="g"),
    )
    cases = [
        (lie_trotter(), 2.0, 0.2),
        (strang(), 3.0, 0.2),
        (yoshida(4), 5.0, 0.2),
        (yoshida(6), 7.0, 0.3),
    ]
    details = []
    ok = True
    for scheme, slope_want, tol in cases:
        for pair, grid in ((torus_pair, TORUS_T_GRID), (sphere_pair, SPHERE_T_GRID)):
            started = time.perf_counter()
            fit = validate_order(scheme, pair[0], pair[1], t_list=grid)
            elapsed = time.perf_counter() - started
            good = (fit.status == "ok"
                    and abs(fit.slope - slope_want) <= tol
                    and elapsed < 120.0)
            ok = ok and good
            details.append(f"{fit.label}/{pair[0].mesh.kind} {fit.slope:.3f}")
    _report(5, ok, "slopes " + ", ".join(details))


# 6 -------------------------------------------------------------------------


def test_06_remainder_exponents_and_bounded_ratio(torus_pair):
    f, g = torus_pair
    details = []
    ok = True
    for scheme in (strang(), yoshida(4)):
        sweep = remainder_ratio_sweep(scheme, f, g, t_list=TORUS_T_GRID)
        floor = sweep.generation - 1 - 0.2
        last4 = [r["ratio"] for r in sweep.rows[-4:]]
        spread = max(last4) / min(last4)
        good = sweep.exponent >= floor and spread < 3.0
        ok = ok and good
        details.append(f"{scheme.label}: exponent {sweep.exponent:.3f} "
                       f"(floor {floor}), ratio spread {spread:.2f}")
    _report(6, ok, "; ".join(details))


# 7 -------------------------------------------------------------------------


def test_07_generator_flow_matches_composition(torus_pair):
    f, g = torus_pair
    t = 0.2
    pts = default_probes("torus", 32, seed=15)
    details = []
    ok = True
    for scheme in (strang(), yoshida(4)):
        gen = CocycleGenerator(scheme, f, g)
        ref = reference_flow(gen, t, tol=1e-11, probes=pts)
        direct = compose_scheme(scheme, f, g, t).apply(pts)
        gap = float(np.max(point_distances("torus", ref.apply(pts), direct)))
        budget = max(1e-9, 20.0 * ref.error_estimate)
        good = gap <= budget
        ok = ok and good
        details.append(f"{scheme.label}: gap {gap:.2e} (budget {budget:.2e})")
    _report(7, ok, "; ".join(details))


# 8 -------------------------------------------------------------------------


def test_08_expansion_residual_orders(torus_pair):
    f, g = torus_pair
    a = sample(f.mesh, "sin(2*pi*q)*cos(2*pi*p)")
    t_list = [0.05 * 2.0**-k for k in range(5)]
    details = []
    ok = True
    for cap in (2, 3, 4):
        terms = composition_expansion(a, [f, g], cap)
        errs = [
            float(np.max(np.abs(expansion_lhs(a, [f, g], t)
                                - expansion_partial_sum(terms, t))))
            for t in t_list
        ]
        slope = float(np.polyfit(np.log(t_list), np.log(errs), 1)[0])
        good = abs(slope - cap) <= 0.2
        ok = ok and good
        details.append(f"cap {cap}: slope {slope:.3f}")
    _report(8, ok, "; ".join(details))


# 9 -------------------------------------------------------------------------


def test_09_flow_equivalence_gap():
    mesh = build_sphere(3)
    u = sample(mesh, "x + 0.4*y")
    w = sample(mesh, "0.5*z")
    static = LinearPathHamiltonian([(lambda s: 1.0, u)])
    perturbed = LinearPathHamiltonian([(lambda s: 1.0, u), (lambda s: s * s, w)])
    result = flow_equivalence_order(
        static, perturbed, mesh,
        t_list=[0.05 * 2.0**-k for k in range(5)], tol=1e-12,
    )
    ok = abs(result.gap - 1.0) <= 0.3
    _report(9, ok, f"gap {result.gap:.4f} (flow {result.flow_exponent:.3f}, "
                   f"generator {result.hamiltonian_exponent:.3f})")


# 10 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def family_constants():
    out = {}
    for key, family_size, seed in (("base", 20, 2024), ("doubled", 40, 777)):
        cfg = ExperimentConfig(level=4, family_size=family_size, n_max=4, seed=seed)
        table = inequality_sweep(cfg)
        idx_op = table.columns.index("op")
        idx_n = table.columns.index("n")
        idx_ratio = table.columns.index("ratio")
        out[key] = {
            row[idx_n]: row[idx_ratio]
            for row in table.rows if row[idx_op] == "c_n"
        }
    return out


def test_10_empirical_constants_are_stable(family_constants):
    base, doubled = family_constants["base"], family_constants["doubled"]
    details = []
    ok = True
    for n in (2, 3, 4):
        change = abs(doubled[n] - base[n]) / base[n]
        good = math.isfinite(base[n]) and math.isfinite(doubled[n]) and change < 0.10
        ok = ok and good
        details.append(f"n={n}: {base[n]:.4f} -> {doubled[n]:.4f} ({change * 100:.1f}%)")
    _report(10, ok, "; ".join(details))


# 11 ------------------------------------------------------------------------


def test_11_runs_are_byte_reproducible():
    def csv_for(workers):
        cfg = ExperimentConfig(level=3, family_size=2, n_max=3,
                               seed=5, workers=workers)
        return inequality_sweep(cfg).to_csv()

    serial = csv_for(1)
    ok = serial == csv_for(4) and serial == csv_for(1)
    _report(11, ok, f"csv of {len(serial)} bytes identical across reruns "
                    f"and worker counts 1 vs 4")
