"""Hamiltonian flows: exact, composed, and reference-integrated.

Exact flows are available for the two recognised families:

* sphere, linear ``H = a x + b y + c z``: rotation about ``(a, b, c)``
  with angular speed ``4 pi |(a, b, c)|`` (the factor matches the
  bracket normalisation in :mod:`symflow.bracket`);
* torus, ``H = f(q)`` or ``H = g(p)``: shears ``p -> p - t f'(q)``
  resp. ``q -> q + t g'(p)``.

Compositions are read right to left: in ``phi_{a1 F} o phi_{b1 G} o ...
o phi_{bm G}`` the last listed factor acts on the point first.  With
that convention the composition equals the flow of the time-dependent
Hamiltonian assembled by :func:`cocycle_hamiltonian` (first term
``a1 F``, each later term pulled back by the inverse flows of all
earlier factors), which is what the consistency tests check.

Order statements ("agrees with the flow modulo t**N") are measured on
finite probe sets: agreement of the maps is identified with agreement
at the sampled points, which the probe sizes here make a safe reading
for the smooth fields involved.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .bracket import DegenerateInputError, OutOfRangeError, SymbolicRequiredError, poisson, q_norm
from .expr import compile_evaluator
from .manifold import Mesh, ScalarField, interpolate, l1_norm, uniform_norm
from .scheme import SplittingScheme

__all__ = [
    "NotRecognizedError",
    "NoConvergenceError",
    "InterpolationDominatesWarning",
    "FlowMap",
    "recognize_flow",
    "exact_flow",
    "compose_scheme",
    "reference_flow",
    "reference_endpoints",
    "default_probes",
    "point_distances",
    "StaticHamiltonian",
    "LinearPathHamiltonian",
    "ClosureHamiltonian",
    "CocycleGenerator",
    "cocycle_hamiltonian",
    "remainder_norm",
    "remainder_ratio_sweep",
    "RemainderSweep",
    "ExpansionTerm",
    "composition_expansion",
    "expansion_partial_sum",
    "expansion_lhs",
    "flow_equivalence_order",
    "EquivalenceOrders",
]

FOUR_PI = 4.0 * np.pi


class NotRecognizedError(ValueError):
    """The Hamiltonian is outside the families with closed-form flows."""


class NoConvergenceError(RuntimeError):
    """Reference integration failed to reach the requested tolerance."""


class InterpolationDominatesWarning(UserWarning):
    """Interpolation error is a significant fraction of the computed field."""


# ---------------------------------------------------------------------------
# Atomic exact flows
# ---------------------------------------------------------------------------


class _Identity:
    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts

    def jacobian(self, pts: np.ndarray) -> np.ndarray:
        return np.eye(pts.shape[1])

    def jacobian_inverse(self, pts: np.ndarray) -> np.ndarray:
        return np.eye(pts.shape[1])

    def inverse(self) -> "_Identity":
        return self


class _Rotation:
    """Rotation by ``4 pi |axis| * t`` about ``axis`` (right-hand rule)."""

    def __init__(self, axis: np.ndarray, t: float):
        self.axis = np.asarray(axis, dtype=float)
        self.t = float(t)
        theta = FOUR_PI * np.linalg.norm(self.axis) * self.t
        n = self.axis / np.linalg.norm(self.axis)
        k = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
        self.matrix = np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.matrix.T

    def jacobian(self, pts: np.ndarray) -> np.ndarray:
        return self.matrix

    def jacobian_inverse(self, pts: np.ndarray) -> np.ndarray:
        return self.matrix.T

    def inverse(self) -> "_Rotation":
        return _Rotation(self.axis, -self.t)


class _Shear:
    """Torus shear generated by a Hamiltonian depending on one coordinate.

    ``axis == "q"`` means ``H = f(q)``: the flow moves ``p`` by
    ``-t f'(q)``.  ``axis == "p"`` means ``H = g(p)``: ``q`` moves by
    ``+t g'(p)``.  ``rate_fn`` and ``curv_fn`` are compiled evaluators
    of the first and second derivative, taking the two coordinate
    columns.
    """

    def __init__(self, axis: str, rate_fn, curv_fn, t: float):
        self.axis = axis
        self.rate_fn = rate_fn
        self.curv_fn = curv_fn
        self.t = float(t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        out = pts.copy()
        rate = self.rate_fn(pts[:, 0], pts[:, 1])
        if self.axis == "q":
            out[:, 1] = (out[:, 1] - self.t * rate) % 1.0
        else:
            out[:, 0] = (out[:, 0] + self.t * rate) % 1.0
        return out

    def _jac(self, pts: np.ndarray, sign: float) -> np.ndarray:
        n = pts.shape[0]
        jac = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        curv = self.curv_fn(pts[:, 0], pts[:, 1])
        if self.axis == "q":
            jac[:, 1, 0] = -sign * self.t * curv
        else:
            jac[:, 0, 1] = sign * self.t * curv
        return jac

    def jacobian(self, pts: np.ndarray) -> np.ndarray:
        return self._jac(pts, 1.0)

    def jacobian_inverse(self, pts: np.ndarray) -> np.ndarray:
        return self._jac(pts, -1.0)

    def inverse(self) -> "_Shear":
        return _Shear(self.axis, self.rate_fn, self.curv_fn, -self.t)


@dataclass
class FlowMap:
    """Composition of maps applied in list order (``steps[0]`` acts first)."""

    steps: list
    mesh_kind: str
    error_estimate: float = 0.0
    label: str = ""

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        for step in self.steps:
            pts = step.apply(pts)
        if np.ndim(points) == 1:
            return pts[0]
        return pts

    def inverse(self) -> "FlowMap":
        return FlowMap(
            [s.inverse() for s in reversed(self.steps)],
            self.mesh_kind,
            self.error_estimate,
            self.label + "^-1",
        )


_PROBE_SEED = 2024


def default_probes(mesh_kind: str, n: int = 160, seed: int = _PROBE_SEED) -> np.ndarray:
    """Deterministic probe points used for map comparisons."""
    rng = np.random.default_rng(seed)
    if mesh_kind == "torus":
        return rng.random((n, 2))
    pts = rng.normal(size=(n, 3))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def point_distances(mesh_kind: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise distances; periodic on the torus, chordal on the sphere."""
    if mesh_kind == "torus":
        d = a - b
        d -= np.round(d)
        return np.linalg.norm(d, axis=-1)
    return np.linalg.norm(a - b, axis=-1)


# ---------------------------------------------------------------------------
# Exact flow recognition
# ---------------------------------------------------------------------------

_REC_TOL = 1e-11


def _recognition_probes(mesh_kind: str) -> np.ndarray:
    return default_probes(mesh_kind, n=48, seed=97531)


def _is_negligible(values: np.ndarray, scale: float) -> bool:
    return float(np.max(np.abs(values))) <= _REC_TOL * scale


def recognize_flow(h: ScalarField) -> tuple[str, Callable[[float], object]]:
    """Classify a Hamiltonian and return ``(label, factory)``.

    The factory maps a time ``tau`` to the atomic exact-flow step, so a
    field recognised once can produce flows for many times without
    repeating the classification.

    Raises
    ------
    NotRecognizedError
        If the field has no expression or falls outside the recognised
        families (sphere linear forms; torus single-coordinate fields).
    """
    mesh = h.mesh
    if h.expr is None:
        if np.max(np.abs(h.values)) == 0.0:
            return "identity", lambda tau: _Identity()
        raise NotRecognizedError("exact flows need an expression-backed field")
    probes = _recognition_probes(mesh.kind)
    if mesh.kind == "torus":
        dq = h.expr.diff("q")
        dp = h.expr.diff("p")
        vq = dq.eval_at(probes)
        vp = dp.eval_at(probes)
        scale = 1.0 + max(np.max(np.abs(vq)), np.max(np.abs(vp)))
        q_only = _is_negligible(vp, scale)
        p_only = _is_negligible(vq, scale)
        if q_only and p_only:
            return "identity", lambda tau: _Identity()
        if q_only:
            rate, curv = compile_evaluator(dq), compile_evaluator(dq.diff("q"))
            return "shear-q", lambda tau: _Shear("q", rate, curv, tau)
        if p_only:
            rate, curv = compile_evaluator(dp), compile_evaluator(dp.diff("p"))
            return "shear-p", lambda tau: _Shear("p", rate, curv, tau)
        raise NotRecognizedError("torus field mixes q and p dependence")
    # sphere: require a linear form a*x + b*y + c*z (+ constant)
    partials = [h.expr.diff(v) for v in ("x", "y", "z")]
    grads = np.column_stack([d.eval_at(probes) for d in partials])
    scale = 1.0 + float(np.max(np.abs(grads)))
    spread = grads.max(axis=0) - grads.min(axis=0)
    if np.max(spread) > _REC_TOL * scale:
        raise NotRecognizedError("sphere field is not a linear form")
    axis = grads.mean(axis=0)
    residual = h.expr.eval_at(probes) - probes @ axis
    if not _is_negligible(residual - residual.mean(), 1.0 + float(np.max(np.abs(residual)))):
        raise NotRecognizedError("sphere field is not a linear form")
    if np.linalg.norm(axis) == 0.0:
        return "identity", lambda tau: _Identity()
    return "rotation", lambda tau: _Rotation(axis, tau)


def exact_flow(h: ScalarField, t: float, direction: int = 1) -> FlowMap:
    """Closed-form flow of a recognised Hamiltonian for time ``t * direction``.

    See :func:`recognize_flow` for the recognised families and the
    error raised otherwise.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    label, factory = recognize_flow(h)
    return FlowMap([factory(t * direction)], h.mesh.kind, label=label)


def compose_scheme(scheme: SplittingScheme, f: ScalarField, g: ScalarField, t: float) -> FlowMap:
    """One full step of a splitting scheme, built from exact flows.

    The returned map applies the coefficient pairs right to left, so the
    ``beta_m`` stage acts first.  Zero-coefficient stages are skipped.
    With ``G = 0`` the result is the exact flow of ``F``.
    """
    _, f_factory = recognize_flow(f)
    _, g_factory = recognize_flow(g)
    steps: list = []
    for alpha, beta in zip(reversed(scheme.alphas), reversed(scheme.betas)):
        if beta != 0.0:
            steps.append(g_factory(beta * t))
        if alpha != 0.0:
            steps.append(f_factory(alpha * t))
    if not steps:
        steps = [_Identity()]
    return FlowMap(steps, f.mesh.kind, label=f"{scheme.label}@{t!r}")


# ---------------------------------------------------------------------------
# Time-dependent Hamiltonians with exact vector fields
# ---------------------------------------------------------------------------


def _value_fn(field: ScalarField):
    """Compiled point evaluator of an expression-backed field, cached on it."""
    fn = field.__dict__.get("_compiled_value")
    if fn is None:
        compiled = compile_evaluator(field.expr)
        fn = lambda pts: compiled(*pts.T)  # noqa: E731
        field.__dict__["_compiled_value"] = fn
    return fn


def _velocity_fn(field: ScalarField):
    """Compiled Hamiltonian vector field of an expression-backed field."""
    fn = field.__dict__.get("_compiled_velocity")
    if fn is None:
        grads = [compile_evaluator(field.expr.diff(v)) for v in field.mesh.coord_names]
        if field.mesh.kind == "torus":
            gq, gp = grads

            def fn(pts):
                q, p = pts[:, 0], pts[:, 1]
                return np.column_stack([gp(q, p), -gq(q, p)])

        else:
            gx, gy, gz = grads

            def fn(pts):
                x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
                grad = np.column_stack([gx(x, y, z), gy(x, y, z), gz(x, y, z)])
                return FOUR_PI * np.cross(grad, pts)

        field.__dict__["_compiled_velocity"] = fn
    return fn


def _analytic_velocity(field: ScalarField, pts: np.ndarray) -> np.ndarray:
    """Hamiltonian vector field of an expression-backed field."""
    return _velocity_fn(field)(pts)


class StaticHamiltonian:
    """Autonomous Hamiltonian; exact gradients when an expression is present."""

    def __init__(self, field: ScalarField):
        self.field = field
        self.mesh_kind = field.mesh.kind
        self._partials: Optional[list[ScalarField]] = None

    def value(self, pts: np.ndarray, s: float) -> np.ndarray:
        if self.field.expr is not None:
            return _value_fn(self.field)(pts)
        return interpolate(self.field, pts)

    def velocity(self, pts: np.ndarray, s: float) -> np.ndarray:
        if self.field.expr is not None:
            return _velocity_fn(self.field)(pts)
        return self._numeric_velocity(pts)

    def _numeric_velocity(self, pts: np.ndarray) -> np.ndarray:
        if self._partials is None:
            from .bracket import _sphere_gradients, _torus_partials

            mesh = self.field.mesh
            if self.mesh_kind == "torus":
                dq, dp = _torus_partials(mesh, self.field.values)
                self._partials = [ScalarField(mesh, dq), ScalarField(mesh, dp)]
            else:
                grads = _sphere_gradients(mesh, self.field.values)
                self._partials = [ScalarField(mesh, grads[:, i]) for i in range(3)]
        if self.mesh_kind == "torus":
            dq = interpolate(self._partials[0], pts)
            dp = interpolate(self._partials[1], pts)
            return np.column_stack([dp, -dq])
        grad = np.column_stack([interpolate(p, pts) for p in self._partials])
        return FOUR_PI * np.cross(grad, pts)


class LinearPathHamiltonian:
    """Time-dependent combination ``sum_j c_j(s) * field_j`` of analytic fields."""

    def __init__(self, terms: Sequence[tuple[Callable[[float], float], ScalarField]]):
        if not terms:
            raise ValueError("at least one term required")
        if any(fld.expr is None for _, fld in terms):
            raise SymbolicRequiredError("path terms must be expression-backed fields")
        self.terms = list(terms)
        self.mesh_kind = self.terms[0][1].mesh.kind

    def value(self, pts: np.ndarray, s: float) -> np.ndarray:
        total = np.zeros(pts.shape[0])
        for coef_fn, fld in self.terms:
            total += coef_fn(s) * _value_fn(fld)(pts)
        return total

    def velocity(self, pts: np.ndarray, s: float) -> np.ndarray:
        total = np.zeros_like(pts)
        for coef_fn, fld in self.terms:
            total += coef_fn(s) * _velocity_fn(fld)(pts)
        return total


class ClosureHamiltonian:
    """Generic time-dependent Hamiltonian given only as ``fun(points, s)``.

    The vector field is obtained from fourth-order central differences
    of the closure, so accuracy bottoms out around ``fd_step**4``.
    """

    def __init__(self, fun: Callable[[np.ndarray, float], np.ndarray], mesh_kind: str, fd_step: float = 3e-4):
        self.fun = fun
        self.mesh_kind = mesh_kind
        self.fd_step = fd_step

    def value(self, pts: np.ndarray, s: float) -> np.ndarray:
        return self.fun(pts, s)

    def velocity(self, pts: np.ndarray, s: float) -> np.ndarray:
        n, dim = pts.shape
        h = self.fd_step
        offsets = np.array([-2.0, -1.0, 1.0, 2.0]) * h
        stack = np.repeat(pts[None, :, :], 4 * dim, axis=0)
        for axis in range(dim):
            for j, off in enumerate(offsets):
                stack[4 * axis + j, :, axis] += off
        vals = self.fun(stack.reshape(-1, dim), s).reshape(4 * dim, n)
        grad = np.empty((n, dim))
        for axis in range(dim):
            m2, m1, p1, p2 = vals[4 * axis: 4 * axis + 4]
            grad[:, axis] = (m2 - 8 * m1 + 8 * p1 - p2) / (12 * h)
        if self.mesh_kind == "torus":
            return np.column_stack([grad[:, 1], -grad[:, 0]])
        return FOUR_PI * np.cross(grad, pts)


class CocycleGenerator:
    """Time-dependent Hamiltonian generating a splitting composition.

    At parameter ``s`` the composition ``Psi_s`` of exact stage flows is
    generated by a sum with one term per stage: the first term is
    ``alpha_1 F``; every later stage contributes its Hamiltonian pulled
    back by the inverse flows of all earlier stages.  Values and vector
    fields are evaluated exactly (expression-backed fields, closed-form
    stage flows and their Jacobians), with no interpolation.
    """

    def __init__(self, scheme: SplittingScheme, f: ScalarField, g: ScalarField):
        if f.expr is None or g.expr is None:
            raise SymbolicRequiredError("the composition generator needs expression-backed fields")
        self.scheme = scheme
        self.f = f
        self.g = g
        self.mesh_kind = f.mesh.kind
        _, f_factory = recognize_flow(f)
        _, g_factory = recognize_flow(g)
        self.terms: list[tuple[float, ScalarField, Callable[[float], object]]] = []
        for alpha, beta in zip(scheme.alphas, scheme.betas):
            self.terms.append((alpha, f, f_factory))
            self.terms.append((beta, g, g_factory))

    def value(self, pts: np.ndarray, s: float) -> np.ndarray:
        total = np.zeros(pts.shape[0])
        current = pts
        last = len(self.terms) - 1
        for idx, (coef, fld, factory) in enumerate(self.terms):
            if coef == 0.0:
                continue
            total += coef * _value_fn(fld)(current)
            if idx < last and s != 0.0:
                current = factory(-coef * s).apply(current)
        return total

    def velocity(self, pts: np.ndarray, s: float) -> np.ndarray:
        n, dim = pts.shape
        total = np.zeros((n, dim))
        current = pts
        inv_jac = np.broadcast_to(np.eye(dim), (n, dim, dim)).copy()
        last = len(self.terms) - 1
        for idx, (coef, fld, factory) in enumerate(self.terms):
            if coef == 0.0:
                continue
            vel = _analytic_velocity(fld, current)
            total += coef * np.einsum("nij,nj->ni", inv_jac, vel)
            if idx < last and s != 0.0:
                step = factory(-coef * s)
                jinv = step.jacobian_inverse(current)
                if jinv.ndim == 2:
                    inv_jac = inv_jac @ jinv
                else:
                    inv_jac = np.einsum("nij,njk->nik", inv_jac, jinv)
                current = step.apply(current)
        return total


# ---------------------------------------------------------------------------
# Reference integration (classical one-step order 4 with step doubling)
# ---------------------------------------------------------------------------


def _rk4(ham, points: np.ndarray, t: float, nsteps: int) -> np.ndarray:
    pts = np.array(points, dtype=float)
    h = t / nsteps
    s = 0.0
    sphere = ham.mesh_kind == "sphere"
    for _ in range(nsteps):
        k1 = ham.velocity(pts, s)
        k2 = ham.velocity(pts + 0.5 * h * k1, s + 0.5 * h)
        k3 = ham.velocity(pts + 0.5 * h * k2, s + 0.5 * h)
        k4 = ham.velocity(pts + h * k3, s + h)
        pts = pts + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if sphere:
            pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        s += h
    if ham.mesh_kind == "torus":
        pts %= 1.0
    return pts


@dataclass
class ReferenceFlow:
    """Endpoint map of a calibrated reference integration."""

    ham: object
    t: float
    nsteps: int
    mesh_kind: str
    error_estimate: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = _rk4(self.ham, pts, self.t, self.nsteps)
        if np.ndim(points) == 1:
            return out[0]
        return out


def _coerce_hamiltonian(h) -> object:
    if isinstance(h, ScalarField):
        return StaticHamiltonian(h)
    if not hasattr(h, "velocity") or not hasattr(h, "mesh_kind"):
        raise TypeError("expected a ScalarField or a time-dependent Hamiltonian object")
    return h


def reference_flow(
    h,
    t: float,
    tol: float = 1e-12,
    probes: np.ndarray | None = None,
    min_steps: int = 16,
    max_steps: int = 1 << 17,
) -> ReferenceFlow:
    """Integrate the Hamiltonian vector field with step halving.

    The classical fourth-order one-step method is run with ``n`` and
    ``2n`` steps on a probe set until the endpoint gap is at most
    ``tol``; the observed gap is kept as the error estimate.

    Raises
    ------
    NoConvergenceError
        If the gap never reaches ``tol`` within the step budget.
    """
    ham = _coerce_hamiltonian(h)
    if probes is None:
        probes = default_probes(ham.mesh_kind, n=48, seed=777)
    n = min_steps
    prev = _rk4(ham, probes, t, n)
    while True:
        n *= 2
        cur = _rk4(ham, probes, t, n)
        gap = float(np.max(point_distances(ham.mesh_kind, cur, prev)))
        if gap <= tol:
            return ReferenceFlow(ham, t, n, ham.mesh_kind, gap)
        if n >= max_steps:
            raise NoConvergenceError(f"reference flow stuck at gap {gap:.3e} with {n} steps (tol {tol:.1e})")
        prev = cur


def reference_endpoints(
    f_plus_g: ScalarField,
    t_list: Sequence[float],
    probes: np.ndarray,
    tol: float = 1e-13,
) -> dict:
    """Reference endpoints of the flow of one field for each ``t``.

    Calibrates the step size once at the largest ``t`` and reuses it,
    so the per-``t`` error estimate scales linearly with ``t``.
    """
    ham = StaticHamiltonian(f_plus_g)
    t_max = max(t_list)
    ref = reference_flow(ham, t_max, tol=tol, probes=probes)
    out = {}
    for t in t_list:
        nsteps = max(16, int(math.ceil(ref.nsteps * t / t_max)))
        est = max(ref.error_estimate * (t / t_max), 1e-15)
        out[t] = (_rk4(ham, probes, t, nsteps), est)
    return out


# ---------------------------------------------------------------------------
# Cocycle Hamiltonian as a mesh field
# ---------------------------------------------------------------------------


def _interp_error_scale(fld: ScalarField) -> float:
    """Crude PL interpolation error proxy: a quarter of the max edge jump."""
    mesh = fld.mesh
    if mesh.kind == "torus":
        grid = mesh.grid_values(fld.values)
        jump = max(
            float(np.max(np.abs(grid - np.roll(grid, 1, axis=0)))),
            float(np.max(np.abs(grid - np.roll(grid, 1, axis=1)))),
        )
    else:
        e = mesh.edges()
        jump = float(np.max(np.abs(fld.values[e[:, 0]] - fld.values[e[:, 1]])))
    return 0.25 * jump


def cocycle_hamiltonian(scheme: SplittingScheme, f: ScalarField, g: ScalarField, t: float) -> ScalarField:
    """The generator of the scheme composition at time ``t``, on the mesh.

    Evaluates, at every mesh point, the stage sum ``alpha_1 F + beta_1 G
    o (stage-1 inverse flow) + ...`` where each stage's Hamiltonian is
    pulled back by the inverse exact flows of all earlier stages.  At
    ``t = 0`` this is exactly ``F + G``.

    Expression-backed fields are evaluated exactly at the transported
    points.  Fields without expressions fall back to mesh interpolation
    and emit :class:`InterpolationDominatesWarning` when the estimated
    interpolation error exceeds 1% of the result's magnitude.
    """
    mesh = f.mesh
    if not mesh.same_as(g.mesh):
        raise ValueError("fields live on different meshes")
    symbolic = f.expr is not None and g.expr is not None
    terms: list[tuple[float, ScalarField]] = []
    for alpha, beta in zip(scheme.alphas, scheme.betas):
        terms.append((alpha, f))
        terms.append((beta, g))
    total = np.zeros(mesh.n_points)
    current = mesh.points
    interp_budget = 0.0
    factories: dict[int, Callable[[float], object]] = {}
    for idx, (coef, fld) in enumerate(terms):
        if coef == 0.0:
            continue
        if fld.expr is not None:
            total += coef * _value_fn(fld)(current)
        else:
            total += coef * interpolate(fld, current)
            interp_budget += abs(coef) * _interp_error_scale(fld)
        if idx < len(terms) - 1 and t != 0.0:
            if id(fld) not in factories:
                try:
                    factories[id(fld)] = recognize_flow(fld)[1]
                except NotRecognizedError as err:
                    raise NotRecognizedError(
                        f"stage {idx} has no exact flow; the generator sum needs one per stage"
                    ) from err
            current = factories[id(fld)](-coef * t).apply(current)
    if interp_budget > 0.0:
        scale = float(np.max(np.abs(total)))
        if interp_budget > 0.01 * max(scale, 1e-30):
            warnings.warn(
                f"interpolation error estimate {interp_budget:.2e} exceeds 1% of the "
                f"generator magnitude {scale:.2e}",
                InterpolationDominatesWarning,
            )
    return ScalarField(mesh, total, None)


def remainder_norm(scheme: SplittingScheme, f: ScalarField, g: ScalarField, t: float, norm: str = "uniform") -> float:
    """Norm of the generator defect ``K(t) - (F + G)``."""
    k = cocycle_hamiltonian(scheme, f, g, t)
    defect = ScalarField(f.mesh, k.values - (f.values + g.values))
    return uniform_norm(defect) if norm == "uniform" else l1_norm(defect)


@dataclass
class RemainderSweep:
    """Dyadic sweep of the generator defect against the bracket-size bound."""

    generation: int
    q_n: float
    rows: list[dict]
    kappa_max: float
    exponent: float | None

    def to_dict(self) -> dict:
        return {
            "generation": self.generation,
            "q_n": self.q_n,
            "kappa_max": self.kappa_max,
            "exponent": self.exponent,
            "rows": self.rows,
        }


def remainder_ratio_sweep(
    scheme: SplittingScheme,
    f: ScalarField,
    g: ScalarField,
    t_list: Sequence[float] = None,
    norm: str = "uniform",
) -> RemainderSweep:
    """Sweep ``||K(t) - (F+G)||`` over ``t`` and compare with ``Q_N t^(N-1)``.

    ``N`` is the scheme's nominal order plus one, so the bound predicts
    a defect of order ``t**(N-1)``.  The ratio column estimates the
    bound's constant; the fitted exponent should not fall below N-1.

    Raises
    ------
    DegenerateInputError
        When the bracket-size functional vanishes (commuting pair).
    """
    from .scheme import DEFAULT_T_GRID

    if t_list is None:
        t_list = DEFAULT_T_GRID
    generation = scheme.nominal_order + 1
    qn = q_norm(generation, f, g, norm=norm)
    if qn == 0.0:
        raise DegenerateInputError("commuting pair: the bracket-size functional vanishes")
    rows = []
    for t in t_list:
        rem = remainder_norm(scheme, f, g, t, norm=norm)
        rows.append({"t": t, "remainder": rem, "ratio": rem / (qn * t ** (generation - 1))})
    usable = [(r["t"], r["remainder"]) for r in rows if r["remainder"] > 1e-14]
    exponent = None
    if len(usable) >= 3:
        log_t = np.log([u[0] for u in usable])
        log_r = np.log([u[1] for u in usable])
        exponent = float(np.polyfit(log_t, log_r, 1)[0])
    kappa = max(r["ratio"] for r in rows)
    return RemainderSweep(generation, qn, rows, kappa, exponent)


# ---------------------------------------------------------------------------
# Composition expansion in iterated brackets
# ---------------------------------------------------------------------------


@dataclass
class ExpansionTerm:
    """One term of the bracket expansion of ``A`` composed with stage flows."""

    powers: tuple[int, ...]
    coefficient: float
    t_power: int
    field: ScalarField


def composition_expansion(
    a: ScalarField,
    hs: Sequence[ScalarField],
    order_cap: int,
) -> list[ExpansionTerm]:
    """Expand ``A o h^(1)_t o ... o h^(n)_t`` in iterated brackets.

    Terms are indexed by powers ``(i_1, ..., i_n)`` with total degree at
    most ``order_cap - 1``; the term with powers ``(i_1, ..., i_n)`` has
    coefficient ``1/(i_1! ... i_n!)``, carries ``t**(i_1+...+i_n)``, and
    its field applies ``i_1`` brackets with ``H_1`` first, then ``i_2``
    with ``H_2``, and so on.  The discarded tail is ``O(t**order_cap)``.
    """
    n = len(hs)
    if not 1 <= n <= 4:
        raise OutOfRangeError(f"between 1 and 4 stage Hamiltonians supported, got {n}")
    if not 2 <= order_cap <= 6:
        raise OutOfRangeError(f"order cap must be in [2, 6], got {order_cap}")
    if a.expr is None or any(h.expr is None for h in hs):
        raise SymbolicRequiredError("the expansion needs expression-backed fields")
    memo: dict[tuple[int, ...], ScalarField] = {(0,) * n: a}

    def field_for(powers: tuple[int, ...]) -> ScalarField:
        if powers in memo:
            return memo[powers]
        j = max(k for k in range(n) if powers[k] > 0)
        prev = list(powers)
        prev[j] -= 1
        parent = field_for(tuple(prev))
        result = poisson(parent, hs[j])
        memo[powers] = result
        return result

    def multi_indices(total_max: int):
        def rec(prefix, remaining_slots, budget):
            if remaining_slots == 0:
                yield tuple(prefix)
                return
            for i in range(budget + 1):
                yield from rec(prefix + [i], remaining_slots - 1, budget - i)

        yield from rec([], n, total_max)

    terms = []
    for powers in sorted(multi_indices(order_cap - 1), key=lambda p: (sum(p), p)):
        coef = 1.0
        for i in powers:
            coef /= math.factorial(i)
        terms.append(ExpansionTerm(powers, coef, sum(powers), field_for(powers)))
    return terms


def expansion_partial_sum(terms: Sequence[ExpansionTerm], t: float) -> np.ndarray:
    """Evaluate the truncated expansion at time ``t`` on the mesh."""
    total = np.zeros_like(terms[0].field.values)
    for term in terms:
        total += term.coefficient * t**term.t_power * term.field.values
    return total


def expansion_lhs(a: ScalarField, hs: Sequence[ScalarField], t: float) -> np.ndarray:
    """Evaluate ``A o h^(1)_t o ... o h^(n)_t`` exactly at the mesh points."""
    pts = a.mesh.points
    for h in reversed(hs):
        pts = exact_flow(h, t).apply(pts)
    return a.expr.eval_at(pts)


# ---------------------------------------------------------------------------
# Flow equivalence orders
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceOrders:
    """Fitted exponents for map distance and generator distance."""

    flow_exponent: float
    hamiltonian_exponent: float
    rows: list[dict]

    @property
    def gap(self) -> float:
        return self.flow_exponent - self.hamiltonian_exponent


def flow_equivalence_order(
    u,
    v,
    mesh: Mesh,
    t_list: Sequence[float] = None,
    probes: np.ndarray | None = None,
    tol: float = 1e-12,
) -> EquivalenceOrders:
    """Fit how fast two time-dependent flows and their generators separate.

    For each ``t`` the two flows are reference-integrated over ``[0, t]``
    and the max endpoint distance recorded, together with the sup
    distance of the generators at parameter ``t`` over the mesh.  Both
    are fitted as powers of ``t``; if the generators differ at order
    ``t**(N-1)`` the maps differ at order ``t**N``, so the fitted gap
    should be 1.
    """
    from .scheme import DEFAULT_T_GRID

    if t_list is None:
        t_list = DEFAULT_T_GRID
    u = _coerce_hamiltonian(u)
    v = _coerce_hamiltonian(v)
    if probes is None:
        probes = default_probes(u.mesh_kind, n=64, seed=311)
    rows = []
    for t in t_list:
        end_u = reference_flow(u, t, tol=tol, probes=probes).apply(probes)
        end_v = reference_flow(v, t, tol=tol, probes=probes).apply(probes)
        flow_dist = float(np.max(point_distances(u.mesh_kind, end_u, end_v)))
        ham_dist = float(np.max(np.abs(u.value(mesh.points, t) - v.value(mesh.points, t))))
        rows.append({"t": t, "flow_distance": flow_dist, "hamiltonian_distance": ham_dist})

    def fit(key: str) -> float:
        pts = [(r["t"], r[key]) for r in rows if r[key] > 100.0 * tol]
        if len(pts) < 3:
            raise NoConvergenceError(f"too few usable points to fit {key}")
        log_t = np.log([p[0] for p in pts])
        log_d = np.log([p[1] for p in pts])
        return float(np.polyfit(log_t, log_d, 1)[0])

    return EquivalenceOrders(fit("flow_distance"), fit("hamiltonian_distance"), rows)
