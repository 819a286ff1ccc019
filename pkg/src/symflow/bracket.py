"""Poisson brackets and iterated-bracket size functionals.

Conventions (fixed once, validated by the flow-consistency tests):

* Torus, coordinates ``(q, p)``, area form ``dq ^ dp`` of total mass 1:
  ``{A, H} = dA/dq * dH/dp - dA/dp * dH/dq``.
* Unit sphere with the round measure normalised to total mass 1:
  ``{A, H}(x) = 4*pi * x . (grad A x grad H)`` with ambient gradients.
  The factor 4*pi compensates the normalisation of the area form.

Both satisfy ``d/dt (A o phi_H^t) = {A, H} o phi_H^t`` for the
Hamiltonian flow ``phi_H^t`` used in :mod:`symflow.flow`.

Iterated brackets are encoded as words over the letters ``F``/``G``
appended to the core bracket ``{F, G}``: the word ``(w_1, ..., w_k)``
denotes the left-nested monomial ``{...{{F, G}, w_1}, ..., w_k}``.  The
generation with k appended letters has ``2**k`` members.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .expr import Expression, Var
from .manifold import (
    MeshMismatchError,
    ScalarField,
    SphereTri,
    TorusGrid,
    l1_norm,
    uniform_norm,
)

__all__ = [
    "OutOfRangeError",
    "SymbolicRequiredError",
    "DegenerateInputError",
    "LieMonomial",
    "poisson",
    "enumerate_monomials",
    "eval_monomial",
    "q_norm",
    "khl_ratio",
]

FOUR_PI = 4.0 * np.pi

MAX_GENERATION = 8


class OutOfRangeError(ValueError):
    """Index outside the supported range."""


class SymbolicRequiredError(ValueError):
    """Deep iterated brackets need expression-backed fields.

    Numeric differencing loses roughly two digits per bracket level, so
    monomials with four or more bracket applications refuse the numeric
    path unless explicitly overridden.
    """


class DegenerateInputError(ValueError):
    """Input on which the requested quantity is undefined (e.g. a commuting pair)."""


# ---------------------------------------------------------------------------
# Poisson bracket
# ---------------------------------------------------------------------------


def _symbolic_torus(a: Expression, h: Expression) -> Expression:
    return a.diff("q") * h.diff("p") - a.diff("p") * h.diff("q")


def _symbolic_sphere(a: Expression, h: Expression) -> Expression:
    ax, ay, az = (a.diff(v) for v in ("x", "y", "z"))
    hx, hy, hz = (h.diff(v) for v in ("x", "y", "z"))
    x = Expression(Var("x"), a.variables)
    y = Expression(Var("y"), a.variables)
    z = Expression(Var("z"), a.variables)
    triple = x * (ay * hz - az * hy) + y * (az * hx - ax * hz) + z * (ax * hy - ay * hx)
    return FOUR_PI * triple


def _torus_partials(mesh: TorusGrid, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    grid = mesh.grid_values(values)
    dq = (np.roll(grid, -1, axis=0) - np.roll(grid, 1, axis=0)) * (mesh.n_q / 2.0)
    dp = (np.roll(grid, -1, axis=1) - np.roll(grid, 1, axis=1)) * (mesh.n_p / 2.0)
    return dq.ravel(), dp.ravel()


def _sphere_lsq_operator(mesh: SphereTri):
    """Per-vertex least-squares tangent gradient operator, cached on the mesh."""
    cached = getattr(mesh, "_lsq_grad_op", None)
    if cached is not None:
        return cached
    indptr, indices = mesh.neighbor_csr()
    degrees = np.diff(indptr)
    kmax = int(degrees.max())
    n = mesh.n_points
    nbr = np.zeros((n, kmax), dtype=np.int64)
    mask = np.zeros((n, kmax))
    for v in range(n):
        row = indices[indptr[v]:indptr[v + 1]]
        nbr[v, : len(row)] = row
        mask[v, : len(row)] = 1.0
    pts = mesh.points
    seed = np.where(np.abs(pts[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(pts, seed)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(pts, e1)
    d = (pts[nbr] - pts[:, None, :]) * mask[:, :, None]
    a = np.stack([np.einsum("nkc,nc->nk", d, e1), np.einsum("nkc,nc->nk", d, e2)], axis=2)
    pinv = np.linalg.pinv(a)  # (n, 2, kmax)
    op = (nbr, mask, pinv, e1, e2)
    mesh._lsq_grad_op = op  # type: ignore[attr-defined]
    return op


def _sphere_gradients(mesh: SphereTri, values: np.ndarray) -> np.ndarray:
    nbr, mask, pinv, e1, e2 = _sphere_lsq_operator(mesh)
    delta = (values[nbr] - values[:, None]) * mask
    coef = np.einsum("nik,nk->ni", pinv, delta)
    return coef[:, [0]] * e1 + coef[:, [1]] * e2


def poisson(a: ScalarField, h: ScalarField) -> ScalarField:
    """Poisson bracket ``{a, h}`` on the common mesh of the two fields.

    When both fields carry expressions the bracket is computed
    symbolically (exact partial derivatives, result carries an
    expression too).  Otherwise a second-order numeric scheme is used:
    central differences on the torus grid, least-squares tangent-plane
    gradients on the sphere.
    """
    if not a.mesh.same_as(h.mesh):
        raise MeshMismatchError("fields live on different meshes")
    mesh = a.mesh
    if a.expr is not None and h.expr is not None:
        expr = _symbolic_torus(a.expr, h.expr) if mesh.kind == "torus" else _symbolic_sphere(a.expr, h.expr)
        return ScalarField(mesh, expr.eval_at(mesh.points), expr)
    if mesh.kind == "torus":
        aq, ap = _torus_partials(mesh, a.values)
        hq, hp = _torus_partials(mesh, h.values)
        vals = aq * hp - ap * hq
    else:
        ga = _sphere_gradients(mesh, a.values)
        gh = _sphere_gradients(mesh, h.values)
        vals = FOUR_PI * np.einsum("nc,nc->n", mesh.points, np.cross(ga, gh))
    return ScalarField(mesh, vals, None)


# ---------------------------------------------------------------------------
# Iterated bracket monomials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LieMonomial:
    """Left-nested iterated bracket ``{...{{F, G}, w_1}, ..., w_k}``."""

    word: tuple[str, ...]

    def __post_init__(self):
        if any(letter not in ("F", "G") for letter in self.word):
            raise ValueError("word letters must be 'F' or 'G'")

    @property
    def bracket_count(self) -> int:
        return len(self.word) + 1

    @property
    def degree_in_g(self) -> int:
        return 1 + sum(1 for w in self.word if w == "G")

    @property
    def degree_in_f(self) -> int:
        return 1 + sum(1 for w in self.word if w == "F")

    def __str__(self) -> str:
        text = "{F,G}"
        for letter in self.word:
            text = "{" + text + "," + letter + "}"
        return text


def enumerate_monomials(generation: int) -> list[LieMonomial]:
    """All iterated-bracket monomials of a generation, in lexicographic order.

    Generation ``n`` holds the ``2**(n-1)`` left-nested monomials built
    from ``{F, G}`` by appending ``n - 1`` letters.
    """
    if not 1 <= generation <= MAX_GENERATION:
        raise OutOfRangeError(f"generation must be in [1, {MAX_GENERATION}], got {generation}")
    words = itertools.product("FG", repeat=generation - 1)
    return [LieMonomial(tuple(w)) for w in sorted(words)]


def eval_monomial(
    monomial: LieMonomial,
    f: ScalarField,
    g: ScalarField,
    allow_numeric: bool = False,
) -> ScalarField:
    """Evaluate a monomial by left-folding :func:`poisson`."""
    symbolic = f.expr is not None and g.expr is not None
    if monomial.bracket_count >= 4 and not symbolic and not allow_numeric:
        raise SymbolicRequiredError(
            f"monomial {monomial} applies {monomial.bracket_count} brackets; "
            "numeric differentiation is too lossy (pass allow_numeric=True to override)"
        )
    out = poisson(f, g)
    for letter in monomial.word:
        out = poisson(out, f if letter == "F" else g)
    return out


def q_norm(
    generation: int,
    f: ScalarField,
    g: ScalarField,
    norm: str = "uniform",
    allow_numeric: bool = False,
) -> float:
    """Size of the bracket generation below ``generation``.

    Sums, in lexicographic word order, the norms of all monomials with
    ``generation - 1`` bracket applications.  ``norm`` selects the
    mesh-max uniform norm or the mass-weighted L1 norm.
    """
    if not 2 <= generation <= MAX_GENERATION:
        raise OutOfRangeError(f"generation must be in [2, {MAX_GENERATION}], got {generation}")
    if norm not in ("uniform", "l1"):
        raise OutOfRangeError(f"norm must be 'uniform' or 'l1', got {norm!r}")
    measure = uniform_norm if norm == "uniform" else l1_norm
    total = 0.0
    for monomial in enumerate_monomials(generation - 1):
        total += measure(eval_monomial(monomial, f, g, allow_numeric=allow_numeric))
    return total


def khl_ratio(
    generation: int,
    f: ScalarField,
    g: ScalarField,
    norm: str = "uniform",
    allow_numeric: bool = False,
) -> float:
    """Ratio comparing ``||{F, G}||`` against the interpolation-type bound.

    Returns ``||{F,G}|| / (min(||F||, ||G||)^((n-2)/(n-1)) * Q_n^(1/(n-1)))``
    for ``n = generation``.  Raises :class:`DegenerateInputError` when the
    denominator vanishes.
    """
    measure = uniform_norm if norm == "uniform" else l1_norm
    num = measure(poisson(f, g))
    qn = q_norm(generation, f, g, norm=norm, allow_numeric=allow_numeric)
    small = min(measure(f), measure(g))
    exponent = (generation - 2) / (generation - 1)
    denom = small**exponent * qn ** (1.0 / (generation - 1))
    if denom == 0.0:
        raise DegenerateInputError("commuting or vanishing pair: bound denominator is zero")
    return num / denom
