"""Integrands f(x, s, z), growth certificates and theorem applicability.

An IntegrandSpec packages vectorized evaluators for the running cost
f(x, s, z) together with its partial derivatives in s and z; f(x, 0, 0) is
exposed separately because it is the per-point cost of including a point in
the domain.  Growth certificates declare the constants of coercivity and
continuity inequalities; they are never inferred, only falsified by seeded
sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from qshape.mesh import GridSpec, ScalarField, interpolate

Array = np.ndarray

# Conditions a certificate may claim.  COERCIVE is the p-growth lower bound
# c(|z|^p - alpha|s|^p - a(x)) <= f; COERCIVE_POSITIVE replaces a(x) by the
# constant -1 so that f(x,0,0) >= c > 0; SHIFT_LIPSCHITZ bounds
# |f(x,s,z)-f(x,t,z)| by K|s-t|(a(x)+|s|^q*+|t|^q*+|z|^p); TWO_SIDED is the
# sandwich c(|z|^p - b|s|^gamma - a) <= h <= C(|z|^p + b|s|^gamma + a) for
# the shifted integrand h(x,s,z) = f(x,s,z) - f(x,0,0)*[s == 0].
COERCIVE = "coercive"
COERCIVE_POSITIVE = "coercive-positive"
SHIFT_LIPSCHITZ = "shift-lipschitz"
TWO_SIDED = "two-sided"
CONDITION_IDS = (COERCIVE, COERCIVE_POSITIVE, SHIFT_LIPSCHITZ, TWO_SIDED)


class IntegrandError(ValueError):
    """Invalid integrand construction or certificate usage."""


@dataclass(frozen=True, eq=False)
class IntegrandSpec:
    """Vectorized integrand f(x, s, z) with derivatives and zero level.

    eval/d_s/d_z take x as (n, 2), s as (n,), z as (n, 2) and return (n,)
    resp. (n, 2) arrays.  zero_level(x) must equal eval(x, 0, 0) exactly.
    smooth_family, when present, maps a regularization width delta to an
    IntegrandSpec whose z-dependence is smooth near z = 0; companion_p2 is
    the exponent-2 version of the same data, used to warm-start solves.

    nodal_source marks a linear term -g(x) * s whose g is a nodal field:
    assemblers then integrate that term with the vertex rule instead of the
    centroid rule, so a field built as (energy gradient) / (node area) is
    exactly stationary for the assembled problem.  The pointwise evaluators
    still contain the term through linear interpolation of g.
    """

    p: float
    eval_fn: Callable[[Array, Array, Array], Array]
    d_s_fn: Callable[[Array, Array, Array], Array]
    d_z_fn: Callable[[Array, Array, Array], Array]
    zero_level_fn: Callable[[Array], Array]
    smooth_family: Optional[Callable[[float], "IntegrandSpec"]] = None
    companion_p2: Optional["IntegrandSpec"] = None
    nodal_source: Optional[ScalarField] = None
    label: str = "custom"

    def eval(self, x: Array, s: Array, z: Array) -> Array:
        return self.eval_fn(x, s, z)

    def d_s(self, x: Array, s: Array, z: Array) -> Array:
        return self.d_s_fn(x, s, z)

    def d_z(self, x: Array, s: Array, z: Array) -> Array:
        return self.d_z_fn(x, s, z)

    def zero_level(self, x: Array) -> Array:
        return self.zero_level_fn(x)

    def smoothed(self, delta: float) -> "IntegrandSpec":
        if self.smooth_family is None or delta == 0.0:
            return self
        return self.smooth_family(delta)


def as_coefficient(g, grid: Optional[GridSpec] = None) -> Callable[[Array], Array]:
    """Turn a constant, callable or ScalarField into a vectorized x -> value map.

    Fields are interpolated piecewise-linearly on their own triangulation, so
    that evaluation at a triangle centroid returns the vertex mean.
    """
    if isinstance(g, ScalarField):
        return lambda x: interpolate(g, x)
    if callable(g):
        return lambda x: np.broadcast_to(np.asarray(g(x), dtype=float), (len(x),)).copy()
    c = float(g)
    return lambda x: np.full(len(x), c)


def _znorm(z: Array) -> Array:
    return np.hypot(z[:, 0], z[:, 1])


def _power_term(p: float, delta: float):
    """Evaluator/derivative pair for (1/p)*(|z|^2 + delta^2)^(p/2) - delta^p/p.

    delta = 0 gives the exact (1/p)|z|^p with the subgradient choice
    d_z = 0 at z = 0 (the limit for every p > 1).
    """
    if delta == 0.0:

        def val(z):
            return _znorm(z) ** p / p

        def dz(z):
            r = _znorm(z)
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(r > 0.0, r ** (p - 2.0), 0.0)
            return z * w[:, None]

        return val, dz

    d2 = delta * delta
    shift = delta**p / p

    def val(z):
        r2 = z[:, 0] ** 2 + z[:, 1] ** 2
        return (r2 + d2) ** (p / 2.0) / p - shift

    def dz(z):
        r2 = z[:, 0] ** 2 + z[:, 1] ** 2
        w = (r2 + d2) ** (p / 2.0 - 1.0)
        return z * w[:, None]

    return val, dz


def dirichlet_energy(p: float, g, lam, grid: Optional[GridSpec] = None) -> IntegrandSpec:
    """Integrand f(x,s,z) = (1/p)|z|^p - g(x) s + lam(x).

    g is the linear source (a field, constant or callable); lam >= 0 is the
    per-point cost of occupied volume, so zero_level = lam.  Negative lam is
    rejected: the construction needs a nonnegative zero-state cost.
    """
    if p <= 1.0:
        raise IntegrandError(f"exponent must exceed 1, got {p}")
    g_of = as_coefficient(g, grid)
    lam_of = as_coefficient(lam, grid)
    _check_nonnegative_lam(lam, lam_of, grid)
    g_field = g if isinstance(g, ScalarField) else None
    return _dirichlet_spec(float(p), g_of, lam_of, delta=0.0, g_field=g_field)


def _check_nonnegative_lam(lam, lam_of, grid) -> None:
    if isinstance(lam, ScalarField):
        if float(lam.values.min()) < 0.0:
            raise IntegrandError("volume multiplier lam must be nonnegative")
        return
    if np.isscalar(lam) or isinstance(lam, (int, float)):
        if float(lam) < 0.0:
            raise IntegrandError("volume multiplier lam must be nonnegative")
        return
    if grid is not None:
        X, Y = grid.node_coords()
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        if float(lam_of(pts).min()) < 0.0:
            raise IntegrandError("volume multiplier lam must be nonnegative")


def _dirichlet_spec(p: float, g_of, lam_of, delta: float, g_field=None) -> IntegrandSpec:
    pv, pdz = _power_term(p, delta)

    def ev(x, s, z):
        return pv(z) - g_of(x) * s + lam_of(x)

    def ds(x, s, z):
        return -g_of(x)

    def dz(x, s, z):
        return pdz(z)

    def zl(x):
        return lam_of(x)

    family = None
    companion = None
    if p != 2.0:
        family = lambda d: _dirichlet_spec(p, g_of, lam_of, delta=d, g_field=g_field)  # noqa: E731
        companion = _dirichlet_spec(2.0, g_of, lam_of, delta=0.0, g_field=g_field)
    return IntegrandSpec(
        p=p,
        eval_fn=ev,
        d_s_fn=ds,
        d_z_fn=dz,
        zero_level_fn=zl,
        smooth_family=family,
        companion_p2=companion,
        nodal_source=g_field,
        label=f"dirichlet(p={p:g})",
    )


def sobolev_exponent(p: float, d: int) -> float:
    """Critical exponent d*p/(d-p); +inf for p >= d."""
    if p <= 1.0 or d < 1:
        raise IntegrandError(f"need p > 1 and d >= 1, got p={p}, d={d}")
    if p >= d:
        return math.inf
    return d * p / (d - p)


def regularity_exponents_ok(p: float, d: int, gamma: float, sigma: float, q: float) -> bool:
    """Exponent arithmetic for the two-sided growth condition.

    True iff p <= gamma < p*, sigma > d/p and q > p*/(p* - gamma), where the
    +inf Sobolev exponent uses the limit convention p*/(p* - gamma) -> 1.
    """
    p_star = sobolev_exponent(p, d)
    if not (p <= gamma < p_star):
        return False
    if not (sigma > d / p):
        return False
    q_floor = 1.0 if math.isinf(p_star) else p_star / (p_star - gamma)
    return q > q_floor


@dataclass(frozen=True, eq=False)
class GrowthCertificate:
    """User-declared constants for the growth inequalities of an integrand.

    a doubles as the zero-order profile of the coercivity bound, the additive
    term of the shift-Lipschitz bound and the g-slot of the two-sided bound.
    s_power_bound optionally replaces |s|^(p*) in the shift-Lipschitz bound
    when p >= d (p* infinite); it must be a vectorized s -> value map.
    """

    c: float = 1.0
    alpha: float = 0.0
    C_upper: float = 1.0
    a: object = 1.0  # ScalarField | constant | callable
    b: object = 1.0
    gamma: float = 2.0
    sigma: float = 2.0
    q: float = 2.0
    K: float = 1.0
    claims: tuple = ()
    s_power_bound: Optional[Callable[[Array], Array]] = None


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    witness: Optional[tuple] = None  # violating (x, s, z) or (x, s, t, z)
    margin: float = 0.0


def _sample_points(grid: GridSpec, rng: np.random.Generator, n: int) -> Array:
    ox, oy = grid.origin
    ex, ey = grid.extent
    pts = rng.random((n, 2))
    pts[:, 0] = ox + ex * pts[:, 0]
    pts[:, 1] = oy + ey * pts[:, 1]
    return pts


def check_condition(
    spec: IntegrandSpec,
    cert: GrowthCertificate,
    which: str,
    grid: GridSpec,
    samples: int = 10_000,
    seed: int = 0,
    s_box: float = 100.0,
    z_box: float = 100.0,
    d: int = 2,
) -> CheckResult:
    """Seeded randomized falsification of a claimed growth inequality.

    Deterministic for a given seed.  A failure reports the first violating
    sample in draw order; crafted corner samples (s = 0, z = 0, and both)
    are always checked first since the inequalities are tightest there.
    """
    if which not in CONDITION_IDS:
        raise IntegrandError(f"unknown condition id {which!r}; expected one of {CONDITION_IDS}")
    rng = np.random.Generator(np.random.Philox(seed))
    n = int(samples)
    x = _sample_points(grid, rng, n)
    s = (2.0 * rng.random(n) - 1.0) * s_box
    z = (2.0 * rng.random((n, 2)) - 1.0) * z_box
    t = (2.0 * rng.random(n) - 1.0) * s_box
    # corner cases up front
    k = min(64, n)
    s[:k] = 0.0
    z[k : 2 * k] = 0.0
    s[2 * k : 3 * k] = 0.0
    z[2 * k : 3 * k] = 0.0

    a_of = as_coefficient(cert.a, grid)
    b_of = as_coefficient(cert.b, grid)
    zp = _znorm(z) ** spec.p
    sp = np.abs(s) ** spec.p
    tol = 1e-12

    if which == COERCIVE:
        lhs = cert.c * (zp - cert.alpha * sp - a_of(x))
        rhs = spec.eval(x, s, z)
        bad = lhs > rhs + tol
        return _verdict(bad, rhs - lhs, x, s, z)

    if which == COERCIVE_POSITIVE:
        lhs = cert.c * (zp - cert.alpha * sp + 1.0)
        rhs = spec.eval(x, s, z)
        bad = lhs > rhs + tol
        return _verdict(bad, rhs - lhs, x, s, z)

    if which == SHIFT_LIPSCHITZ:
        if cert.s_power_bound is not None:
            pow_of = cert.s_power_bound
        else:
            p_star = sobolev_exponent(spec.p, d)
            if math.isinf(p_star):
                raise IntegrandError(
                    "shift-lipschitz check needs s_power_bound when the Sobolev "
                    "exponent is infinite"
                )
            pow_of = lambda s_: np.abs(s_) ** p_star  # noqa: E731
        lhs = np.abs(spec.eval(x, s, z) - spec.eval(x, t, z))
        rhs = cert.K * np.abs(s - t) * (a_of(x) + pow_of(s) + pow_of(t) + zp)
        bad = lhs > rhs + tol
        if not np.any(bad):
            return CheckResult(True, None, float(np.min(rhs - lhs)))
        i = int(np.argmax(bad))
        return CheckResult(False, (tuple(x[i]), float(s[i]), float(t[i]), tuple(z[i])), float((rhs - lhs)[i]))

    # TWO_SIDED, applied to the shifted integrand h = f - f(x,0,0)*[s==0]
    h = spec.eval(x, s, z) - spec.zero_level(x) * (s == 0.0)
    sg = np.abs(s) ** cert.gamma
    env = b_of(x) * sg + a_of(x)
    low = cert.c * (zp - env)
    high = cert.C_upper * (zp + env)
    bad = (low > h + tol) | (h > high + tol)
    return _verdict(bad, np.minimum(h - low, high - h), x, s, z)


def _verdict(bad: Array, margin: Array, x: Array, s: Array, z: Array) -> CheckResult:
    if not np.any(bad):
        return CheckResult(True, None, float(np.min(margin)))
    i = int(np.argmax(bad))
    return CheckResult(False, (tuple(x[i]), float(s[i]), tuple(z[i])), float(margin[i]))


@dataclass(frozen=True)
class TheoremApplicability:
    """Which structural conclusions the declared certificate supports."""

    existence: bool
    openness: bool
    finite_perimeter: bool
    reasons: tuple


def applicable_theorems(
    spec: IntegrandSpec,
    cert: GrowthCertificate,
    lambda1_hat: float,
    grid: GridSpec,
    samples: int = 4000,
    seed: int = 0,
    d: int = 2,
) -> TheoremApplicability:
    """Classify the problem: existence of an optimal domain, openness of the
    optimum, finite perimeter of the optimum.

    existence needs the coercivity bound (either form) with alpha below the
    first eigenvalue estimate, plus nonnegative zero level; openness
    additionally needs the two-sided bound with admissible exponents;
    finite perimeter needs the positive coercivity and shift-Lipschitz
    bounds.  Each flag implies existence by construction.
    """
    reasons = []

    alpha_ok = cert.alpha < lambda1_hat
    if not alpha_ok:
        reasons.append(
            f"alpha={cert.alpha:g} does not sit below the eigenvalue estimate {lambda1_hat:g}"
        )

    def run(which):
        return check_condition(spec, cert, which, grid, samples=samples, seed=seed, d=d)

    coercive_ok = False
    if COERCIVE in cert.claims and alpha_ok:
        r = run(COERCIVE)
        coercive_ok = r.passed
        if not r.passed:
            reasons.append(f"coercive bound falsified at {r.witness}")

    coercive_pos_ok = False
    if COERCIVE_POSITIVE in cert.claims and alpha_ok:
        r = run(COERCIVE_POSITIVE)
        coercive_pos_ok = r.passed
        if not r.passed:
            reasons.append(f"coercive-positive bound falsified at {r.witness}")

    # nonnegative zero level (sampled)
    rng = np.random.Generator(np.random.Philox(seed + 1))
    pts = _sample_points(grid, rng, min(samples, 2000))
    zl = spec.zero_level(pts)
    zero_ok = bool(np.all(zl >= -1e-12))
    if not zero_ok:
        i = int(np.argmin(zl))
        reasons.append(f"zero level f(x,0,0) negative at x={tuple(pts[i])}")

    existence = (coercive_ok or coercive_pos_ok) and zero_ok
    if existence:
        reasons.append("existence hypotheses verified on samples")

    openness = False
    if existence and TWO_SIDED in cert.claims:
        expo = regularity_exponents_ok(spec.p, d, cert.gamma, cert.sigma, cert.q)
        if not expo:
            reasons.append(
                f"exponents (gamma={cert.gamma:g}, sigma={cert.sigma:g}, q={cert.q:g}) "
                "fail the regularity arithmetic"
            )
        else:
            r = run(TWO_SIDED)
            if r.passed:
                openness = True
                reasons.append("two-sided growth verified: optimum is open")
            else:
                reasons.append(f"two-sided bound falsified at {r.witness}")

    finite_perimeter = False
    if coercive_pos_ok and zero_ok and SHIFT_LIPSCHITZ in cert.claims:
        r = run(SHIFT_LIPSCHITZ)
        if r.passed:
            finite_perimeter = True
            reasons.append("positive coercivity and shift-Lipschitz verified: finite perimeter")
        else:
            reasons.append(f"shift-Lipschitz bound falsified at {r.witness}")
    elif SHIFT_LIPSCHITZ in cert.claims and not coercive_pos_ok:
        reasons.append("finite perimeter needs the coercive-positive bound")

    # flags never outrun existence
    openness = openness and existence
    finite_perimeter = finite_perimeter and existence
    return TheoremApplicability(
        existence=existence,
        openness=openness,
        finite_perimeter=finite_perimeter,
        reasons=tuple(reasons),
    )


# ---------------------------------------------------------------------------
# Tiny expression grammar for config-driven coefficients: numbers, x, y,
# + - * / ^, unary minus, sin cos exp abs, parentheses.


class ExpressionError(ValueError):
    pass


_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}


def _tokenize(text: str):
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "+-*/^()":
            tokens.append(ch)
            i += 1
        elif ch.isdigit() or ch == ".":
            j = i
            while j < len(text) and (text[j].isdigit() or text[j] in ".eE" or
                                     (text[j] in "+-" and text[j - 1] in "eE")):
                j += 1
            tokens.append(float(text[i:j]))
            i = j
        elif ch.isalpha():
            j = i
            while j < len(text) and text[j].isalpha():
                j += 1
            tokens.append(text[i:j])
            i = j
        else:
            raise ExpressionError(f"unexpected character {ch!r} in expression")
    return tokens


def parse_expression(text: str) -> Callable[[Array], Array]:
    """Compile an expression in x, y to a vectorized points -> values map."""
    tokens = _tokenize(text)
    pos = [0]

    def peek():
        return tokens[pos[0]] if pos[0] < len(tokens) else None

    def take():
        tok = peek()
        pos[0] += 1
        return tok

    def atom():
        tok = take()
        if isinstance(tok, float):
            return lambda X, Y: np.full_like(X, tok)
        if tok == "(":
            node = expr()
            if take() != ")":
                raise ExpressionError("missing closing parenthesis")
            return node
        if tok == "-":
            inner = atom()
            return lambda X, Y: -inner(X, Y)
        if tok == "+":
            return atom()
        if tok == "x":
            return lambda X, Y: X
        if tok == "y":
            return lambda X, Y: Y
        if tok in _FUNCS:
            fn = _FUNCS[tok]
            if take() != "(":
                raise ExpressionError(f"{tok} needs parentheses")
            inner = expr()
            if take() != ")":
                raise ExpressionError("missing closing parenthesis")
            return lambda X, Y: fn(inner(X, Y))
        raise ExpressionError(f"unexpected token {tok!r}")

    def power():
        base = atom()
        if peek() == "^":
            take()
            exponent = power()  # right associative
            return lambda X, Y: base(X, Y) ** exponent(X, Y)
        return base

    def term():
        node = power()
        while peek() in ("*", "/"):
            op = take()
            rhs = power()
            if op == "*":
                node = (lambda a, b: lambda X, Y: a(X, Y) * b(X, Y))(node, rhs)
            else:
                node = (lambda a, b: lambda X, Y: a(X, Y) / b(X, Y))(node, rhs)
        return node

    def expr():
        node = term()
        while peek() in ("+", "-"):
            op = take()
            rhs = term()
            if op == "+":
                node = (lambda a, b: lambda X, Y: a(X, Y) + b(X, Y))(node, rhs)
            else:
                node = (lambda a, b: lambda X, Y: a(X, Y) - b(X, Y))(node, rhs)
        return node

    root = expr()
    if pos[0] != len(tokens):
        raise ExpressionError(f"trailing tokens after position {pos[0]}")

    def evaluate(points: Array) -> Array:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(root(pts[:, 0], pts[:, 1]), dtype=float)

    return evaluate
