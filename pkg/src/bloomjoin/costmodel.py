"""Two-phase execution-time model and the optimal false-positive rate.

Filter-build time is linear in the filter size::

    bloom(m) = K1 * m + K2

and, because ``m = n * 1.44 * log2(1/eps)``, it becomes in error-rate space::

    bloom(eps) = C0 + C1 * ln(1/eps),   C1 = K1 * n * 1.44 / ln 2,   C0 = K2

Filter-and-join time is::

    join(eps) = L1 + L2 * eps + P(eps) * ln P(eps),   P(eps) = A * eps + B

The total is minimised where ``A ln(A eps + B) + A + L2 - C1/eps = 0``;
there is no closed form, so the root is found with Newton's method inside
a bisection bracket.  Logarithms are natural throughout.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bloom import BITS_PER_KEY_FACTOR
from .errors import DomainError, InvalidArgumentError, UnderdeterminedError

__all__ = [
    "EPS_MIN",
    "BloomTimeModel",
    "BloomTimeModelEps",
    "JoinTimeModel",
    "OptimalEpsilon",
    "eval_bloom_model",
    "eval_join_model",
    "model_total",
    "total_derivative",
    "second_derivative",
    "fit_bloom_model",
    "fit_join_model",
    "solve_optimal_epsilon",
    "to_eps_space",
    "bisect_root",
    "models_to_json",
    "models_from_json",
]

EPS_MIN = 1e-6
_SIZE_FACTOR = BITS_PER_KEY_FACTOR / math.log(2)  # bits per key per unit ln(1/eps)


@dataclass(frozen=True)
class BloomTimeModel:
    """``time = k1 * m_bits + k2`` (seconds)."""

    k1: float
    k2: float
    rms: float = 0.0
    clamped: bool = False

    def __call__(self, m_bits):
        return self.k1 * np.asarray(m_bits, dtype=float) + self.k2


@dataclass(frozen=True)
class BloomTimeModelEps:
    """``time = c0 + c1 * ln(1/eps)`` (seconds)."""

    c0: float
    c1: float

    def __post_init__(self):
        if self.c1 < 0:
            raise InvalidArgumentError(f"c1 must be >= 0, got {self.c1}")


@dataclass(frozen=True)
class JoinTimeModel:
    """``time = l1 + l2*eps + (a*eps + b) * ln(a*eps + b)`` (seconds)."""

    l1: float
    l2: float
    a: float
    b: float
    rms: float = 0.0
    converged: bool = True

    def poly(self, eps):
        return self.a * eps + self.b


@dataclass(frozen=True)
class OptimalEpsilon:
    epsilon_star: float
    iterations: int
    residual: float
    method: str  # "newton" | "bisection" | "boundary"
    warning: str | None = None


def _check_eps(eps) -> np.ndarray:
    e = np.asarray(eps, dtype=float)
    if np.any(~(e > 0)) or np.any(e > 1):
        raise DomainError(f"epsilon must be in (0, 1], got {eps!r}")
    return e


def _scalar(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


def to_eps_space(model: BloomTimeModel, n_expected: float) -> BloomTimeModelEps:
    """Exact reparameterisation of the size-space model for ``n_expected`` keys."""
    return BloomTimeModelEps(c0=model.k2, c1=max(0.0, model.k1) * n_expected * _SIZE_FACTOR)


def filter_bits(n_expected: float, eps) -> np.ndarray:
    """Continuous filter size ``n * 1.44 * log2(1/eps)`` (no ceiling)."""
    return n_expected * BITS_PER_KEY_FACTOR * np.log2(1.0 / np.asarray(eps, dtype=float))


def eval_bloom_model(model: BloomTimeModelEps, eps):
    e = _check_eps(eps)
    return _scalar(model.c0 + model.c1 * np.log(1.0 / e))


def eval_join_model(model: JoinTimeModel, eps):
    e = _check_eps(eps)
    p = model.poly(e)
    if np.any(p <= 0):
        raise DomainError(f"a*eps + b must be positive (a={model.a}, b={model.b})")
    return _scalar(model.l1 + model.l2 * e + p * np.log(p))


def model_total(eps, bloom: BloomTimeModelEps, join: JoinTimeModel):
    return eval_bloom_model(bloom, eps) + eval_join_model(join, eps)


def total_derivative(eps, bloom: BloomTimeModelEps, join: JoinTimeModel):
    """``A ln(A eps + B) + A + L2 - C1/eps``."""
    e = _check_eps(eps)
    p = join.poly(e)
    if np.any(p <= 0):
        raise DomainError(f"a*eps + b must be positive (a={join.a}, b={join.b})")
    return _scalar(join.a * np.log(p) + join.a + join.l2 - bloom.c1 / e)


def second_derivative(eps, bloom: BloomTimeModelEps, join: JoinTimeModel):
    e = _check_eps(eps)
    return _scalar(join.a ** 2 / join.poly(e) + bloom.c1 / e ** 2)


def _derivative_scale(eps: float, bloom: BloomTimeModelEps, join: JoinTimeModel) -> float:
    """Magnitude of the terms summed in the derivative (for relative tolerances)."""
    return (abs(join.a * math.log(join.poly(eps))) + abs(join.a) + abs(join.l2)
            + bloom.c1 / eps)


# -- fitting -------------------------------------------------------------------

def fit_bloom_model(obs: Sequence[tuple[float, float]]) -> BloomTimeModel:
    """Ordinary least squares of ``seconds = k1 * m_bits + k2``.

    A negative slope is clamped to zero (refitting the intercept as the mean)
    and reported through ``clamped`` and a ``RuntimeWarning``.
    """
    data = np.asarray(obs, dtype=float).reshape(-1, 2)
    m, t = data[:, 0], data[:, 1]
    if len(np.unique(m)) < 2:
        raise UnderdeterminedError(
            f"bloom model needs >= 2 distinct filter sizes, got {len(np.unique(m))}"
        )
    # Centering keeps the normal equations well conditioned for m ~ 1e9.
    mc = m - m.mean()
    k1 = float(np.dot(mc, t - t.mean()) / np.dot(mc, mc))
    clamped = k1 < 0
    if clamped:
        warnings.warn(f"negative bloom slope {k1:.3g} clamped to 0", RuntimeWarning, stacklevel=2)
        k1 = 0.0
    k2 = float(t.mean() - k1 * m.mean())
    rms = float(np.sqrt(np.mean((k1 * m + k2 - t) ** 2)))
    return BloomTimeModel(k1, k2, rms, clamped)


def _curvature_term(a: float, b: float, eps: np.ndarray) -> np.ndarray:
    p = a * eps + b
    return p * np.log(p)


def _inner_solve(a: float, b: float, eps: np.ndarray, t: np.ndarray):
    """Best ``(l1, l2)`` for fixed ``(a, b)`` and the residual vector."""
    y = t - _curvature_term(a, b, eps)
    design = np.column_stack([np.ones_like(eps), eps])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef, y - design @ coef


def _feasible(a: float, b: float) -> bool:
    return b > 0 and a + b > 0


class _VarPro:
    """Variable-projection objective over ``(a, u = ln b)``."""

    def __init__(self, eps: np.ndarray, t: np.ndarray):
        self.eps, self.t = eps, t
        self.evals = 0

    def residual(self, a: float, u: float) -> np.ndarray | None:
        if not -700.0 < u < 700.0:
            return None
        b = math.exp(u)
        if not (math.isfinite(b) and _feasible(a, b)):
            return None
        self.evals += 1
        _, r = _inner_solve(a, b, self.eps, self.t)
        return r if np.all(np.isfinite(r)) else None

    def cost(self, a: float, u: float) -> float:
        r = self.residual(a, u)
        return math.inf if r is None else _sumsq(r)


def _sumsq(r: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        return float(r @ r)


def _line_search(f, x0: float, step: float, fx0: float, iters: int = 40) -> tuple[float, float]:
    """Expand then golden-section along one coordinate."""
    best_x, best_f = x0, fx0
    for direction in (1.0, -1.0):
        s = step * direction
        x, fx = x0 + s, f(x0 + s)
        if fx >= best_f:
            continue
        prev = x0
        nx = x + s
        for _ in range(60):
            nx = x + s
            nf = f(nx)
            if nf >= fx:
                break
            prev, x, fx = x, nx, nf
            s *= 2.0
        lo, hi = min(prev, nx), max(prev, nx)
        gr = (math.sqrt(5) - 1) / 2
        c, d = hi - gr * (hi - lo), lo + gr * (hi - lo)
        fc, fd = f(c), f(d)
        for _ in range(iters):
            if fc < fd:
                hi, d, fd = d, c, fc
                c = hi - gr * (hi - lo)
                fc = f(c)
            else:
                lo, c, fc = c, d, fd
                d = lo + gr * (hi - lo)
                fd = f(d)
        for cand, fcand in ((x, fx), (c, fc), (d, fd)):
            if fcand < best_f:
                best_x, best_f = cand, fcand
        break
    return best_x, best_f


def _gauss_newton(obj: _VarPro, a: float, u: float, iters: int = 200) -> tuple[float, float, float]:
    """Levenberg-damped Gauss-Newton on the projected residual."""
    r = obj.residual(a, u)
    cost = _sumsq(r)
    lam = 1e-3
    for _ in range(iters):
        ha = 1e-6 * max(1.0, abs(a))
        hu = 1e-6
        ra_p, ra_m = obj.residual(a + ha, u), obj.residual(a - ha, u)
        ru_p, ru_m = obj.residual(a, u + hu), obj.residual(a, u - hu)
        if any(x is None for x in (ra_p, ra_m, ru_p, ru_m)):
            break
        with np.errstate(over="ignore", invalid="ignore"):
            jac = np.column_stack([(ra_p - ra_m) / (2 * ha), (ru_p - ru_m) / (2 * hu)])
            jtj = jac.T @ jac
            g = jac.T @ r
        # Near the edge of the feasible region the Jacobian can blow up; stop there.
        if not (np.all(np.isfinite(jtj)) and np.all(np.isfinite(g))
                and np.max(np.abs(jtj)) < 1e300):
            break
        prev = cost
        improved = False
        while lam < 1e12:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-300), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if not np.all(np.isfinite(step)):
                lam *= 10
                continue
            na, nu = a + step[0], u + step[1]
            nr = obj.residual(na, nu)
            ncost = math.inf if nr is None else _sumsq(nr)
            if ncost < cost:
                a, u, r, cost = na, nu, nr, ncost
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or abs(prev - cost) <= 1e-15 * max(prev, 1e-300):
            break
    return a, u, cost


def fit_join_model(obs: Sequence[tuple[float, float]], seed: int = 0,
                   starts: int = 12, max_rounds: int = 60) -> JoinTimeModel:
    """Least-squares fit of ``(l1, l2, a, b)`` to ``(epsilon, seconds)`` pairs.

    For fixed ``(a, b)`` the model is linear in ``(l1, l2)``, which are solved
    exactly; ``(a, ln b)`` are searched by seeded multi-start coordinate
    descent and polished with damped Gauss-Newton.  When a purely linear
    model (``a = 0``) fits as well as the best curved one it is preferred,
    reported with ``b = 1`` so the constant folds into ``l1``.
    """
    data = np.asarray(obs, dtype=float).reshape(-1, 2)
    eps, t = data[:, 0], data[:, 1]
    n_levels = len(np.unique(eps))
    if len(data) < 4 or n_levels < 4:
        raise UnderdeterminedError(
            f"join model needs >= 4 observations at >= 4 distinct epsilons, "
            f"got {len(data)} observations at {n_levels}"
        )
    _check_eps(eps)
    obj = _VarPro(eps, t)
    rng = np.random.default_rng(seed)
    scale = max(float(np.ptp(t)), float(np.mean(np.abs(t))), 1e-300)

    # Linear candidate: a = 0, b = 1.
    (l1_0, l2_0), r0 = _inner_solve(0.0, 1.0, eps, t)
    lin_cost = float(r0 @ r0)

    seeds = [(0.0, 0.0)]
    for _ in range(starts - 1):
        u = rng.uniform(-2.0, 12.0)
        a = math.exp(u) * rng.uniform(-0.9, 30.0)
        seeds.append((a, u))

    best = (math.inf, 0.0, 0.0)
    converged = True
    for a, u in seeds:
        cost = obj.cost(a, u)
        if not math.isfinite(cost):
            continue
        step_a = max(1.0, abs(a)) * 0.5
        step_u = 0.5
        for _ in range(max_rounds):
            before = cost
            a, cost = _line_search(lambda x: obj.cost(x, u), a, step_a, cost)
            u, cost = _line_search(lambda x: obj.cost(a, x), u, step_u, cost)
            if before - cost <= 1e-10 * before:
                break
        else:
            converged = False
        a, u, cost = _gauss_newton(obj, a, u)
        if cost < best[0]:
            best = (cost, a, u)

    cost, a, u = best
    if lin_cost <= cost * (1 + 1e-9) + (1e-12 * scale) ** 2 * len(t):
        model = JoinTimeModel(float(l1_0), float(l2_0), 0.0, 1.0,
                              float(math.sqrt(lin_cost / len(t))), True)
    else:
        b = math.exp(u)
        (l1, l2), r = _inner_solve(a, b, eps, t)
        model = JoinTimeModel(float(l1), float(l2), float(a), float(b),
                              float(np.sqrt(np.mean(r ** 2))), converged)
    if not model.converged:
        warnings.warn("join model search hit its iteration cap; returning best found",
                      RuntimeWarning, stacklevel=2)
    return model


# -- optimisation --------------------------------------------------------------

def bisect_root(f, lo: float, hi: float, xtol: float = 1e-15, maxiter: int = 400) -> float:
    """Plain bisection for a sign change of ``f`` on ``[lo, hi]``."""
    flo = f(lo)
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= xtol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def solve_optimal_epsilon(bloom: BloomTimeModelEps, join: JoinTimeModel, tol: float = 1e-12,
                          eps_min: float = EPS_MIN, max_iter: int = 100) -> OptimalEpsilon:
    """Minimise ``model_total`` over ``[eps_min, 1]``.

    Without a sign change of the derivative the cheaper boundary is returned
    (``method="boundary"``).  Otherwise Newton iterates from the bracket
    midpoint and falls back to bisection whenever a step leaves the bracket.
    ``tol`` is relative to the magnitude of the derivative's terms.  The
    method is ``"newton"`` when the derivative tolerance is met and
    ``"bisection"`` when the bracket collapses first.
    """
    if not (0 < eps_min < 1):
        raise InvalidArgumentError(f"eps_min must be in (0, 1), got {eps_min}")
    if not (_feasible(join.a, join.b) and join.a * eps_min + join.b > 0):
        raise InvalidArgumentError(f"join model needs b > 0 and a + b > 0 (a={join.a}, b={join.b})")
    for v in (bloom.c0, bloom.c1, join.l1, join.l2, join.a, join.b):
        if not math.isfinite(v):
            raise InvalidArgumentError("model parameters must be finite")

    def f(x):
        return total_derivative(x, bloom, join)

    lo, hi = eps_min, 1.0
    f_lo, f_hi = f(lo), f(hi)
    if (f_lo < 0) == (f_hi < 0):
        x = lo if model_total(lo, bloom, join) <= model_total(hi, bloom, join) else hi
        return OptimalEpsilon(x, 0, abs(f(x)), "boundary",
                              "derivative does not change sign on the bracket; minimum at a boundary")

    rising = f_lo < 0
    x = 0.5 * (lo + hi)
    for it in range(1, max_iter + 1):
        fx = f(x)
        if abs(fx) <= tol * _derivative_scale(x, bloom, join):
            return OptimalEpsilon(x, it, abs(fx), "newton")
        if (fx < 0) == rising:
            lo = x
        else:
            hi = x
        if hi - lo <= tol * x:
            x = 0.5 * (lo + hi)
            return OptimalEpsilon(x, it, abs(f(x)), "bisection")
        d = second_derivative(x, bloom, join)
        nx = x - fx / d if d != 0 else math.nan
        if not (lo < nx < hi):
            nx = 0.5 * (lo + hi)
        if nx == x:
            return OptimalEpsilon(x, it, abs(fx), "bisection")
        x = nx
    warnings.warn("optimal epsilon search hit the iteration cap", RuntimeWarning, stacklevel=2)
    x = 0.5 * (lo + hi)
    return OptimalEpsilon(x, max_iter, abs(f(x)), "bisection", "iteration cap reached")


# -- serialisation -------------------------------------------------------------

def models_to_json(bloom_size: BloomTimeModel | None, bloom_eps: BloomTimeModelEps,
                   join: JoinTimeModel, optimum: OptimalEpsilon | None = None,
                   n_expected: float | None = None) -> dict:
    """Flat document ``{c0, c1, k1, k2, l1, l2, a, b, residuals, method, ...}``."""
    doc = {
        "c0": bloom_eps.c0,
        "c1": bloom_eps.c1,
        "k1": bloom_size.k1 if bloom_size else None,
        "k2": bloom_size.k2 if bloom_size else None,
        "l1": join.l1,
        "l2": join.l2,
        "a": join.a,
        "b": join.b,
        "residuals": {
            "bloom_rms": bloom_size.rms if bloom_size else None,
            "join_rms": join.rms,
            "optimum": optimum.residual if optimum else None,
        },
        "method": optimum.method if optimum else None,
        "epsilon_star": optimum.epsilon_star if optimum else None,
        "iterations": optimum.iterations if optimum else None,
        "n_expected": n_expected,
        "bloom_clamped": bloom_size.clamped if bloom_size else False,
        "join_converged": join.converged,
    }
    return doc


def models_from_json(doc: dict | str | Path):
    """Inverse of :func:`models_to_json`; returns ``(size_model|None, eps_model, join_model)``."""
    if isinstance(doc, (str, Path)):
        doc = json.loads(Path(doc).read_text())
    res = doc.get("residuals") or {}
    size = None
    if doc.get("k1") is not None:
        size = BloomTimeModel(doc["k1"], doc["k2"], res.get("bloom_rms") or 0.0,
                              bool(doc.get("bloom_clamped", False)))
    eps_model = BloomTimeModelEps(doc["c0"], doc["c1"])
    join = JoinTimeModel(doc["l1"], doc["l2"], doc["a"], doc["b"], res.get("join_rms") or 0.0,
                         bool(doc.get("join_converged", True)))
    return size, eps_model, join
