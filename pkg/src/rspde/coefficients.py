"""Coefficient models, assumption validation, and the explicit bound functions.

A model bundles drift b, diffusion sigma, and a nonnegative penalty
nonlinearity together with the declared constants (Lipschitz bounds L_b,
L_sigma and the diffusion window kappa1 <= |sigma| <= kappa2) that the
inequality checkers consume.  Models are opaque callables, so validation is
by sampling on a user-declared range, not symbolic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "DegenerateDiffusionError",
    "CoefficientModel",
    "BoundProfile",
    "constant_M",
    "zeta",
    "harnack_rhs",
    "t0_eps",
    "validate_model",
    "ModelValidationReport",
    "constant_model",
    "affine_clamped_model",
    "sin_modulated_model",
    "standard_model",
    "model_from_config",
    "MODEL_CATALOGUE",
    "penalty_negative_part",
    "penalty_arctan_square",
    "adaptive_simpson",
]

_SQRT_PI = math.sqrt(math.pi)


class DegenerateDiffusionError(ValueError):
    """Raised when a bound formula needs L_sigma > 0 but got 0."""


# ---------------------------------------------------------------------------
# penalties
# ---------------------------------------------------------------------------

def penalty_negative_part(u):
    """f(u) = max(-u, 0): zero on [0, inf), slope -1 below."""
    return np.maximum(-u, 0.0)


def _dpenalty_negative_part(u):
    # a.e. derivative; the value at u = 0 is taken to be 0
    return np.where(u < 0.0, -1.0, 0.0)


def penalty_arctan_square(u):
    """f(u) = arctan(min(u,0)^2): smooth, bounded penalty alternative."""
    w = np.minimum(u, 0.0)
    return np.arctan(w * w)


def _dpenalty_arctan_square(u):
    w = np.minimum(u, 0.0)
    return 2.0 * w / (1.0 + w ** 4)


_PENALTIES = {
    "negative_part": (penalty_negative_part, _dpenalty_negative_part),
    "arctan_square": (penalty_arctan_square, _dpenalty_arctan_square),
}


# ---------------------------------------------------------------------------
# coefficient models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientModel:
    """Drift/diffusion pair with declared constants and a penalty choice."""

    name: str
    b: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    L_b: float
    L_sigma: float
    kappa1: float
    kappa2: float
    penalty_kind: str = "negative_part"
    db: Callable[[np.ndarray], np.ndarray] | None = None
    dsigma: Callable[[np.ndarray], np.ndarray] | None = None
    params: tuple = ()

    @property
    def differentiable(self) -> bool:
        return self.db is not None and self.dsigma is not None

    def penalty(self, u):
        return _PENALTIES[self.penalty_kind][0](u)

    def penalty_deriv(self, u):
        return _PENALTIES[self.penalty_kind][1](u)


def constant_model(b0: float = 0.0, s0: float = 0.0, *, penalty: str = "negative_part",
                   kappa1: float | None = None, kappa2: float | None = None) -> CoefficientModel:
    """b and sigma constant.  L_sigma = 0, so the bound formulas reject it."""
    return CoefficientModel(
        name="constant",
        b=lambda u, b0=b0: np.full_like(np.asarray(u, dtype=float), b0),
        sigma=lambda u, s0=s0: np.full_like(np.asarray(u, dtype=float), s0),
        L_b=0.0,
        L_sigma=0.0,
        kappa1=0.9 * abs(s0) if kappa1 is None else kappa1,
        kappa2=1.1 * abs(s0) if kappa2 is None else kappa2,
        penalty_kind=penalty,
        db=lambda u: np.zeros_like(np.asarray(u, dtype=float)),
        dsigma=lambda u: np.zeros_like(np.asarray(u, dtype=float)),
        params=(("b0", b0), ("s0", s0)),
    )


def affine_clamped_model(b_slope: float = 0.5, b_shift: float = 0.0, b_clip: float = 2.0,
                         s_slope: float = 0.5, s_shift: float = 1.5,
                         s_lo: float = 1.0, s_hi: float = 2.0, *,
                         penalty: str = "negative_part") -> CoefficientModel:
    """Affine drift and diffusion, clamped; diffusion clamped into [s_lo, s_hi].

    Not differentiable at the clamp corners, so the tangent integrator
    rejects it.
    """
    if not 0.0 < s_lo < s_hi:
        raise ValueError("need 0 < s_lo < s_hi")
    return CoefficientModel(
        name="affine_clamped",
        b=lambda u: np.clip(b_slope * u + b_shift, -b_clip, b_clip),
        sigma=lambda u: np.clip(s_slope * u + s_shift, s_lo, s_hi),
        L_b=abs(b_slope),
        L_sigma=abs(s_slope),
        kappa1=s_lo,
        kappa2=s_hi,
        penalty_kind=penalty,
        params=(
            ("b_slope", b_slope), ("b_shift", b_shift), ("b_clip", b_clip),
            ("s_slope", s_slope), ("s_shift", s_shift), ("s_lo", s_lo), ("s_hi", s_hi),
        ),
    )


def sin_modulated_model(b_amp: float = 1.0, b_freq: float = 1.0,
                        s_base: float = 1.5, s_amp: float = 0.4, s_freq: float = 2.5, *,
                        penalty: str = "negative_part") -> CoefficientModel:
    """Smooth bounded-oscillation model; the defaults give the standard
    checker configuration L_b = L_sigma = 1, kappa1 = 1.1, kappa2 = 1.9."""
    if not 0.0 <= abs(s_amp) < s_base:
        raise ValueError("need |s_amp| < s_base for a positive diffusion window")
    return CoefficientModel(
        name="sin_modulated",
        b=lambda u: b_amp * np.sin(b_freq * u),
        sigma=lambda u: s_base + s_amp * np.sin(s_freq * u),
        L_b=abs(b_amp * b_freq),
        L_sigma=abs(s_amp * s_freq),
        kappa1=s_base - abs(s_amp),
        kappa2=s_base + abs(s_amp),
        penalty_kind=penalty,
        db=lambda u: b_amp * b_freq * np.cos(b_freq * u),
        dsigma=lambda u: s_amp * s_freq * np.cos(s_freq * u),
        params=(
            ("b_amp", b_amp), ("b_freq", b_freq),
            ("s_base", s_base), ("s_amp", s_amp), ("s_freq", s_freq),
        ),
    )


def standard_model(penalty: str = "negative_part") -> CoefficientModel:
    return sin_modulated_model(penalty=penalty)


MODEL_CATALOGUE = {
    "constant": constant_model,
    "affine_clamped": affine_clamped_model,
    "sin_modulated": sin_modulated_model,
}


def model_from_config(name: str, params: dict | None = None) -> CoefficientModel:
    if name not in MODEL_CATALOGUE:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_CATALOGUE)}")
    return MODEL_CATALOGUE[name](**(params or {}))


# ---------------------------------------------------------------------------
# assumption validation
# ---------------------------------------------------------------------------

@dataclass
class ModelValidationReport:
    passed: bool
    worst_ratio_b: float
    worst_ratio_sigma: float
    sigma_min: float
    sigma_max: float
    failures: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"model validation: {status}",
            f"  worst sampled Lipschitz ratio b: {self.worst_ratio_b:.6g}",
            f"  worst sampled Lipschitz ratio sigma: {self.worst_ratio_sigma:.6g}",
            f"  sampled |sigma| range: [{self.sigma_min:.6g}, {self.sigma_max:.6g}]",
        ]
        lines.extend(f"  failure: {msg}" for msg in self.failures)
        return "\n".join(lines)


def validate_model(model: CoefficientModel, lo: float, hi: float,
                   n_samples: int = 10_000, seed: int = 20210627) -> ModelValidationReport:
    """Sampled check of the declared constants on [lo, hi].

    Draws n_samples (u, v) pairs, compares difference quotients of b and
    sigma against L_b, L_sigma, checks kappa1 <= |sigma| <= kappa2 pointwise,
    and checks the penalty shape (nonincreasing, zero on u >= 0, positive
    below).  A sampled ratio may exceed its constant by at most 1e-9 relative.
    """
    if not hi > lo:
        raise ValueError("empty validation range")
    rng = np.random.default_rng(seed)
    u = rng.uniform(lo, hi, size=n_samples)
    v = rng.uniform(lo, hi, size=n_samples)
    keep = np.abs(u - v) > 1e-12 * max(1.0, abs(hi), abs(lo))
    du = np.abs(u[keep] - v[keep])

    failures: list[str] = []
    slack = 1.0 + 1e-9

    ratio_b = float(np.max(np.abs(model.b(u[keep]) - model.b(v[keep])) / du, initial=0.0))
    if ratio_b > model.L_b * slack:
        failures.append(f"b ratio {ratio_b:.6g} exceeds declared L_b={model.L_b}")

    ratio_s = float(np.max(np.abs(model.sigma(u[keep]) - model.sigma(v[keep])) / du, initial=0.0))
    if ratio_s > model.L_sigma * slack:
        failures.append(f"sigma ratio {ratio_s:.6g} exceeds declared L_sigma={model.L_sigma}")

    abs_sigma = np.abs(model.sigma(u))
    s_min, s_max = float(abs_sigma.min()), float(abs_sigma.max())
    if not 0.0 < model.kappa1 < model.kappa2:
        failures.append(f"need 0 < kappa1 < kappa2, got ({model.kappa1}, {model.kappa2})")
    if s_min < model.kappa1 / slack:
        failures.append(f"sampled |sigma| min {s_min:.6g} below kappa1={model.kappa1}")
    if s_max > model.kappa2 * slack:
        failures.append(f"sampled |sigma| max {s_max:.6g} above kappa2={model.kappa2}")

    w = np.sort(u)
    f_vals = model.penalty(w)
    if np.any(np.diff(f_vals) > 1e-12):
        failures.append("penalty is not nonincreasing on samples")
    if np.any(f_vals[w >= 0.0] != 0.0):
        failures.append("penalty nonzero for some u >= 0")
    if np.any(f_vals[w < 0.0] <= 0.0):
        failures.append("penalty not strictly positive for some u < 0")

    return ModelValidationReport(
        passed=not failures,
        worst_ratio_b=ratio_b,
        worst_ratio_sigma=ratio_s,
        sigma_min=s_min,
        sigma_max=s_max,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# explicit constants and bound functions
# ---------------------------------------------------------------------------

def constant_M(L_b: float, L_sigma: float) -> float:
    """Smoothing constant max{3, 9Ls^2/sqrt(pi), 8Lb^2/Ls^4, 144Lb^2/(Ls^2 sqrt(pi)), 864Lb^2/sqrt(pi)}.

    Undefined for L_sigma = 0 (two terms divide by powers of L_sigma); that
    degenerate case raises instead of guessing a constant.
    """
    if L_sigma <= 0.0:
        raise DegenerateDiffusionError(
            "constant_M needs L_sigma > 0; constant-diffusion models fall outside the bound formulas"
        )
    lb2 = L_b * L_b
    ls2 = L_sigma * L_sigma
    return max(
        3.0,
        9.0 * ls2 / _SQRT_PI,
        8.0 * lb2 / (ls2 * ls2),
        144.0 * lb2 / (ls2 * _SQRT_PI),
        864.0 * lb2 / _SQRT_PI,
    )


def zeta(t: float, L_b: float, L_sigma: float) -> float:
    """Growth exponent t^(1/2) + (9Ls^4/4) t + (3Lb^2/2) t^2 + (18Lb^2Ls^2/(5 sqrt(pi))) t^(5/2)."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    lb2 = L_b * L_b
    ls2 = L_sigma * L_sigma
    return (
        math.sqrt(t)
        + 2.25 * ls2 * ls2 * t
        + 1.5 * lb2 * t * t
        + (18.0 * lb2 * ls2 / (5.0 * _SQRT_PI)) * t * t * math.sqrt(t)
    )


def adaptive_simpson(f, a: float, b: float, rel_tol: float = 1e-8) -> float:
    """Adaptive Simpson quadrature of f on [a, b] to relative tolerance rel_tol."""
    if b < a:
        raise ValueError("need b >= a")
    if b == a:
        return 0.0
    # coarse magnitude estimate to convert the relative tolerance to absolute
    xs = np.linspace(a, b, 65)
    coarse = float(np.trapezoid([f(x) for x in xs], xs))
    tol = rel_tol * max(abs(coarse), 1e-300)

    def simpson(fa, fm, fb, h):
        return h / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(lo, hi, flo, fmid, fhi, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm = 0.5 * (lo + mid)
        rm = 0.5 * (mid + hi)
        flm = f(lm)
        frm = f(rm)
        left = simpson(flo, flm, fmid, mid - lo)
        right = simpson(fmid, frm, fhi, hi - mid)
        if depth > 60 or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return (
            recurse(lo, mid, flo, flm, fmid, left, eps / 2.0, depth + 1)
            + recurse(mid, hi, fmid, frm, fhi, right, eps / 2.0, depth + 1)
        )

    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 0)


class BoundProfile:
    """Bound package for one (L_b, L_sigma) pair: M, zeta, and the two
    exponential growth integrals, with computed integrals cached per t."""

    def __init__(self, L_b: float, L_sigma: float):
        self.L_b = L_b
        self.L_sigma = L_sigma
        self.M = constant_M(L_b, L_sigma)
        self._cache: dict[tuple[float, int], float] = {}

    def zeta(self, t: float) -> float:
        return zeta(t, self.L_b, self.L_sigma)

    def int_exp_neg_zeta(self, t: float) -> float:
        """integral_0^t exp(-zeta(s)) ds, adaptive quadrature to 1e-8 relative."""
        key = (t, -1)
        if key not in self._cache:
            self._cache[key] = adaptive_simpson(lambda s: math.exp(-self.zeta(s)), 0.0, t)
        return self._cache[key]

    def int_exp_zeta(self, t: float) -> float:
        """integral_0^t exp(+zeta(s)) ds."""
        key = (t, +1)
        if key not in self._cache:
            self._cache[key] = adaptive_simpson(lambda s: math.exp(self.zeta(s)), 0.0, t)
        return self._cache[key]

    def harnack_rhs(self, t: float, dist2: float, kappa1: float) -> float:
        return harnack_rhs(t, dist2, self, kappa1)


def harnack_rhs(t: float, dist2: float, profile: BoundProfile, kappa1: float) -> float:
    """Additive term M * dist2 / (kappa1^2 * integral_0^t exp(-zeta))."""
    if t <= 0:
        raise ValueError(f"t must be > 0, got {t}")
    if dist2 < 0:
        raise ValueError(f"dist2 must be >= 0, got {dist2}")
    return profile.M * dist2 / (kappa1 * kappa1 * profile.int_exp_neg_zeta(t))


def _sigma_series(t: float) -> float:
    """sum_{n>=1} (1 - exp(-n^2 pi^2 t))/n^2 with a certified truncation.

    Computed as pi^2/6 minus the exponentially convergent remainder series,
    truncated at N with exp(-N^2 pi^2 t)/N below 1e-12 (tail bound), so the
    truncation error is negligible against the 1/6 threshold it feeds.
    """
    if t <= 0:
        return 0.0
    n_cut = max(16, int(math.ceil(1.7 / math.sqrt(t))))
    n_cut = min(n_cut, 50_000_000)
    n = np.arange(1, n_cut + 1, dtype=float)
    rem = float(np.sum(np.exp(-(n * n) * (math.pi ** 2) * t) / (n * n)))
    return math.pi ** 2 / 6.0 - rem


def t0_eps(eps: float, L_b: float, L_sigma: float) -> float:
    """Largest t with ((L_b+1/eps)^2 t/pi^2)(1-e^{-pi^2 t})
    + (2 L_sigma^2/pi^2) sum_n (1-e^{-n^2 pi^2 t})/n^2 <= 1/6.

    Found by bisection to 1e-10 absolute; returns 0.0 when the condition
    already fails at t = 1e-12.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    pi2 = math.pi ** 2
    lam = (L_b + 1.0 / eps) ** 2

    def cond(t: float) -> float:
        return (lam * t / pi2) * (1.0 - math.exp(-pi2 * t)) + (
            2.0 * L_sigma ** 2 / pi2
        ) * _sigma_series(t)

    lo = 1e-12
    if cond(lo) > 1.0 / 6.0:
        return 0.0
    hi = max(2e-12, 1e-6)
    while cond(hi) <= 1.0 / 6.0:
        lo = hi
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("t0_eps bracket search exceeded 1e12")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if cond(mid) <= 1.0 / 6.0:
            lo = mid
        else:
            hi = mid
    return lo
