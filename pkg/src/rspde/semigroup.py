"""Monte Carlo estimation of the transition semigroup and its functionals.

Estimators drive ensembles of trajectories, one noise stream per path.
Several field variants (for example h + delta*k and h - delta*k for a
finite-difference gradient) integrate in lockstep sharing the per-(stream,
step) noise block, which is what makes the difference estimators
common-random-number coupled.

Streams are partitioned into fixed-size chunks (independent of the worker
count), chunks may run on a thread pool sized by RSPDE_THREADS, and per-path
values are reassembled in stream order before any reduction, so results are
bitwise independent of the degree of parallelism.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientModel
from .grid_noise import NoisePlan, SpaceTimeGrid, increments_matrix, l2_norm
from .heat import _cached_solver, spectral_basis
from .solver import BlowUpError, penalty_resolvent

__all__ = [
    "Functional",
    "FunctionalContractError",
    "MCEstimate",
    "GradientEstimate",
    "field_id",
    "clipped_affine",
    "exp_neg_pair",
    "bounded_cylinder",
    "functional_from_config",
    "direction_dictionary",
    "run_ensemble",
    "estimate_Pt",
    "estimate_Pt_log",
    "estimate_Pt_grad_sq",
    "estimate_variance",
    "estimate_grad_Pt",
    "bootstrap_variance_positive",
]

_STREAM_CHUNK = 256  # fixed partition width; never derived from the worker count


class FunctionalContractError(RuntimeError):
    """A sampled functional value violated its declared bounds."""


def _stable_logistic(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class Functional:
    """Cylinder functional h -> psi(<h, phi>) from a small catalogue.

    kinds: ``clipped_affine`` (clip(offset + s, lo, hi)), ``exp_neg_pair``
    (lo + (hi-lo) exp(-s^2)), ``bounded_cylinder`` (logistic ramp in s, or a
    hard step when smooth=False).  All are bounded into [lo, hi]; the local
    Lipschitz constant |grad Phi|(h) is closed form per kind.
    """

    kind: str
    phi: np.ndarray
    dx: float
    offset: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    center: float = 0.0
    sharpness: float = 1.0
    smooth: bool = True

    @property
    def phi_l2(self) -> float:
        return float(l2_norm(self.phi, self.dx))

    @property
    def is_c1(self) -> bool:
        return self.smooth or self.kind != "bounded_cylinder"

    @property
    def lower_bound(self) -> float:
        return self.lo

    @property
    def upper_bound(self) -> float:
        return self.hi

    @property
    def strictly_positive(self) -> bool:
        return self.lo > 0.0

    def pair(self, U: np.ndarray):
        """<U, phi> = dx * sum_i phi_i U_i over the node axis (axis 0)."""
        return self.dx * np.tensordot(self.phi, U, axes=([0], [0]))

    def value(self, U: np.ndarray):
        s = self.pair(U)
        if self.kind == "clipped_affine":
            return np.clip(self.offset + s, self.lo, self.hi)
        if self.kind == "exp_neg_pair":
            return self.lo + (self.hi - self.lo) * np.exp(-np.square(s))
        if self.kind == "bounded_cylinder":
            if self.smooth:
                p = _stable_logistic(self.sharpness * (np.asarray(s, dtype=float) - self.center))
                return self.lo + (self.hi - self.lo) * p
            return self.lo + (self.hi - self.lo) * (np.asarray(s) >= self.center)
        raise ValueError(f"unknown functional kind {self.kind!r}")

    def grad_norm(self, U: np.ndarray):
        """Local Lipschitz constant |grad Phi| at each field."""
        s = np.asarray(self.pair(U), dtype=float)
        if self.kind == "clipped_affine":
            inside = (self.offset + s > self.lo) & (self.offset + s < self.hi)
            return np.where(inside, self.phi_l2, 0.0)
        if self.kind == "exp_neg_pair":
            return (self.hi - self.lo) * 2.0 * np.abs(s) * np.exp(-np.square(s)) * self.phi_l2
        if self.kind == "bounded_cylinder":
            if self.smooth:
                p = _stable_logistic(self.sharpness * (s - self.center))
                return (self.hi - self.lo) * self.sharpness * p * (1.0 - p) * self.phi_l2
            return np.where(s == self.center, np.inf, 0.0)
        raise ValueError(f"unknown functional kind {self.kind!r}")

    def grad_sq(self, U: np.ndarray):
        return np.square(self.grad_norm(U))


def clipped_affine(phi, dx, offset=0.0, lo=0.0, hi=1.0) -> Functional:
    return Functional("clipped_affine", np.asarray(phi, float), dx, offset=offset, lo=lo, hi=hi)


def exp_neg_pair(phi, dx, lo=0.1, hi=1.0) -> Functional:
    if not 0.0 <= lo < hi:
        raise ValueError("need 0 <= lo < hi")
    return Functional("exp_neg_pair", np.asarray(phi, float), dx, lo=lo, hi=hi)


def bounded_cylinder(phi, dx, center=0.0, lo=0.0, hi=1.0, sharpness=1.0, smooth=True) -> Functional:
    return Functional(
        "bounded_cylinder", np.asarray(phi, float), dx,
        center=center, lo=lo, hi=hi, sharpness=sharpness, smooth=smooth,
    )


_FUNCTIONAL_BUILDERS = {
    "clipped_affine": clipped_affine,
    "exp_neg_pair": exp_neg_pair,
    "bounded_cylinder": bounded_cylinder,
}


def functional_from_config(grid: SpaceTimeGrid, spec: dict) -> Functional:
    """Build a catalogue functional from a config block.

    The direction is given as sine-mode coefficients under ``direction_modes``;
    remaining keys are the kind's numeric parameters.
    """
    from .grid_noise import sine_profile

    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in _FUNCTIONAL_BUILDERS:
        raise ValueError(f"unknown functional kind {kind!r}; choose from {sorted(_FUNCTIONAL_BUILDERS)}")
    modes = spec.pop("direction_modes")
    phi = sine_profile(grid, modes)
    return _FUNCTIONAL_BUILDERS[kind](phi, grid.dx, **spec)


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    std_error: float
    n_paths: int
    master_seed: int
    stream_range: tuple[int, int] = (0, 0)
    functional: str = ""
    h_id: str = ""
    t: float = 0.0

    def to_json(self) -> dict:
        return {
            "functional": self.functional,
            "h_id": self.h_id,
            "t": self.t,
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "seed": self.master_seed,
            "stream_range": list(self.stream_range),
        }


def field_id(h) -> str:
    """Short content hash identifying an initial field in output records."""
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(h, dtype=float).tobytes()).hexdigest()[:12]


@dataclass
class GradientEstimate:
    """Finite-difference proxy for |grad P_t Phi|(h): max over a direction
    dictionary of coupled central differences.  A finite dictionary can only
    under-estimate the true local Lipschitz constant, so this is a lower
    bound proxy."""

    value: float
    std_error: float
    best_direction: str
    per_direction: list = field(default_factory=list)  # (label, mean, std_error)
    rejected: list = field(default_factory=list)       # (label, projection distance)
    n_paths: int = 0
    master_seed: int = 0
    delta: float = 0.0


# ---------------------------------------------------------------------------
# lockstep ensemble engine
# ---------------------------------------------------------------------------

def _n_threads() -> int:
    env = os.environ.get("RSPDE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _chunk_ranges(n_paths: int):
    return [(lo, min(lo + _STREAM_CHUNK, n_paths)) for lo in range(0, n_paths, _STREAM_CHUNK)]


def run_ensemble(h_variants, n_run_steps, mode, model: CoefficientModel,
                 grid: SpaceTimeGrid, seed: int, n_paths: int, eps: float | None = None,
                 stream_offset: int = 0, track_sup_pairs=None):
    """Integrate V field variants over n_paths streams in lockstep.

    Returns final fields of shape (V, n_space, n_paths); when
    ``track_sup_pairs`` lists variant index pairs, also returns the running
    sup over time and space of |U_i - U_j| per path, shape (n_pairs, n_paths)
    (the supremum includes t = 0).

    All variants of a stream share the same noise blocks, so cross-variant
    differences are common-random-number coupled; each path's trajectory is
    bitwise identical to a single solve_path run with the same stream id.
    """
    H = np.atleast_2d(np.asarray(h_variants, dtype=float))
    V, n = H.shape
    if n != grid.n_space:
        raise ValueError(f"variant fields have {n} nodes, expected {grid.n_space}")
    if mode == "penalized" and (eps is None or eps <= 0):
        raise ValueError("penalized mode needs eps > 0")
    if mode not in ("penalized", "reflected"):
        raise ValueError(f"unknown mode {mode!r}")
    if n_run_steps > grid.n_steps:
        raise ValueError("n_run_steps exceeds grid.n_steps")
    pairs = list(track_sup_pairs or [])

    plan = NoisePlan(seed)
    solver = _cached_solver(grid.n_space, grid.dx, grid.dt)
    q = grid.dt / eps if mode == "penalized" else 0.0

    out = np.empty((V, n, n_paths))
    sup_out = np.empty((len(pairs), n_paths)) if pairs else None

    def do_chunk(lo: int, hi: int):
        streams = np.arange(lo, hi) + stream_offset
        C = hi - lo
        U = np.broadcast_to(H.T[:, :, None], (n, V, C)).copy()
        sup = None
        if pairs:
            sup = np.empty((len(pairs), C))
            for p, (i, j) in enumerate(pairs):
                sup[p] = np.max(np.abs(U[:, i, :] - U[:, j, :]), axis=0)
        for m in range(n_run_steps):
            dW = increments_matrix(plan, grid, m, streams)
            xi = (dW / grid.dx)[:, None, :]
            W = U + grid.dt * model.b(U) + model.sigma(U) * xi
            Vmid = solver.solve(W.reshape(n, V * C)).reshape(n, V, C)
            if mode == "penalized":
                U = penalty_resolvent(Vmid, q, model.penalty_kind)
            else:
                U = np.maximum(Vmid, 0.0)
            if not np.all(np.isfinite(U)):
                bad = np.where(~np.isfinite(U).all(axis=(0, 1)))[0]
                raise _blow_up(m, int(streams[bad[0]]) if len(bad) else -1)
            if pairs:
                for p, (i, j) in enumerate(pairs):
                    np.maximum(sup[p], np.max(np.abs(U[:, i, :] - U[:, j, :]), axis=0), out=sup[p])
        out[:, :, lo:hi] = U.transpose(1, 0, 2)
        if pairs:
            sup_out[:, lo:hi] = sup

    ranges = _chunk_ranges(n_paths)
    workers = min(_n_threads(), len(ranges))
    if workers <= 1:
        for lo, hi in ranges:
            do_chunk(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda r: do_chunk(*r), ranges))
    if pairs:
        return out, sup_out
    return out


def _blow_up(step, stream):
    err = BlowUpError(step, float("nan"))
    err.stream = int(stream)
    err.args = (f"blow-up at step {step} on stream {stream}",)
    return err


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def _check_t(grid: SpaceTimeGrid, t: float) -> int:
    return grid.step_of(t)


def _mean_se(values: np.ndarray, seed: int, n_paths: int, **prov) -> MCEstimate:
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return MCEstimate(mean, se, n_paths, seed, (0, n_paths), **prov)


def _final_fields(h, t, mode, model, grid, n_paths, seed, eps):
    n_steps = _check_t(grid, t)
    U = run_ensemble(np.asarray(h, float)[None, :], n_steps, mode, model, grid,
                     seed, n_paths, eps=eps)
    return U[0]


def estimate_Pt(phi: Functional, h, t, mode, model, grid, n_paths, seed, eps=None) -> MCEstimate:
    """Ensemble mean of Phi(u(t; h)) over streams 0..n_paths-1."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    prov = {"functional": phi.kind, "h_id": field_id(h), "t": t}
    if _check_t(grid, t) == 0:
        return MCEstimate(float(phi.value(np.asarray(h, float))), 0.0, n_paths, seed,
                          (0, n_paths), **prov)
    fields = _final_fields(h, t, mode, model, grid, n_paths, seed, eps)
    return _mean_se(phi.value(fields), seed, n_paths, **prov)


def estimate_Pt_log(phi: Functional, h, t, mode, model, grid, n_paths, seed, eps=None) -> MCEstimate:
    """Ensemble mean of log Phi(u(t; h)); Phi must be strictly positive."""
    if not phi.strictly_positive:
        raise ValueError("estimate_Pt_log needs a strictly positive functional (lo > 0)")
    prov = {"functional": f"log({phi.kind})", "h_id": field_id(h), "t": t}
    if _check_t(grid, t) == 0:
        return MCEstimate(float(np.log(phi.value(np.asarray(h, float)))), 0.0, n_paths, seed,
                          (0, n_paths), **prov)
    fields = _final_fields(h, t, mode, model, grid, n_paths, seed, eps)
    values = phi.value(fields)
    if np.min(values) < phi.lower_bound * (1.0 - 1e-12):
        raise FunctionalContractError(
            f"sampled value {np.min(values)} below declared lower bound {phi.lower_bound}"
        )
    return _mean_se(np.log(values), seed, n_paths, **prov)


def estimate_Pt_grad_sq(phi: Functional, h, t, mode, model, grid, n_paths, seed, eps=None) -> MCEstimate:
    """Ensemble mean of |grad Phi|^2(u(t; h)) (right-hand sides of the bounds)."""
    prov = {"functional": f"grad_sq({phi.kind})", "h_id": field_id(h), "t": t}
    if _check_t(grid, t) == 0:
        return MCEstimate(float(phi.grad_sq(np.asarray(h, float))), 0.0, n_paths, seed,
                          (0, n_paths), **prov)
    fields = _final_fields(h, t, mode, model, grid, n_paths, seed, eps)
    return _mean_se(phi.grad_sq(fields), seed, n_paths, **prov)


def estimate_variance(phi: Functional, h, t, mode, model, grid, n_paths, seed, eps=None) -> MCEstimate:
    """Unbiased sample variance of Phi(u(t; h)) with its asymptotic std error."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    prov = {"functional": f"var({phi.kind})", "h_id": field_id(h), "t": t}
    if _check_t(grid, t) == 0:
        return MCEstimate(0.0, 0.0, n_paths, seed, (0, n_paths), **prov)
    fields = _final_fields(h, t, mode, model, grid, n_paths, seed, eps)
    values = phi.value(fields)
    n = len(values)
    var = float(np.var(values, ddof=1))
    centered = values - np.mean(values)
    m4 = float(np.mean(centered ** 4))
    se = math.sqrt(max(m4 - var * var * (n - 3) / (n - 1), 0.0) / n)
    return MCEstimate(var, se, n_paths, seed, (0, n_paths), **prov)


def bootstrap_variance_positive(values, n_boot=2000, seed=0, level=0.99) -> bool:
    """True when the bootstrap lower confidence bound of the variance is > 0."""
    rng = np.random.default_rng(seed)
    values = np.asarray(values, float)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    boots = np.var(values[idx], axis=1, ddof=1)
    return float(np.quantile(boots, 1.0 - level)) > 0.0


def direction_dictionary(grid: SpaceTimeGrid, n_modes: int = 8, include_parts: bool = True):
    """Unit-norm probe directions: low sine modes and their +/- parts.

    Returns (labels, fields) with every field of unit discrete L2 norm;
    zero or duplicate parts (such as the negative part of the first mode)
    are dropped.
    """
    basis = spectral_basis(grid.n_space, min(n_modes, grid.n_space))
    labels: list[str] = []
    fields: list[np.ndarray] = []

    def push(label, vec):
        norm = float(l2_norm(vec, grid.dx))
        if norm < 1e-12:
            return
        unit = vec / norm
        for existing in fields:
            if np.max(np.abs(existing - unit)) < 1e-12:
                return
        labels.append(label)
        fields.append(unit)

    for i in range(min(n_modes, grid.n_space)):
        e = basis.modes[i]
        push(f"e{i+1}", e)
        if include_parts:
            push(f"e{i+1}+", np.maximum(e, 0.0))
            push(f"e{i+1}-", np.maximum(-e, 0.0))
    return labels, fields


def estimate_grad_Pt(phi: Functional, h, t, mode, model, grid, n_paths, seed,
                     eps=None, directions=None, delta=None) -> GradientEstimate:
    """Coupled central-difference proxy for |grad P_t Phi|(h).

    For each unit direction k the +/- variants h +/- delta*k are projected
    onto the nonnegative cone (directions whose projection moves the field
    by more than delta/10 in L2 are rejected) and integrated in lockstep
    with shared noise; the proxy is the max over directions of
    |P_t Phi(h+) - P_t Phi(h-)| / (2 delta).
    """
    h = np.asarray(h, dtype=float)
    if directions is None:
        labels, fields = direction_dictionary(grid)
    elif isinstance(directions, tuple) and len(directions) == 2 \
            and not isinstance(directions[0], np.ndarray):
        labels, fields = directions
    else:
        fields = [np.asarray(k, float) for k in directions]
        labels = [f"k{i}" for i in range(len(fields))]
    if delta is None:
        delta = 1e-3 * max(float(l2_norm(h, grid.dx)), 1.0)

    variants = []
    kept = []
    rejected = []
    for label, k in zip(labels, fields):
        hp = np.maximum(h + delta * k, 0.0)
        hm = np.maximum(h - delta * k, 0.0)
        d_proj = max(
            float(l2_norm(hp - (h + delta * k), grid.dx)),
            float(l2_norm(hm - (h - delta * k), grid.dx)),
        )
        if d_proj > delta / 10.0:
            rejected.append((label, d_proj))
            continue
        kept.append(label)
        variants.append((hp, hm))
    if not kept:
        raise ValueError("all probe directions were rejected at the cone boundary")

    n_steps = _check_t(grid, t)
    per_direction = []
    if n_steps == 0:
        for label, (hp, hm) in zip(kept, variants):
            fd = float((phi.value(hp) - phi.value(hm)) / (2.0 * delta))
            per_direction.append((label, fd, 0.0))
    else:
        stacked = np.stack([f for pair in variants for f in pair])
        U = run_ensemble(stacked, n_steps, mode, model, grid, seed, n_paths, eps=eps)
        for i, label in enumerate(kept):
            diffs = (phi.value(U[2 * i]) - phi.value(U[2 * i + 1])) / (2.0 * delta)
            est = _mean_se(diffs, seed, n_paths)
            per_direction.append((label, est.mean, est.std_error))

    best = max(range(len(per_direction)), key=lambda i: abs(per_direction[i][1]))
    return GradientEstimate(
        value=abs(per_direction[best][1]),
        std_error=per_direction[best][2],
        best_direction=per_direction[best][0],
        per_direction=per_direction,
        rejected=rejected,
        n_paths=n_paths,
        master_seed=seed,
        delta=delta,
    )
