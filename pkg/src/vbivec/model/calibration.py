"""Calibration of recognizer posteriors by maximizing the VB lower bound.

Responsibilities are tied to the raw posteriors through
q = softmax(α log q̃ + β). At fixed model and fixed Q(x), the bound depends
on q only through Σ q (log r − log q), a sum of negative KL divergences to the
optimal responsibilities r. That objective is maximized over (log α, β) with
BFGS; β is optimized in a zero-sum basis because softmax ignores a constant
shift.
"""

from __future__ import annotations

import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import entr, log_softmax, softmax

from vbivec.errors import DimensionMismatchError
from vbivec.state import CalibrationParams, RawPosteriors, Responsibilities


def _scaled_logits(log_raw: np.ndarray, cal: CalibrationParams) -> np.ndarray:
    alpha = cal.alpha if cal.is_diagonal else float(cal.alpha)
    return alpha * log_raw + cal.beta


def apply_calibration(raw: RawPosteriors, cal: CalibrationParams) -> Responsibilities:
    """q = softmax(α log q̃ + β), row by row."""
    if raw.num_components != cal.num_components:
        raise DimensionMismatchError(f"posteriors have N={raw.num_components}, calibration has N={cal.num_components}")
    return Responsibilities(softmax(_scaled_logits(raw.log_probs, cal), axis=1), raw.segment_id)


def _stack(raws: Sequence[RawPosteriors], log_rs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if len(raws) != len(log_rs):
        raise DimensionMismatchError(f"{len(raws)} posterior sets vs {len(log_rs)} optimal-responsibility sets")
    for raw, log_r in zip(raws, log_rs):
        if np.shape(log_r) != raw.log_probs.shape:
            raise DimensionMismatchError(f"segment {raw.segment_id}: log r {np.shape(log_r)} != {raw.log_probs.shape}")
    if not raws:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return (
        np.concatenate([raw.log_probs for raw in raws], axis=0),
        np.concatenate([np.asarray(r, dtype=np.float64) for r in log_rs], axis=0),
    )


def _objective_terms(
    log_raw: np.ndarray, log_r: np.ndarray, cal: CalibrationParams
) -> tuple[float, np.ndarray]:
    """Objective value and the per-entry weights g_st^i of its gradient."""
    log_q = log_softmax(_scaled_logits(log_raw, cal), axis=1)
    q = np.exp(log_q)
    gap = np.where(q > 0.0, log_r - log_q, 0.0)
    contrib = q * gap
    value = float(np.sum(contrib))
    g = contrib - q * contrib.sum(axis=1, keepdims=True)
    return value, g


def calib_objective(
    raws: Sequence[RawPosteriors], log_rs: Sequence[np.ndarray], cal: CalibrationParams
) -> float:
    """Σ_s Σ_t Σ_i q (log r − log q), with q the calibrated raw posteriors. Always ≤ 0."""
    log_raw, log_r = _stack(raws, log_rs)
    if log_raw.size == 0:
        return 0.0
    return _objective_terms(log_raw, log_r, cal)[0]


def calib_gradient(
    raws: Sequence[RawPosteriors], log_rs: Sequence[np.ndarray], cal: CalibrationParams
) -> tuple[float | np.ndarray, np.ndarray]:
    """Analytic (d/dα, d/dβ) of :func:`calib_objective`.

    d/dα is a scalar for scalar α and a length-N vector for diagonal α.
    """
    log_raw, log_r = _stack(raws, log_rs)
    n = cal.num_components
    if log_raw.size == 0:
        return (np.zeros(n) if cal.is_diagonal else 0.0), np.zeros(n)
    _, g = _objective_terms(log_raw, log_r, cal)
    d_beta = g.sum(axis=0)
    weighted = g * log_raw
    d_alpha: float | np.ndarray = weighted.sum(axis=0) if cal.is_diagonal else float(weighted.sum())
    return d_alpha, d_beta


def mean_entropy(raws: Sequence[RawPosteriors], cal: CalibrationParams) -> float:
    """Average per-frame entropy (nats) of the calibrated responsibilities."""
    frames = sum(raw.num_frames for raw in raws)
    if frames == 0:
        return 0.0
    total = sum(float(np.sum(entr(apply_calibration(raw, cal).probs))) for raw in raws)
    return total / frames


@dataclass
class CalibrationResult:
    params: CalibrationParams
    objective_before: float
    objective_after: float
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    rejected_steps: int = 0
    entropy_before: float = 0.0
    entropy_after: float = 0.0


class _Reparam:
    """θ = [log α (1 or N entries), z (N−1 entries)] with β = H'z, H the Helmert basis."""

    def __init__(self, num_components: int, diagonal: bool):
        self.n = num_components
        self.diagonal = diagonal
        self.alpha_size = num_components if diagonal else 1
        self.basis = scipy.linalg.helmert(num_components) if num_components > 1 else np.zeros((0, 1))

    def pack(self, cal: CalibrationParams) -> np.ndarray:
        log_alpha = np.log(np.atleast_1d(np.asarray(cal.alpha, dtype=np.float64)))
        if self.diagonal and log_alpha.size == 1:
            log_alpha = np.full(self.n, log_alpha[0])
        elif not self.diagonal and log_alpha.size > 1:
            log_alpha = np.array([log_alpha.mean()])
        return np.concatenate([log_alpha, self.basis @ cal.beta])

    def unpack(self, theta: np.ndarray) -> CalibrationParams:
        log_alpha = theta[: self.alpha_size]
        beta = self.basis.T @ theta[self.alpha_size :] if self.n > 1 else np.zeros(1)
        alpha: float | np.ndarray = np.exp(log_alpha) if self.diagonal else float(np.exp(log_alpha[0]))
        return CalibrationParams(alpha, beta)


def optimize_calibration(
    raws: Sequence[RawPosteriors],
    log_rs: Sequence[np.ndarray],
    init: CalibrationParams,
    tol: float = 1e-6,
    max_iter: int = 200,
    diagonal: bool | None = None,
) -> CalibrationResult:
    """Maximize the calibration objective with BFGS over (log α, zero-sum β).

    Stops when the gradient infinity-norm drops below ``tol`` per frame or after
    ``max_iter`` iterations. When ``diagonal`` asks for the other α shape, ``init``
    is first converted to it (a scalar α is broadcast, a diagonal one collapses to
    its geometric mean); the result is never worse than that starting point.
    """
    log_raw, log_r = _stack(raws, log_rs)
    diagonal = init.is_diagonal if diagonal is None else diagonal
    reparam = _Reparam(init.num_components, diagonal)
    if diagonal != init.is_diagonal:
        init = reparam.unpack(reparam.pack(init))
    frames = log_raw.shape[0]
    entropy_before = mean_entropy(raws, init)
    before = _objective_terms(log_raw, log_r, init)[0] if frames else 0.0
    if frames == 0:
        return CalibrationResult(init, 0.0, 0.0, [0.0], 0, True, 0, 0.0, 0.0)

    rejected = 0

    def negative(theta: np.ndarray) -> tuple[float, np.ndarray]:
        nonlocal rejected
        try:
            cal = reparam.unpack(theta)
        except Exception:
            rejected += 1
            return np.inf, np.zeros_like(theta)
        value, g = _objective_terms(log_raw, log_r, cal)
        if not np.isfinite(value):
            rejected += 1
            return np.inf, np.zeros_like(theta)
        d_beta = g.sum(axis=0)
        weighted = g * log_raw
        if diagonal:
            d_log_alpha = weighted.sum(axis=0) * np.asarray(cal.alpha)
        else:
            d_log_alpha = np.array([weighted.sum() * float(cal.alpha)])
        grad = np.concatenate([d_log_alpha, reparam.basis @ d_beta])
        return -value, -grad

    trace = [before]

    def record(theta: np.ndarray) -> None:
        trace.append(-negative(theta)[0])

    theta0 = reparam.pack(init)
    result = scipy.optimize.minimize(
        negative,
        theta0,
        jac=True,
        method="BFGS",
        callback=record,
        options={"gtol": tol * frames, "maxiter": max_iter, "norm": np.inf},
    )
    best = reparam.unpack(result.x)
    after = _objective_terms(log_raw, log_r, best)[0]
    if not np.isfinite(after) or after < before:
        warnings.warn(
            f"calibration optimizer ended below its start ({after!r} < {before!r}); keeping the initial parameters",
            stacklevel=2,
        )
        best, after = init, before
    if rejected:
        warnings.warn(f"calibration line search rejected {rejected} non-finite trial steps", stacklevel=2)
    return CalibrationResult(
        params=best,
        objective_before=before,
        objective_after=after,
        trace=trace,
        iterations=int(result.nit),
        converged=bool(result.success),
        rejected_steps=rejected,
        entropy_before=entropy_before,
        entropy_after=mean_entropy(raws, best),
    )
