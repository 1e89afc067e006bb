"""Plain-GMM functionality: densities, UBM alignment, the LB⁰ bound and UBM EM."""

from __future__ import annotations

import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import entr, logsumexp, softmax

from vbivec.errors import (
    ConfigError,
    DataError,
    DegenerateComponentError,
    DimensionMismatchError,
    NotPositiveDefiniteError,
)
from vbivec.parallel import map_reduce, map_segments, ordered_sum
from vbivec.state import (
    CovarianceMode,
    EmptyComponentPolicy,
    ModelParams,
    Responsibilities,
    SegmentFeatures,
)

LOG_2PI = float(np.log(2.0 * np.pi))

ProgressFn = Callable[[int, str, float], None]


@dataclass(frozen=True)
class VarianceFloor:
    """Per-dimension floor max(absolute, relative × global variance)."""

    absolute: float = 1e-6
    relative: float = 1e-3

    def vector(self, global_var: np.ndarray) -> np.ndarray:
        return np.maximum(self.absolute, self.relative * np.asarray(global_var, dtype=np.float64))


def log_gauss_frames(frames: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(φ_t | mean, cov) for every row φ_t of ``frames``.

    ``cov`` is a length-D variance vector or a D x D matrix.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = frames.shape[1]
    if mean.shape != (d,) or cov.shape not in ((d,), (d, d)):
        raise DimensionMismatchError(f"frames D={d} vs mean {mean.shape} / cov {cov.shape}")
    diff = frames - mean
    if cov.ndim == 1:
        if np.any(cov <= 0.0):
            raise NotPositiveDefiniteError("diagonal covariance has a non-positive entry")
        quad = np.sum(diff * diff / cov, axis=1)
        log_det = float(np.sum(np.log(cov)))
    else:
        try:
            chol = scipy.linalg.cholesky(cov, lower=True)
        except np.linalg.LinAlgError as e:
            raise NotPositiveDefiniteError(f"covariance is not positive definite: {e}") from e
        z = scipy.linalg.solve_triangular(chol, diff.T, lower=True)
        quad = np.sum(z * z, axis=0)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (d * LOG_2PI + log_det + quad)


def log_gauss(phi: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Exact multivariate normal log-density of a single vector."""
    return float(log_gauss_frames(np.asarray(phi, dtype=np.float64)[None, :], mean, cov)[0])


def _check_segment(params: ModelParams, seg: SegmentFeatures) -> np.ndarray:
    if seg.dim != params.dims.D:
        raise DimensionMismatchError(f"segment {seg.segment_id} has D={seg.dim}, model has D={params.dims.D}")
    return np.asarray(seg.frames, dtype=np.float64)


def _check_resp(params: ModelParams, seg: SegmentFeatures, resp: Responsibilities) -> None:
    if resp.probs.shape != (seg.num_frames, params.dims.N):
        raise DimensionMismatchError(
            f"segment {seg.segment_id}: responsibilities {resp.probs.shape} != ({seg.num_frames}, {params.dims.N})"
        )


def log_joint(params: ModelParams, seg: SegmentFeatures) -> np.ndarray:
    """T_s x N matrix of log w_i + log N(φ_st | μ_i, C_i) (the UBM, loadings ignored)."""
    frames = _check_segment(params, seg)
    out = np.empty((frames.shape[0], params.dims.N))
    for i in range(params.dims.N):
        out[:, i] = np.log(params.weights[i]) + log_gauss_frames(frames, params.means[i], params.covariances[i])
    return out


def responsibility_entropy(probs: np.ndarray) -> float:
    """-Σ q log q with 0·log 0 = 0."""
    return float(np.sum(entr(np.asarray(probs, dtype=np.float64))))


def align(params: ModelParams, seg: SegmentFeatures) -> Responsibilities:
    """UBM alignment: q_st^i ∝ w_i N(φ_st | μ_i, C_i)."""
    return Responsibilities(softmax(log_joint(params, seg), axis=1), seg.segment_id)


def lb0(params: ModelParams, seg: SegmentFeatures, resp: Responsibilities) -> float:
    """The simplified bound Σ_t Σ_i q [log w_i + log N(φ|μ_i, C_i) − log q]."""
    _check_resp(params, seg, resp)
    return float(np.sum(resp.probs * log_joint(params, seg))) + responsibility_entropy(resp.probs)


def log_likelihood(params: ModelParams, seg: SegmentFeatures) -> float:
    """Exact GMM log-likelihood Σ_t log Σ_i w_i N(φ_st | μ_i, C_i)."""
    return float(np.sum(logsumexp(log_joint(params, seg), axis=1)))


def global_mean(segs: Sequence[SegmentFeatures]) -> np.ndarray:
    total = sum(seg.num_frames for seg in segs)
    return sum(np.asarray(seg.frames, dtype=np.float64).sum(axis=0) for seg in segs) / total


def global_variance(segs: Sequence[SegmentFeatures]) -> np.ndarray:
    """Pooled per-dimension variance of all frames."""
    g = global_mean(segs)
    total = sum(seg.num_frames for seg in segs)
    return sum(np.sum((np.asarray(seg.frames, dtype=np.float64) - g) ** 2, axis=0) for seg in segs) / total


def global_covariance(segs: Sequence[SegmentFeatures]) -> np.ndarray:
    g = global_mean(segs)
    total = sum(seg.num_frames for seg in segs)
    acc = np.zeros((g.size, g.size))
    for seg in segs:
        diff = np.asarray(seg.frames, dtype=np.float64) - g
        acc += diff.T @ diff
    return acc / total


def floor_covariances(covs: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Clamp variances (diagonal) or eigenvalues (full) from below."""
    covs = np.array(covs, dtype=np.float64, copy=True)
    if covs.ndim == 2:
        return np.maximum(covs, floor[None, :])
    lowest = float(np.min(floor))
    for i in range(covs.shape[0]):
        sym = 0.5 * (covs[i] + covs[i].T)
        evals, evecs = np.linalg.eigh(sym)
        if evals.min() < lowest:
            sym = (evecs * np.maximum(evals, lowest)) @ evecs.T
            sym = 0.5 * (sym + sym.T)
        covs[i] = sym
    return covs


def _moments(
    seg: SegmentFeatures, resp: Responsibilities, center: np.ndarray, mode: CovarianceMode
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(seg.frames, dtype=np.float64) - center
    q = resp.probs
    n = q.sum(axis=0)
    s1 = q.T @ x
    if mode is CovarianceMode.DIAGONAL:
        s2 = q.T @ (x * x)
    else:
        s2 = np.einsum("tn,td,te->nde", q, x, x)
    return n, s1, s2


def _add_moments(a, b):
    return a[0] + b[0], a[1] + b[1], a[2] + b[2]


def ubm_mstep(
    segs: Sequence[SegmentFeatures],
    resps: Sequence[Responsibilities],
    mode: CovarianceMode = CovarianceMode.DIAGONAL,
    floor: VarianceFloor | np.ndarray = VarianceFloor(),
    ivector_dim: int = 1,
    min_mass: float = 1e-8,
    threads: int = 1,
    reproducible: bool = True,
) -> ModelParams:
    """Closed-form maximizer of Σ_s LB⁰_s over (w, μ, C) at fixed responsibilities.

    Returns a model with all loadings zero.
    """
    if len(segs) != len(resps) or not segs:
        raise DataError(f"{len(segs)} segments vs {len(resps)} responsibility sets")
    n_comp = resps[0].num_components
    d = segs[0].dim
    for seg, resp in zip(segs, resps):
        if seg.dim != d or resp.probs.shape != (seg.num_frames, n_comp):
            raise DimensionMismatchError(f"segment {seg.segment_id} does not conform to D={d}, N={n_comp}")

    center = global_mean(segs)
    shape2 = (n_comp, d) if mode is CovarianceMode.DIAGONAL else (n_comp, d, d)
    zero = (np.zeros(n_comp), np.zeros((n_comp, d)), np.zeros(shape2))
    n, s1, s2 = map_reduce(
        lambda pair: _moments(pair[0], pair[1], center, mode),
        list(zip(segs, resps)),
        _add_moments,
        zero,
        threads=threads,
        reproducible=reproducible,
    )
    for i in range(n_comp):
        if not n[i] > min_mass:
            raise DegenerateComponentError(i, float(n[i]))

    mu_c = s1 / n[:, None]
    if mode is CovarianceMode.DIAGONAL:
        covs = s2 / n[:, None] - mu_c * mu_c
    else:
        covs = s2 / n[:, None, None] - np.einsum("nd,ne->nde", mu_c, mu_c)
    if isinstance(floor, VarianceFloor):
        floor = floor.vector(global_variance(segs))
    covs = floor_covariances(covs, floor)
    weights = n / n.sum()
    return ModelParams(weights, center + mu_c, covs, np.zeros((n_comp, d, ivector_dim)))


def initial_ubm(
    segs: Sequence[SegmentFeatures],
    num_components: int,
    mode: CovarianceMode,
    seed: int,
    floor: VarianceFloor = VarianceFloor(),
    ivector_dim: int = 1,
) -> ModelParams:
    """N distinct seeded frames as means, global covariance, uniform weights."""
    frames = np.concatenate([np.asarray(seg.frames, dtype=np.float64) for seg in segs], axis=0)
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.choice(frames.shape[0], size=num_components, replace=False)
    floor_vec = floor.vector(global_variance(segs))
    if mode is CovarianceMode.DIAGONAL:
        cov = np.maximum(global_variance(segs), floor_vec)
        covs = np.tile(cov, (num_components, 1))
    else:
        cov = floor_covariances(global_covariance(segs)[None], floor_vec)[0]
        covs = np.tile(cov, (num_components, 1, 1))
    d = frames.shape[1]
    weights = np.full(num_components, 1.0 / num_components)
    return ModelParams(weights / weights.sum(), frames[picks], covs, np.zeros((num_components, d, ivector_dim)))


def _reseed(
    params: ModelParams,
    segs: Sequence[SegmentFeatures],
    resps: Sequence[Responsibilities],
    rng: np.random.Generator,
    min_mass: float,
    floor: VarianceFloor,
) -> list[Responsibilities]:
    """Move starving components onto random frames; returns the adjusted alignment."""
    mass = sum(resp.probs.sum(axis=0) for resp in resps)
    starving = [i for i in range(params.dims.N) if not mass[i] > min_mass]
    frames = np.concatenate([np.asarray(seg.frames, dtype=np.float64) for seg in segs], axis=0)
    means = np.array(params.means)
    covs = np.array(params.covariances)
    weights = np.array(params.weights)
    fallback = initial_ubm(segs, 1, params.mode, 0, floor).covariances[0]
    for i in starving:
        warnings.warn(f"component {i} has mass {mass[i]:.3g}; reseeding it on a random frame", stacklevel=3)
        means[i] = frames[rng.integers(frames.shape[0])]
        covs[i] = fallback
        weights[i] = 1.0 / params.dims.N
    reseeded = ModelParams(weights / weights.sum(), means, covs, params.loadings)
    return [align(reseeded, seg) for seg in segs]


def train_ubm(
    segs: Sequence[SegmentFeatures],
    num_components: int,
    mode: CovarianceMode = CovarianceMode.DIAGONAL,
    iterations: int = 10,
    seed: int = 0,
    floor: VarianceFloor = VarianceFloor(),
    min_mass: float = 1e-8,
    empty_policy: EmptyComponentPolicy = EmptyComponentPolicy.ERROR,
    ivector_dim: int = 1,
    threads: int = 1,
    reproducible: bool = True,
    progress: ProgressFn | None = None,
) -> tuple[ModelParams, list[float]]:
    """EM training of an ordinary GMM; returns the model and the LB⁰ trace.

    The trace holds one value per iteration plus the value at the final model.
    """
    if not segs:
        raise DataError("cannot train a UBM on an empty dataset")
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    total = sum(seg.num_frames for seg in segs)
    if num_components < 1 or num_components > total:
        raise DataError(f"N={num_components} must lie in [1, {total}] (total frames)")

    params = initial_ubm(segs, num_components, mode, seed, floor, ivector_dim)
    floor_vec = floor.vector(global_variance(segs))
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    trace: list[float] = []

    def bound(p: ModelParams) -> tuple[list[Responsibilities], float]:
        resps = map_segments(lambda seg: align(p, seg), segs, threads)
        value = ordered_sum(log_likelihood(p, seg) for seg in segs)
        return resps, value

    for it in range(iterations):
        resps, value = bound(params)
        trace.append(value)
        if progress is not None:
            progress(it, "ubm", value)
        try:
            params = ubm_mstep(segs, resps, mode, floor_vec, ivector_dim, min_mass, threads, reproducible)
        except DegenerateComponentError:
            if empty_policy is not EmptyComponentPolicy.RESEED:
                raise
            resps = _reseed(params, segs, resps, rng, min_mass, floor)
            params = ubm_mstep(segs, resps, mode, floor_vec, ivector_dim, min_mass, threads, reproducible)

    _, value = bound(params)
    trace.append(value)
    if progress is not None:
        progress(iterations, "ubm", value)
    return params, trace
