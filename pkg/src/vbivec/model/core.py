"""Per-segment GMMs of the i-vector model and a seeded generative sampler."""

from __future__ import annotations

import hashlib
import struct

import numpy as np
from scipy.special import softmax

from vbivec.errors import ConfigError, DimensionMismatchError
from vbivec.state import CalibrationParams, CovarianceMode, ModelDims, ModelParams, SegmentFeatures, SyntheticTruth

_U64 = 0xFFFFFFFFFFFFFFFF

# substream keys inside one segment
IVECTOR_STREAM = 0
PATH_STREAM = 1
NOISE_STREAM = 2
POSTERIOR_STREAM = 3


def gmm_at(params: ModelParams, x: np.ndarray) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """The GMM for i-vector x: component i is (w_i, μ_i + T_i x, C_i)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dims.M,):
        raise DimensionMismatchError(f"i-vector shape {x.shape} != ({params.dims.M},)")
    if not np.all(np.isfinite(x)):
        raise DimensionMismatchError("i-vector contains non-finite values")
    shifted = params.means + np.einsum("ndm,m->nd", params.loadings, x)
    return [
        (float(params.weights[i]), shifted[i], np.array(params.covariances[i]))
        for i in range(params.dims.N)
    ]


def derive_seed(master_seed: int, index: int) -> int:
    """Seed for segment ``index``: blake2b-64 of (master_seed XOR index)."""
    mixed = (int(master_seed) ^ int(index)) & _U64
    digest = hashlib.blake2b(struct.pack("<Q", mixed), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, key: int) -> np.random.Generator:
    """Independent PCG64 generator for one named substream of a segment seed."""
    seq = np.random.SeedSequence(int(seed) & _U64, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(seq))


def draw_frames(
    params: ModelParams,
    ivector: np.ndarray,
    num_frames: int,
    path_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a state path from w and frames from N(μ_i + T_i x, C_i)."""
    n, d = params.dims.N, params.dims.D
    path = path_rng.choice(n, size=num_frames, p=params.weights)
    centers = params.means + np.einsum("ndm,m->nd", params.loadings, ivector)
    z = noise_rng.standard_normal((num_frames, d))
    if params.mode is CovarianceMode.DIAGONAL:
        frames = centers[path] + np.sqrt(params.covariances)[path] * z
    else:
        chol = np.linalg.cholesky(params.covariances)
        frames = centers[path] + np.einsum("tde,te->td", chol[path], z)
    return frames, path


def sample_segment(
    params: ModelParams, num_frames: int, seed: int, segment_id: str = "seg"
) -> tuple[SegmentFeatures, SyntheticTruth]:
    """Sample x_s ~ N(0, I), then every frame from the GMM at x_s."""
    if num_frames < 1:
        raise ConfigError(f"num_frames must be positive, got {num_frames}")
    x = substream(seed, IVECTOR_STREAM).standard_normal(params.dims.M)
    frames, path = draw_frames(
        params, x, num_frames, substream(seed, PATH_STREAM), substream(seed, NOISE_STREAM)
    )
    return SegmentFeatures(frames, segment_id), SyntheticTruth(x, path)


def segment_name(index: int) -> str:
    return f"seg{index:05d}"


def sample_dataset(
    params: ModelParams, num_segments: int, frames_per_segment: int, seed: int
) -> list[tuple[SegmentFeatures, SyntheticTruth]]:
    """Independent segments, segment k drawn with ``derive_seed(seed, k)``."""
    if num_segments < 1 or frames_per_segment < 1:
        raise ConfigError("num_segments and frames_per_segment must be positive")
    return [
        sample_segment(params, frames_per_segment, derive_seed(seed, k), segment_name(k))
        for k in range(num_segments)
    ]


def random_model(
    dims: ModelDims,
    seed: int,
    mode: CovarianceMode = CovarianceMode.DIAGONAL,
    mean_scale: float = 3.0,
    loading_scale: float = 1.0,
    variance_range: tuple[float, float] = (0.5, 1.5),
) -> ModelParams:
    """A random but well-conditioned model for synthetic data."""
    rng = np.random.Generator(np.random.PCG64(int(seed) & _U64))
    weights = rng.dirichlet(np.full(dims.N, 5.0))
    weights = weights / weights.sum()
    means = rng.normal(0.0, mean_scale, size=(dims.N, dims.D))
    low, high = variance_range
    variances = rng.uniform(low, high, size=(dims.N, dims.D))
    if mode is CovarianceMode.DIAGONAL:
        covs = variances
    else:
        mix = rng.normal(0.0, 1.0, size=(dims.N, dims.D, dims.D))
        covs = 0.5 * np.einsum("nij,nkj->nik", mix, mix) / dims.D
        covs = covs + np.stack([np.diag(v) for v in variances])
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    loadings = rng.normal(0.0, loading_scale, size=(dims.N, dims.D, dims.M))
    return ModelParams(weights, means, covs, loadings)


def noisy_posteriors(
    path: np.ndarray, num_components: int, temperature: float, rng: np.random.Generator
) -> np.ndarray:
    """Recognizer-like posteriors: softmax((one-hot + ε) / temperature), ε ~ N(0, 1) per entry.

    Small temperatures give near one-hot rows; large ones flatten them.
    """
    if temperature <= 0.0:
        raise ConfigError(f"confusion temperature must be positive, got {temperature}")
    path = np.asarray(path, dtype=np.int64)
    logits = rng.standard_normal((path.size, num_components))
    logits[np.arange(path.size), path] += 1.0
    return softmax(logits / temperature, axis=1)


def planted_posteriors(log_targets: np.ndarray, cal: CalibrationParams) -> np.ndarray:
    """Raw posteriors that ``cal`` maps exactly onto ``softmax(log_targets)``.

    Inverts softmax(α·log q̃ + β): q̃ = softmax((log r − β) / α), row by row.
    """
    log_targets = np.asarray(log_targets, dtype=np.float64)
    if log_targets.ndim != 2 or log_targets.shape[1] != cal.num_components:
        raise DimensionMismatchError(
            f"targets {log_targets.shape} do not match a calibration over N={cal.num_components}"
        )
    return softmax((log_targets - cal.beta) / np.asarray(cal.alpha), axis=1)
