"""Domain types, enums and result records shared across vbivec."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np

from vbivec.errors import ConfigError, DimensionMismatchError, NotPositiveDefiniteError

WEIGHT_SUM_TOL = 1e-12
ROW_SUM_TOL = 1e-6


class CovarianceMode(str, Enum):
    DIAGONAL = "diagonal"
    FULL = "full"


class EmptyComponentPolicy(str, Enum):
    ERROR = "error"
    RESEED = "reseed"


class Recipe(str, Enum):
    CLASSICAL = "classical"
    PHONETIC = "phonetic"
    PHONETIC_JOINT = "phonetic-joint"
    CALIBRATED = "calibrated"
    VBEM = "vbem"

    @property
    def uses_posteriors(self) -> bool:
        """True when responsibilities come from externally supplied posterior files."""
        return self in (Recipe.PHONETIC, Recipe.PHONETIC_JOINT, Recipe.CALIBRATED)

    @property
    def default_update_u(self) -> bool:
        return self in (Recipe.PHONETIC_JOINT, Recipe.CALIBRATED)


def _frozen_array(values: Any, dtype: Any = np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelDims:
    N: int
    D: int
    M: int

    def __post_init__(self) -> None:
        for name in ("N", "D", "M"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise DimensionMismatchError(f"{name} must be a positive integer, got {value}")


@dataclass(frozen=True)
class ModelParams:
    """The generative model Λ = (U, T).

    ``covariances`` is (N, D) in diagonal mode and (N, D, D) in full mode;
    ``loadings`` is (N, D, M).
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    loadings: np.ndarray
    dims: ModelDims = field(init=False)

    def __post_init__(self) -> None:
        weights = _frozen_array(self.weights)
        means = _frozen_array(self.means)
        covs = _frozen_array(self.covariances)
        loadings = _frozen_array(self.loadings)

        if weights.ndim != 1 or means.ndim != 2 or loadings.ndim != 3:
            raise DimensionMismatchError(
                f"bad parameter ranks: weights {weights.shape}, means {means.shape}, loadings {loadings.shape}"
            )
        n, d = means.shape
        m = loadings.shape[2]
        dims = ModelDims(n, d, m)
        if weights.shape != (n,):
            raise DimensionMismatchError(f"weights shape {weights.shape} != ({n},)")
        if loadings.shape != (n, d, m):
            raise DimensionMismatchError(f"loadings shape {loadings.shape} != ({n}, {d}, M)")
        if covs.shape not in ((n, d), (n, d, d)):
            raise DimensionMismatchError(f"covariances shape {covs.shape} fits neither ({n}, {d}) nor ({n}, {d}, {d})")

        for name, arr in (("weights", weights), ("means", means), ("covariances", covs), ("loadings", loadings)):
            if not np.all(np.isfinite(arr)):
                raise DimensionMismatchError(f"{name} contain non-finite values")
        if np.any(weights <= 0.0):
            raise DimensionMismatchError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise DimensionMismatchError(f"weights sum to {weights.sum()!r}, not 1")

        if covs.ndim == 2:
            bad = np.argwhere(covs <= 0.0)
            if bad.size:
                raise NotPositiveDefiniteError(f"component {bad[0][0]} has a non-positive variance")
        else:
            for i in range(n):
                if not np.allclose(covs[i], covs[i].T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(covs[i]).max())):
                    raise NotPositiveDefiniteError(f"covariance of component {i} is not symmetric")
                try:
                    np.linalg.cholesky(covs[i])
                except np.linalg.LinAlgError as e:
                    raise NotPositiveDefiniteError(f"covariance of component {i} is not positive definite: {e}") from e

        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "loadings", loadings)
        object.__setattr__(self, "dims", dims)

    @property
    def mode(self) -> CovarianceMode:
        return CovarianceMode.DIAGONAL if self.covariances.ndim == 2 else CovarianceMode.FULL

    def covariance_matrix(self, i: int) -> np.ndarray:
        """Component i's covariance as a dense D x D matrix."""
        if self.mode is CovarianceMode.DIAGONAL:
            return np.diag(self.covariances[i])
        return np.array(self.covariances[i])

    def with_loadings(self, loadings: np.ndarray) -> ModelParams:
        return replace(self, loadings=loadings)

    def ubm(self) -> ModelParams:
        """The same U with all factor loadings set to zero."""
        return self.with_loadings(np.zeros_like(self.loadings))


@dataclass(frozen=True)
class SegmentFeatures:
    frames: np.ndarray
    segment_id: str

    def __post_init__(self) -> None:
        frames = np.array(self.frames, copy=True)
        if frames.dtype not in (np.float32, np.float64):
            frames = frames.astype(np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DimensionMismatchError(f"segment {self.segment_id}: frames must be a non-empty T x D matrix, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DimensionMismatchError(f"segment {self.segment_id}: frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SyntheticTruth:
    ivector: np.ndarray
    path: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "ivector", _frozen_array(self.ivector))
        object.__setattr__(self, "path", _frozen_array(self.path, dtype=np.int64))

    def one_hot(self, num_components: int) -> np.ndarray:
        """The hard path as a T_s x N indicator matrix."""
        if self.path.size and (self.path.min() < 0 or self.path.max() >= num_components):
            raise DimensionMismatchError(f"path holds states outside [0, {num_components})")
        gamma = np.zeros((self.path.size, num_components))
        gamma[np.arange(self.path.size), self.path] = 1.0
        return gamma


@dataclass(frozen=True)
class Responsibilities:
    """Per-frame categorical distributions q_st over the N states."""

    probs: np.ndarray
    segment_id: str

    def __post_init__(self) -> None:
        probs = _frozen_array(self.probs)
        if probs.ndim != 2:
            raise DimensionMismatchError(f"responsibilities must be T x N, got {probs.shape}")
        if not np.all(np.isfinite(probs)) or probs.min(initial=0.0) < 0.0 or probs.max(initial=0.0) > 1.0 + 1e-12:
            raise DimensionMismatchError(f"segment {self.segment_id}: responsibilities outside [0, 1]")
        dev = np.abs(probs.sum(axis=1) - 1.0)
        if dev.size and dev.max() > ROW_SUM_TOL:
            raise DimensionMismatchError(
                f"segment {self.segment_id}: frame {int(dev.argmax())} responsibilities sum to {probs[dev.argmax()].sum()!r}"
            )
        object.__setattr__(self, "probs", probs)

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def num_components(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class RawPosteriors:
    """Recognizer posteriors q̃ held as floored logs."""

    log_probs: np.ndarray
    segment_id: str

    def __post_init__(self) -> None:
        log_probs = _frozen_array(self.log_probs)
        if log_probs.ndim != 2 or not np.all(np.isfinite(log_probs)):
            raise DimensionMismatchError(f"segment {self.segment_id}: raw log posteriors must be a finite T x N matrix")
        object.__setattr__(self, "log_probs", log_probs)

    @classmethod
    def from_probs(
        cls, probs: np.ndarray, segment_id: str, floor: float = 1e-10, tol: float = 1e-4
    ) -> RawPosteriors:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2:
            raise DimensionMismatchError(f"segment {segment_id}: posteriors must be T x N, got {probs.shape}")
        if np.any(probs < 0.0):
            raise DimensionMismatchError(f"segment {segment_id}: negative posterior probability")
        dev = np.abs(probs.sum(axis=1) - 1.0)
        if dev.size and dev.max() > tol:
            raise DimensionMismatchError(
                f"segment {segment_id}: frame {int(dev.argmax())} posteriors sum to {probs[dev.argmax()].sum()!r}"
            )
        return cls(np.log(np.maximum(probs, floor)), segment_id)

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def num_components(self) -> int:
        return self.log_probs.shape[1]


@dataclass(frozen=True)
class CalibrationParams:
    """Scale α (scalar or per-component) and zero-sum offsets β."""

    alpha: float | np.ndarray
    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = np.array(self.beta, dtype=np.float64, copy=True)
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ConfigError("beta must be a finite vector")
        # re-centering an already canonical beta would perturb its last bits
        if beta.size and abs(beta.mean()) > 1e-12 * max(1.0, float(np.abs(beta).max())):
            beta = beta - beta.mean()
        beta.setflags(write=False)

        alpha = self.alpha
        if np.ndim(alpha) == 0:
            alpha = float(alpha)
            if not np.isfinite(alpha) or alpha <= 0.0:
                raise ConfigError(f"alpha must be positive, got {alpha}")
        else:
            alpha = _frozen_array(alpha)
            if alpha.shape != beta.shape:
                raise ConfigError(f"diagonal alpha shape {alpha.shape} != beta shape {beta.shape}")
            if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
                raise ConfigError("every diagonal alpha entry must be positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def identity(cls, num_components: int, diagonal: bool = False) -> CalibrationParams:
        alpha: float | np.ndarray = np.ones(num_components) if diagonal else 1.0
        return cls(alpha, np.zeros(num_components))

    @property
    def is_diagonal(self) -> bool:
        return np.ndim(self.alpha) == 1

    @property
    def num_components(self) -> int:
        return self.beta.shape[0]


@dataclass
class PhaseRecord:
    iteration: int
    phase: str
    elbo: float
    delta: float
    seconds: float


@dataclass
class TrainReport:
    recipe: Recipe
    elbo_trace: list[float] = field(default_factory=list)
    phases: list[PhaseRecord] = field(default_factory=list)
    total_frames: int = 0
    stopped_early: bool = False
    calibration: CalibrationParams | None = None
    calibration_log: list[dict[str, Any]] = field(default_factory=list)

    def worst_relative_delta(self) -> float:
        """Most negative phase delta relative to |Σ elbo|; 0 when every phase ascended."""
        worst = 0.0
        for record in self.phases:
            scale = max(abs(record.elbo), 1.0)
            worst = min(worst, record.delta / scale)
        return worst
