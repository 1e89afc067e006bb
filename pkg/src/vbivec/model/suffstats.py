"""Baum-Welch statistics per segment and their accumulation across a dataset."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from vbivec.errors import DimensionMismatchError, StaleStatisticsError
from vbivec.parallel import map_reduce, map_segments
from vbivec.state import CovarianceMode, Responsibilities, SegmentFeatures


def means_fingerprint(means: np.ndarray) -> str:
    """Short digest identifying the centering means."""
    data = np.ascontiguousarray(np.asarray(means, dtype="<f8"))
    digest = hashlib.blake2b(data.tobytes(), digest_size=8)
    digest.update(str(data.shape).encode())
    return digest.hexdigest()


@dataclass(frozen=True)
class SegmentStats:
    """Zero-, first- and second-order statistics centered on μ.

    ``second_order`` is (N, D) in diagonal mode and (N, D, D) in full mode.
    Merged aggregates keep a segment id only if both sides agree on it.
    """

    zero_order: np.ndarray
    first_order: np.ndarray
    second_order: np.ndarray
    fingerprint: str
    num_frames: int
    segment_id: str | None = None

    @property
    def mode(self) -> CovarianceMode:
        return CovarianceMode.DIAGONAL if self.second_order.ndim == 2 else CovarianceMode.FULL

    @classmethod
    def zeros(cls, num_components: int, dim: int, mode: CovarianceMode, fingerprint: str) -> SegmentStats:
        shape2 = (num_components, dim) if mode is CovarianceMode.DIAGONAL else (num_components, dim, dim)
        return cls(np.zeros(num_components), np.zeros((num_components, dim)), np.zeros(shape2), fingerprint, 0)


def accumulate(
    seg: SegmentFeatures,
    resp: Responsibilities,
    means: np.ndarray,
    mode: CovarianceMode = CovarianceMode.DIAGONAL,
) -> SegmentStats:
    """n_i = Σ_t q, f_i = Σ_t q (φ − μ_i), S_i = Σ_t q (φ − μ_i)(φ − μ_i)' in float64."""
    means = np.asarray(means, dtype=np.float64)
    frames = np.asarray(seg.frames, dtype=np.float64)
    n_comp, dim = means.shape
    if frames.shape[1] != dim or resp.probs.shape != (frames.shape[0], n_comp):
        raise DimensionMismatchError(
            f"segment {seg.segment_id}: frames {frames.shape}, responsibilities {resp.probs.shape}, means {means.shape}"
        )
    q = resp.probs
    zero = q.sum(axis=0)
    first = np.empty((n_comp, dim))
    second = np.empty((n_comp, dim) if mode is CovarianceMode.DIAGONAL else (n_comp, dim, dim))
    for i in range(n_comp):
        diff = frames - means[i]
        weighted = q[:, i, None] * diff
        first[i] = weighted.sum(axis=0)
        if mode is CovarianceMode.DIAGONAL:
            second[i] = np.sum(weighted * diff, axis=0)
        else:
            second[i] = weighted.T @ diff
    return SegmentStats(zero, first, second, means_fingerprint(means), frames.shape[0], seg.segment_id)


def merge(a: SegmentStats, b: SegmentStats) -> SegmentStats:
    """Elementwise sum of two statistics sharing dims and centering."""
    if a.fingerprint != b.fingerprint:
        raise StaleStatisticsError(f"cannot merge statistics centered on different means ({a.fingerprint} vs {b.fingerprint})")
    if a.second_order.shape != b.second_order.shape:
        raise DimensionMismatchError(f"statistics shapes differ: {a.second_order.shape} vs {b.second_order.shape}")
    ids = {a.segment_id, b.segment_id} - {None}
    return SegmentStats(
        a.zero_order + b.zero_order,
        a.first_order + b.first_order,
        a.second_order + b.second_order,
        a.fingerprint,
        a.num_frames + b.num_frames,
        ids.pop() if len(ids) == 1 else None,
    )


def accumulate_dataset(
    segs: Sequence[SegmentFeatures],
    resps: Sequence[Responsibilities],
    means: np.ndarray,
    mode: CovarianceMode = CovarianceMode.DIAGONAL,
    threads: int = 1,
) -> list[SegmentStats]:
    """Per-segment statistics, in dataset order."""
    if len(segs) != len(resps):
        raise DimensionMismatchError(f"{len(segs)} segments vs {len(resps)} responsibility sets")
    return map_segments(lambda pair: accumulate(pair[0], pair[1], means, mode), list(zip(segs, resps)), threads)


def total(
    stats: Sequence[SegmentStats],
    threads: int = 1,
    reproducible: bool = True,
) -> SegmentStats:
    """Dataset aggregate; the fold runs in list order when ``reproducible``."""
    if not stats:
        raise DimensionMismatchError("no statistics to merge")
    first = stats[0]
    zero = SegmentStats.zeros(first.zero_order.size, first.first_order.shape[1], first.mode, first.fingerprint)
    return map_reduce(lambda s: s, list(stats), merge, zero, threads=threads, reproducible=reproducible)
