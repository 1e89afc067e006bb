"""Shared fixtures: the standard synthetic set and small random models."""

from __future__ import annotations

import numpy as np
import pytest

from vbivec.model.core import random_model, sample_dataset
from vbivec.model.gmm import align
from vbivec.state import CovarianceMode, ModelDims, ModelParams, RawPosteriors, Responsibilities, SegmentFeatures

STANDARD_DIMS = ModelDims(4, 5, 2)
STANDARD_SEGMENTS = 200
STANDARD_FRAMES = 100
STANDARD_SEED = 20240607


class StandardSet:
    """The standard synthetic dataset (N=4, D=5, M=2, 200 x 100 frames)."""

    def __init__(self) -> None:
        self.model = random_model(STANDARD_DIMS, STANDARD_SEED)
        data = sample_dataset(self.model, STANDARD_SEGMENTS, STANDARD_FRAMES, STANDARD_SEED)
        self.segments: list[SegmentFeatures] = [seg for seg, _ in data]
        self.truths = [truth for _, truth in data]

    def oracle_posteriors(self) -> list[RawPosteriors]:
        return [
            RawPosteriors.from_probs(t.one_hot(STANDARD_DIMS.N), seg.segment_id)
            for seg, t in zip(self.segments, self.truths)
        ]

    def oracle_responsibilities(self) -> list[Responsibilities]:
        return [Responsibilities(t.one_hot(STANDARD_DIMS.N), seg.segment_id) for seg, t in zip(self.segments, self.truths)]


@pytest.fixture(scope="session")
def standard_set() -> StandardSet:
    return StandardSet()


@pytest.fixture
def small_model() -> ModelParams:
    return random_model(ModelDims(3, 4, 2), seed=11)


@pytest.fixture
def full_model() -> ModelParams:
    return random_model(ModelDims(3, 3, 2), seed=12, mode=CovarianceMode.FULL)


@pytest.fixture
def small_data(small_model: ModelParams) -> list[SegmentFeatures]:
    return [seg for seg, _ in sample_dataset(small_model, 12, 40, seed=5)]


def aligned(params: ModelParams, segs: list[SegmentFeatures]) -> list[Responsibilities]:
    return [align(params, seg) for seg in segs]


def random_responsibilities(rng: np.random.Generator, num_frames: int, num_components: int, segment_id: str = "s") -> Responsibilities:
    probs = rng.dirichlet(np.ones(num_components), size=num_frames)
    probs = probs / probs.sum(axis=1, keepdims=True)
    return Responsibilities(probs, segment_id)
