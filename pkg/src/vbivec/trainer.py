"""Extractor training recipes: classical, phonetic, phonetic-joint, calibrated and full VBEM.

Every recipe is a fixed sequence of phases per outer iteration (see
:func:`recipe_phases`). Each phase maximizes Σ_s L_s over one block of
variables, so the bound recorded after every phase never decreases.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import log_softmax

from vbivec.config import RunConfig
from vbivec.errors import ConfigError, RecipeMismatchError, SingularMomentError, StaleStatisticsError
from vbivec.model.calibration import apply_calibration, calib_objective, optimize_calibration
from vbivec.model.gmm import VarianceFloor, align, floor_covariances, global_variance, ubm_mstep
from vbivec.model.ivector import (
    IVectorPosterior,
    PrecomputedProjections,
    elbo,
    expected_likelihoods,
    optimal_responsibilities,
    posterior,
    project,
)
from vbivec.model.suffstats import SegmentStats, accumulate, means_fingerprint
from vbivec.parallel import map_segments, ordered_sum
from vbivec.state import (
    CalibrationParams,
    CovarianceMode,
    ModelDims,
    ModelParams,
    PhaseRecord,
    RawPosteriors,
    Recipe,
    Responsibilities,
    SegmentFeatures,
    TrainReport,
)

PHASE_INIT = "init"
PHASE_POSTERIOR = "posterior"
PHASE_CALIBRATION = "calibration"
PHASE_RESPONSIBILITIES = "responsibilities"
PHASE_LOADINGS = "loadings"
PHASE_UBM = "ubm"

ProgressFn = Callable[[int, str, float], None]


@dataclass
class TrainConfig:
    recipe: Recipe = Recipe.CLASSICAL
    iterations: int = 10
    update_U: bool | None = None
    update_weights: bool = True
    min_improvement: float = 1e-4
    reproducible_reduction: bool = True
    floor: VarianceFloor = field(default_factory=VarianceFloor)
    min_component_mass: float = 1e-8
    covariance_mode: CovarianceMode = CovarianceMode.DIAGONAL
    ivector_dim: int = 10
    init_seed: int = 0
    init_scale: float | None = None
    calibration_warm_start: bool = True
    diagonal_alpha: bool = False
    calibration_tol: float = 1e-6
    calibration_max_iter: int = 200
    threads: int = 1

    def __post_init__(self) -> None:
        self.recipe = Recipe(self.recipe)
        if self.update_U is None:
            self.update_U = self.recipe.default_update_u
        if self.recipe is Recipe.CLASSICAL and self.update_U:
            raise ConfigError("the classical recipe keeps the UBM fixed; update_U must be false")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.ivector_dim < 1:
            raise ConfigError(f"ivector_dim must be >= 1, got {self.ivector_dim}")
        if self.init_seed < 0:
            raise ConfigError(f"init_seed must be >= 0, got {self.init_seed}")

    @classmethod
    def from_run_config(cls, run: RunConfig, threads: int = 1) -> TrainConfig:
        return cls(
            recipe=run.recipe,
            iterations=run.iterations,
            update_U=run.update_u,
            update_weights=run.update_weights,
            min_improvement=run.min_improvement,
            reproducible_reduction=run.reproducible,
            floor=VarianceFloor(run.variance_floor_abs, run.variance_floor_frac),
            min_component_mass=run.min_component_mass,
            covariance_mode=run.covariance_mode,
            ivector_dim=run.ivector_dim,
            init_seed=run.seed,
            init_scale=run.init_scale,
            calibration_warm_start=run.calibration_warm_start,
            diagonal_alpha=run.diagonal_alpha,
            calibration_tol=run.calibration_tol,
            calibration_max_iter=run.calibration_max_iter,
            threads=threads,
        )


def recipe_phases(recipe: Recipe, update_u: bool) -> list[str]:
    """Ordered phases of one outer iteration."""
    phases = [PHASE_POSTERIOR]
    if recipe is Recipe.CALIBRATED:
        phases.append(PHASE_CALIBRATION)
    if recipe is Recipe.VBEM:
        phases.append(PHASE_RESPONSIBILITIES)
    phases.append(PHASE_LOADINGS)
    if update_u:
        phases.append(PHASE_UBM)
    return phases


# ── M-steps ──


def _check_fresh(stats: Sequence[SegmentStats], params: ModelParams) -> None:
    current = means_fingerprint(params.means)
    for s in stats:
        if s.fingerprint != current:
            raise StaleStatisticsError(f"segment {s.segment_id}: statistics were centered on other means")


def _stacked(
    stats: Sequence[SegmentStats], posts: Sequence[IVectorPosterior]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if len(stats) != len(posts) or not stats:
        raise RecipeMismatchError(f"{len(stats)} statistics vs {len(posts)} posteriors")
    n_all = np.stack([s.zero_order for s in stats])
    f_all = np.stack([s.first_order for s in stats])
    m_all = np.stack([p.mean for p in posts])
    xx_all = np.stack([p.second_moment() for p in posts])
    return n_all, f_all, m_all, xx_all


def _solve_moments(moments: np.ndarray, rhs: np.ndarray, mass: np.ndarray, min_mass: float) -> np.ndarray:
    """Row-wise X_i = rhs_i · moments_i⁻¹ for every component."""
    out = np.empty_like(rhs)
    for i in range(moments.shape[0]):
        if not mass[i] > min_mass:
            raise SingularMomentError(i, f"total mass {mass[i]:.3g}")
        try:
            solved = scipy.linalg.solve(moments[i], rhs[i].T, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SingularMomentError(i, str(e)) from e
        if not np.all(np.isfinite(solved)):
            raise SingularMomentError(i, "non-finite solution")
        out[i] = solved.T
    return out


def t_mstep(
    stats: Sequence[SegmentStats],
    posts: Sequence[IVectorPosterior],
    params: ModelParams,
    min_mass: float = 1e-8,
) -> np.ndarray:
    """T_i = B_i A_i⁻¹ with B_i = Σ_s f_si m_s', A_i = Σ_s n_si (Σ_s + m_s m_s')."""
    _check_fresh(stats, params)
    n_all, f_all, m_all, xx_all = _stacked(stats, posts)
    moments = np.einsum("sn,sab->nab", n_all, xx_all)
    rhs = np.einsum("snd,sa->nda", f_all, m_all)
    return _solve_moments(moments, rhs, n_all.sum(axis=0), min_mass)


def u_mstep(
    stats: Sequence[SegmentStats],
    posts: Sequence[IVectorPosterior],
    params: ModelParams,
    update_weights: bool = True,
    update_loadings: bool = True,
    floor: np.ndarray | None = None,
    min_mass: float = 1e-8,
) -> ModelParams:
    """Joint closed-form update of (μ, T, C) and optionally w.

    Uses augmented loadings [μ_i − μ_i⁰, T_i] against E[x̃x̃'] with x̃ = [1, x].
    With ``update_loadings=False`` T is held fixed and only the mean shift is solved.
    """
    _check_fresh(stats, params)
    n_all, f_all, m_all, xx_all = _stacked(stats, posts)
    s_count, n_comp = n_all.shape
    m_dim = params.dims.M

    aug_mean = np.concatenate([np.ones((s_count, 1)), m_all], axis=1)
    aug_moment = np.empty((s_count, m_dim + 1, m_dim + 1))
    aug_moment[:, 0, 0] = 1.0
    aug_moment[:, 0, 1:] = m_all
    aug_moment[:, 1:, 0] = m_all
    aug_moment[:, 1:, 1:] = xx_all

    mass = n_all.sum(axis=0)
    moments = np.einsum("sn,sab->nab", n_all, aug_moment)
    rhs = np.einsum("snd,sa->nda", f_all, aug_mean)

    if update_loadings:
        aug_loadings = _solve_moments(moments, rhs, mass, min_mass)
    else:
        for i in range(n_comp):
            if not mass[i] > min_mass:
                raise SingularMomentError(i, f"total mass {mass[i]:.3g}")
        weighted_mean = moments[:, 1:, 0]
        shift = (rhs[:, :, 0] - np.einsum("ndm,nm->nd", params.loadings, weighted_mean)) / mass[:, None]
        aug_loadings = np.concatenate([shift[:, :, None], params.loadings], axis=2)

    second = sum(s.second_order for s in stats)
    cross = np.einsum("nda,nea->nde", aug_loadings, rhs)
    fitted = np.einsum("nda,nab,neb->nde", aug_loadings, moments, aug_loadings)
    if params.mode is CovarianceMode.DIAGONAL:
        if second.ndim == 3:
            second = np.diagonal(second, axis1=1, axis2=2)
        resid = second - 2.0 * np.diagonal(cross, axis1=1, axis2=2) + np.diagonal(fitted, axis1=1, axis2=2)
        covs = resid / mass[:, None]
    else:
        if second.ndim != 3:
            raise StaleStatisticsError("full-covariance update needs full second-order statistics")
        resid = second - cross - np.swapaxes(cross, 1, 2) + fitted
        covs = resid / mass[:, None, None]
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    if floor is not None:
        covs = floor_covariances(covs, floor)

    weights = mass / mass.sum() if update_weights else params.weights
    means = params.means + aug_loadings[:, :, 0]
    return ModelParams(weights, means, covs, aug_loadings[:, :, 1:])


# ── initialization ──


def default_init_scale(segs: Sequence[SegmentFeatures]) -> float:
    """0.1 × the average per-dimension feature standard deviation."""
    return 0.1 * float(np.mean(np.sqrt(global_variance(segs))))


def init_T(dims: ModelDims, seed: int, scale: float) -> np.ndarray:
    """Seeded i.i.d. N(0, scale²) loadings of shape (N, D, M)."""
    if scale < 0.0:
        raise ConfigError(f"init scale must be non-negative, got {scale}")
    if scale == 0.0:
        return np.zeros((dims.N, dims.D, dims.M))
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.normal(0.0, scale, size=(dims.N, dims.D, dims.M))


def responsibilities_for(
    recipe: Recipe,
    params: ModelParams,
    segs: Sequence[SegmentFeatures],
    raws: Sequence[RawPosteriors] | None = None,
    calibration: CalibrationParams | None = None,
    threads: int = 1,
) -> list[Responsibilities]:
    """Responsibilities under a recipe's policy: UBM alignment or (calibrated) file posteriors."""
    if not recipe.uses_posteriors:
        return map_segments(lambda seg: align(params, seg), segs, threads)
    raws = _check_raws(segs, raws, params.dims.N)
    cal = calibration if (calibration is not None and recipe is Recipe.CALIBRATED) else CalibrationParams.identity(params.dims.N)
    return [apply_calibration(raw, cal) for raw in raws]


def _check_raws(
    segs: Sequence[SegmentFeatures], raws: Sequence[RawPosteriors] | None, num_components: int | None
) -> list[RawPosteriors]:
    if raws is None or len(raws) != len(segs):
        raise RecipeMismatchError("posterior-based recipes need one posterior file per segment")
    for seg, raw in zip(segs, raws):
        if raw.segment_id != seg.segment_id:
            raise RecipeMismatchError(f"posteriors for {raw.segment_id} paired with segment {seg.segment_id}")
        if raw.num_frames != seg.num_frames:
            raise RecipeMismatchError(f"segment {seg.segment_id}: {raw.num_frames} posterior frames vs {seg.num_frames} feature frames")
        if num_components is not None and raw.num_components != num_components:
            raise RecipeMismatchError(f"segment {seg.segment_id}: posteriors have N={raw.num_components}, expected N={num_components}")
    return list(raws)


# ── training loop ──


@dataclass
class _Estate:
    resps: list[Responsibilities]
    stats: list[SegmentStats]
    posts: list[IVectorPosterior]


class _Run:
    """Mutable per-run bookkeeping: current model, E-state, report and timers."""

    def __init__(
        self,
        segs: Sequence[SegmentFeatures],
        config: TrainConfig,
        params: ModelParams,
        resps: list[Responsibilities],
        report: TrainReport,
        progress: ProgressFn | None,
    ):
        self.segs = list(segs)
        self.config = config
        self.params = params
        self.proj: PrecomputedProjections = project(params)
        self.report = report
        self.progress = progress
        stats = self._accumulate(resps)
        self.state = _Estate(resps, stats, self._posteriors(stats))
        self.current = self.bound()

    def _accumulate(self, resps: Sequence[Responsibilities]) -> list[SegmentStats]:
        means, mode = self.params.means, self.params.mode
        return map_segments(
            lambda pair: accumulate(pair[0], pair[1], means, mode),
            list(zip(self.segs, resps)),
            self.config.threads,
        )

    def _posteriors(self, stats: Sequence[SegmentStats]) -> list[IVectorPosterior]:
        proj = self.proj
        return map_segments(lambda s: posterior(s, proj), list(stats), self.config.threads)

    def bound(self) -> float:
        params, proj, st = self.params, self.proj, self.state
        values = map_segments(
            lambda k: elbo(self.segs[k], st.resps[k], st.posts[k], params, st.stats[k], proj),
            list(range(len(self.segs))),
            self.config.threads,
        )
        return ordered_sum(values)

    def set_params(self, params: ModelParams) -> None:
        means_moved = not np.array_equal(params.means, self.params.means)
        self.params = params
        self.proj = project(params)
        if means_moved:
            self.state.stats = self._accumulate(self.state.resps)

    def set_resps(self, resps: list[Responsibilities]) -> None:
        self.state.resps = resps
        self.state.stats = self._accumulate(resps)

    def log_ell(self) -> list[np.ndarray]:
        params, proj, posts = self.params, self.proj, self.state.posts
        return map_segments(
            lambda k: expected_likelihoods(self.segs[k], posts[k], params, proj),
            list(range(len(self.segs))),
            self.config.threads,
        )

    def record(self, iteration: int, phase: str, started: float) -> None:
        value = self.bound()
        self.report.phases.append(PhaseRecord(iteration, phase, value, value - self.current, time.perf_counter() - started))
        self.current = value
        if self.progress is not None:
            self.progress(iteration, phase, value)


def _initial_model(
    segs: Sequence[SegmentFeatures],
    config: TrainConfig,
    init: ModelParams | None,
    raws: Sequence[RawPosteriors] | None,
) -> tuple[ModelParams, list[Responsibilities], CalibrationParams | None]:
    recipe = config.recipe
    cal: CalibrationParams | None = None
    if recipe.uses_posteriors:
        expected_n = init.dims.N if init is not None else None
        raws = _check_raws(segs, raws, expected_n)
        n_comp = raws[0].num_components
        if recipe is Recipe.CALIBRATED:
            cal = CalibrationParams.identity(n_comp, config.diagonal_alpha)
        else:
            cal = CalibrationParams.identity(n_comp)
        resps = [apply_calibration(raw, cal) for raw in raws]
        base = ubm_mstep(
            segs,
            resps,
            config.covariance_mode,
            config.floor,
            config.ivector_dim,
            config.min_component_mass,
            config.threads,
            config.reproducible_reduction,
        )
        if recipe is not Recipe.CALIBRATED:
            cal = None
    else:
        if init is None:
            raise RecipeMismatchError(f"recipe {recipe.value} needs an initial UBM or model")
        base = init
        resps = map_segments(lambda seg: align(init, seg), segs, config.threads)

    dims = ModelDims(base.dims.N, base.dims.D, config.ivector_dim)
    warm = init if init is not None else base
    if warm.loadings.shape == (dims.N, dims.D, dims.M) and np.any(warm.loadings != 0.0):
        loadings = np.array(warm.loadings)
    else:
        scale = config.init_scale if config.init_scale is not None else default_init_scale(segs)
        loadings = init_T(dims, config.init_seed, scale)
    params = ModelParams(base.weights, base.means, base.covariances, loadings)
    return params, resps, cal


def train(
    segs: Sequence[SegmentFeatures],
    config: TrainConfig,
    init: ModelParams | None = None,
    raws: Sequence[RawPosteriors] | None = None,
    progress: ProgressFn | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Run a training recipe; returns the final model and the ascent report.

    Classical and VBEM recipes align against ``init`` (a UBM or a model).
    Posterior-based recipes fit U from the (calibrated) ``raws`` first.
    """
    if not segs:
        raise RecipeMismatchError("cannot train on an empty dataset")
    params, resps, cal = _initial_model(segs, config, init, raws)
    report = TrainReport(recipe=config.recipe, total_frames=sum(seg.num_frames for seg in segs), calibration=cal)
    run = _Run(segs, config, params, resps, report, progress)
    report.elbo_trace.append(run.current)
    if progress is not None:
        progress(0, PHASE_INIT, run.current)

    phases = recipe_phases(config.recipe, bool(config.update_U))
    for iteration in range(1, config.iterations + 1):
        start_value = run.current
        for phase in phases:
            started = time.perf_counter()
            if phase == PHASE_POSTERIOR:
                run.state.posts = run._posteriors(run.state.stats)
            elif phase == PHASE_CALIBRATION:
                cal = _calibration_phase(run, raws, cal, iteration)
                report.calibration = cal
            elif phase == PHASE_RESPONSIBILITIES:
                log_ells = run.log_ell()
                run.set_resps([optimal_responsibilities(le, seg.segment_id) for le, seg in zip(log_ells, segs)])
            elif phase == PHASE_LOADINGS:
                loadings = t_mstep(run.state.stats, run.state.posts, run.params, config.min_component_mass)
                run.set_params(run.params.with_loadings(loadings))
            elif phase == PHASE_UBM:
                floor_vec = config.floor.vector(global_variance(segs))
                run.set_params(
                    u_mstep(
                        run.state.stats,
                        run.state.posts,
                        run.params,
                        update_weights=config.update_weights,
                        floor=floor_vec,
                        min_mass=config.min_component_mass,
                    )
                )
            run.record(iteration, phase, started)
        report.elbo_trace.append(run.current)
        if run.current - start_value < config.min_improvement * report.total_frames:
            report.stopped_early = iteration < config.iterations
            break

    return run.params, report


def _calibration_phase(
    run: _Run, raws: Sequence[RawPosteriors] | None, cal: CalibrationParams | None, iteration: int
) -> CalibrationParams:
    config = run.config
    raws = _check_raws(run.segs, raws, run.params.dims.N)
    if cal is None:
        raise RecipeMismatchError("calibration phase needs a calibrated recipe")
    log_rs = [log_softmax(le, axis=1) for le in run.log_ell()]
    start = cal if config.calibration_warm_start else CalibrationParams.identity(run.params.dims.N, config.diagonal_alpha)
    result = optimize_calibration(raws, log_rs, start, tol=config.calibration_tol, max_iter=config.calibration_max_iter)
    chosen = result.params
    current_objective = calib_objective(raws, log_rs, cal)
    if result.objective_after < current_objective:
        # a cold start can land below the incumbent
        chosen = cal
    run.report.calibration_log.append(
        {
            "iteration": iteration,
            "objective_before": current_objective,
            "objective_after": max(result.objective_after, current_objective),
            "optimizer_iterations": result.iterations,
            "converged": result.converged,
            "rejected_steps": result.rejected_steps,
            "entropy_before": result.entropy_before,
            "entropy_after": result.entropy_after,
        }
    )
    run.set_resps([apply_calibration(raw, chosen) for raw in raws])
    return chosen
