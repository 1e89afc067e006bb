"""The Gaussian i-vector posterior, expected log-likelihoods and the VB lower bound.

Natural parameters (natural mean ``a`` and precision ``P``) are the stored
ground truth of a posterior; mean, covariance and log-determinant are derived
from one Cholesky factorization of ``P``.

The bound returned by :func:`elbo` keeps every constant term, so values are
comparable across models and equal the exact GMM log-likelihood bound LB⁰
when all loadings are zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import softmax

from vbivec.errors import DimensionMismatchError, NotPositiveDefiniteError, StaleStatisticsError
from vbivec.model.gmm import LOG_2PI, log_gauss_frames, responsibility_entropy
from vbivec.model.suffstats import SegmentStats, accumulate, means_fingerprint
from vbivec.state import CovarianceMode, ModelParams, Responsibilities, SegmentFeatures


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def projection_fingerprint(params: ModelParams) -> str:
    digest = hashlib.blake2b(digest_size=8)
    for arr in (params.loadings, params.covariances):
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        digest.update(str(arr.shape).encode())
    return digest.hexdigest()


@dataclass(frozen=True)
class PrecomputedProjections:
    """Per-component T_i'C_i⁻¹ (M x D) and T_i'C_i⁻¹T_i (M x M) for one (T, C)."""

    tc_inv: np.ndarray
    tct: np.ndarray
    log_det_cov: np.ndarray
    cov_inverse: np.ndarray
    fingerprint: str
    means_fingerprint: str


def project(params: ModelParams) -> PrecomputedProjections:
    n, d, m = params.dims.N, params.dims.D, params.dims.M
    tc_inv = np.empty((n, m, d))
    tct = np.empty((n, m, m))
    log_det = np.empty(n)
    if params.mode is CovarianceMode.DIAGONAL:
        cov_inverse = 1.0 / params.covariances
        for i in range(n):
            tc_inv[i] = params.loadings[i].T * cov_inverse[i][None, :]
            log_det[i] = np.sum(np.log(params.covariances[i]))
    else:
        cov_inverse = np.empty((n, d, d))
        for i in range(n):
            factor = scipy.linalg.cho_factor(params.covariances[i], lower=True)
            cov_inverse[i] = scipy.linalg.cho_solve(factor, np.eye(d))
            tc_inv[i] = scipy.linalg.cho_solve(factor, params.loadings[i]).T
            log_det[i] = 2.0 * np.sum(np.log(np.diag(factor[0])))
    for i in range(n):
        prod = tc_inv[i] @ params.loadings[i]
        tct[i] = 0.5 * (prod + prod.T)
    return PrecomputedProjections(
        _freeze(tc_inv),
        _freeze(tct),
        _freeze(log_det),
        _freeze(cov_inverse),
        projection_fingerprint(params),
        means_fingerprint(params.means),
    )


@dataclass(frozen=True)
class IVectorPosterior:
    """Q_s(x) = N(x | P⁻¹a, P⁻¹)."""

    natural_mean: np.ndarray
    precision: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray
    log_det_covariance: float

    @classmethod
    def from_natural(cls, natural_mean: np.ndarray, precision: np.ndarray) -> IVectorPosterior:
        natural_mean = np.asarray(natural_mean, dtype=np.float64)
        precision = np.asarray(precision, dtype=np.float64)
        precision = 0.5 * (precision + precision.T)
        m = natural_mean.size
        if precision.shape != (m, m):
            raise DimensionMismatchError(f"precision {precision.shape} does not match natural mean ({m},)")
        try:
            factor = scipy.linalg.cho_factor(precision, lower=True)
        except np.linalg.LinAlgError as e:
            raise NotPositiveDefiniteError(f"i-vector precision is not positive definite: {e}") from e
        diag = np.diag(factor[0])
        if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
            raise NotPositiveDefiniteError(f"i-vector precision pivot {int(np.argmin(diag))} is {diag.min()!r}")
        mean = scipy.linalg.cho_solve(factor, natural_mean)
        cov = scipy.linalg.cho_solve(factor, np.eye(m))
        cov = 0.5 * (cov + cov.T)
        return cls(
            _freeze(natural_mean),
            _freeze(precision),
            _freeze(mean),
            _freeze(cov),
            float(-2.0 * np.sum(np.log(diag))),
        )

    @classmethod
    def prior(cls, dim: int) -> IVectorPosterior:
        return cls.from_natural(np.zeros(dim), np.eye(dim))

    @property
    def dim(self) -> int:
        return self.natural_mean.size

    def second_moment(self) -> np.ndarray:
        """E[x x'] = Σ + m m'."""
        return self.covariance + np.outer(self.mean, self.mean)


def _check_projection(params: ModelParams, proj: PrecomputedProjections | None) -> PrecomputedProjections:
    if proj is None:
        return project(params)
    if proj.fingerprint != projection_fingerprint(params) or proj.means_fingerprint != means_fingerprint(params.means):
        raise StaleStatisticsError("precomputed projections were built for different model parameters")
    return proj


def posterior(stats: SegmentStats, proj: PrecomputedProjections) -> IVectorPosterior:
    """P = I + Σ_i n_i T_i'C_i⁻¹T_i, a = Σ_i T_i'C_i⁻¹ f_i."""
    if stats.fingerprint != proj.means_fingerprint:
        raise StaleStatisticsError(
            f"segment {stats.segment_id}: statistics centered on {stats.fingerprint}, model means are {proj.means_fingerprint}"
        )
    n, m, d = proj.tc_inv.shape
    if stats.zero_order.shape != (n,) or stats.first_order.shape != (n, d):
        raise DimensionMismatchError(f"statistics {stats.first_order.shape} do not match N={n}, D={d}")
    precision = np.eye(m) + np.einsum("n,nij->ij", stats.zero_order, proj.tct)
    natural_mean = np.einsum("nmd,nd->m", proj.tc_inv, stats.first_order)
    return IVectorPosterior.from_natural(natural_mean, precision)


def extract(
    seg: SegmentFeatures,
    resp: Responsibilities,
    params: ModelParams,
    proj: PrecomputedProjections | None = None,
) -> IVectorPosterior:
    """Classical extraction: statistics under fixed responsibilities, then the posterior."""
    proj = _check_projection(params, proj)
    return posterior(accumulate(seg, resp, params.means, params.mode), proj)


def _trace_penalty(proj: PrecomputedProjections, post: IVectorPosterior) -> np.ndarray:
    # ½ trace(C_i⁻¹ T_i Σ T_i') for every component
    return 0.5 * np.einsum("nij,ji->n", proj.tct, post.covariance)


def expected_log_gauss(
    phi: np.ndarray,
    component: int,
    post: IVectorPosterior,
    params: ModelParams,
    proj: PrecomputedProjections | None = None,
) -> float:
    """E_Q(x)[log N(φ | μ_i + T_i x, C_i)] in closed form."""
    proj = _check_projection(params, proj)
    if post.dim != params.dims.M:
        raise DimensionMismatchError(f"posterior dim {post.dim} != M={params.dims.M}")
    i = component
    center = params.means[i] + params.loadings[i] @ post.mean
    value = log_gauss_frames(np.asarray(phi, dtype=np.float64)[None, :], center, params.covariances[i])[0]
    return float(value - _trace_penalty(proj, post)[i])


def expected_likelihoods(
    seg: SegmentFeatures,
    post: IVectorPosterior,
    params: ModelParams,
    proj: PrecomputedProjections | None = None,
) -> np.ndarray:
    """T_s x N matrix of log ℓ_st^i = log w_i + E_Q(x)[log N(φ_st | μ_i + T_i x, C_i)]."""
    proj = _check_projection(params, proj)
    if seg.dim != params.dims.D or post.dim != params.dims.M:
        raise DimensionMismatchError(f"segment {seg.segment_id} does not conform to the model dims")
    frames = np.asarray(seg.frames, dtype=np.float64)
    centers = params.means + np.einsum("ndm,m->nd", params.loadings, post.mean)
    penalty = _trace_penalty(proj, post)
    out = np.empty((frames.shape[0], params.dims.N))
    for i in range(params.dims.N):
        out[:, i] = np.log(params.weights[i]) + log_gauss_frames(frames, centers[i], params.covariances[i]) - penalty[i]
    return out


def optimal_responsibilities(log_ell: np.ndarray, segment_id: str = "") -> Responsibilities:
    """Row-wise softmax of log ℓ: the unconstrained mean-field update of Q(Γ)."""
    log_ell = np.asarray(log_ell, dtype=np.float64)
    if not np.all(np.isfinite(log_ell)):
        raise DimensionMismatchError(f"segment {segment_id}: non-finite expected log-likelihoods")
    return Responsibilities(softmax(log_ell, axis=1), segment_id)


def prior_term(post: IVectorPosterior) -> float:
    """−KL(Q(x) ‖ N(0, I)) = ½[log det Σ − tr Σ − m'm + M]."""
    m = post.mean
    return 0.5 * (post.log_det_covariance - float(np.trace(post.covariance)) - float(m @ m) + post.dim)


def expected_data_term(
    stats: SegmentStats,
    post: IVectorPosterior,
    params: ModelParams,
    proj: PrecomputedProjections,
) -> float:
    """Σ_t Σ_i q [log w_i + E log N(φ | μ_i + T_i x, C_i)] computed from statistics."""
    n = stats.zero_order
    d = params.dims.D
    if params.mode is CovarianceMode.DIAGONAL:
        if stats.mode is not CovarianceMode.DIAGONAL:
            second = np.diagonal(stats.second_order, axis1=1, axis2=2)
        else:
            second = stats.second_order
        trace_s = np.sum(second * proj.cov_inverse, axis=1)
    else:
        if stats.mode is not CovarianceMode.FULL:
            raise DimensionMismatchError("full-covariance bound needs full second-order statistics")
        trace_s = np.einsum("nij,nji->n", proj.cov_inverse, stats.second_order)
    m = post.mean
    projected_f = np.einsum("nmd,nd->nm", proj.tc_inv, stats.first_order) @ m
    quad_m = np.einsum("i,nij,j->n", m, proj.tct, m)
    per_comp = (
        n * np.log(params.weights)
        - 0.5 * n * (d * LOG_2PI + proj.log_det_cov)
        - 0.5 * (trace_s - 2.0 * projected_f + n * quad_m)
        - n * _trace_penalty(proj, post)
    )
    return float(np.sum(per_comp))


def elbo(
    seg: SegmentFeatures,
    resp: Responsibilities,
    post: IVectorPosterior,
    params: ModelParams,
    stats: SegmentStats | None = None,
    proj: PrecomputedProjections | None = None,
) -> float:
    """The VB lower bound L_s on log P(Φ_s | Λ), all constants included."""
    proj = _check_projection(params, proj)
    if resp.probs.shape != (seg.num_frames, params.dims.N):
        raise DimensionMismatchError(f"segment {seg.segment_id}: responsibilities do not conform")
    if stats is None:
        stats = accumulate(seg, resp, params.means, params.mode)
    elif stats.fingerprint != proj.means_fingerprint:
        raise StaleStatisticsError(f"segment {seg.segment_id}: statistics are stale for the current means")
    return prior_term(post) + expected_data_term(stats, post, params, proj) + responsibility_entropy(resp.probs)


def extract_full_vb(
    seg: SegmentFeatures,
    params: ModelParams,
    init_resp: Responsibilities,
    iterations: int = 10,
    tol: float = 1e-8,
    proj: PrecomputedProjections | None = None,
) -> tuple[Responsibilities, IVectorPosterior, list[float]]:
    """Iterate Q(x) and Q(Γ) updates to a fixed point of the mean-field equations.

    Each cycle is [posterior] then [optimal responsibilities]; the returned
    trace records the bound after every cycle and never decreases.
    """
    proj = _check_projection(params, proj)
    resp = init_resp
    stats = accumulate(seg, resp, params.means, params.mode)
    post = posterior(stats, proj)
    trace = [elbo(seg, resp, post, params, stats, proj)]
    for _ in range(iterations):
        resp = optimal_responsibilities(expected_likelihoods(seg, post, params, proj), seg.segment_id)
        stats = accumulate(seg, resp, params.means, params.mode)
        post = posterior(stats, proj)
        trace.append(elbo(seg, resp, post, params, stats, proj))
        if trace[-1] - trace[-2] < tol:
            break
    return resp, post, trace
