"""Analytic probability models with exact epsilon-predictions.

A Gaussian mixture is closed under the variance-preserving forward process:
noising at level alpha_bar maps component (mu, Sigma) to
(sqrt(alpha_bar) mu, alpha_bar Sigma + (1 - alpha_bar) I). The score of the
noised mixture is therefore exact, and the epsilon-prediction

    eps_hat(x) = -sqrt(1 - alpha_bar) * grad log p_t(x)

is the unique prediction whose Tweedie estimate equals E[x_0 | x_t = x].
These models serve as ground truth for the samplers and metrics.

Covariances are held as lower-triangular Cholesky factors; densities and
scores go through triangular solves, never explicit inverses. Mixture
responsibilities are formed in log space.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .schedule import NoiseSchedule, alpha_bar_to_flow_time

_LOG_2PI = math.log(2.0 * math.pi)
_WEIGHT_TOL = 1e-12

# Joint dimension cap for multi-view scenes expanded into one full-covariance
# mixture; keeps Cholesky factors desk-sized.
MV_JOINT_DIM_CAP = 32


def _readonly(arr, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(arr, dtype=dtype))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Gmm:
    """Gaussian mixture with full per-component covariance factors."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    chol_factors: np.ndarray  # (K, d, d) lower triangular, positive diagonal

    def __post_init__(self):
        object.__setattr__(self, "weights", _readonly(self.weights))
        object.__setattr__(self, "means", _readonly(self.means))
        object.__setattr__(self, "chol_factors", _readonly(self.chol_factors))
        w, mu, L = self.weights, self.means, self.chol_factors
        if w.ndim != 1 or mu.ndim != 2 or L.ndim != 3:
            raise ValueError("weights (K,), means (K,d), factors (K,d,d) required")
        k, d = mu.shape
        if w.shape != (k,) or L.shape != (k, d, d):
            raise ValueError("component count / dimension mismatch")
        if np.any(w < 0.0) or abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError("weights must be non-negative and sum to 1")
        diag = np.diagonal(L, axis1=-2, axis2=-1)
        if np.any(diag <= 0.0):
            raise ValueError("factor diagonals must be strictly positive")
        upper = np.triu(L, k=1)
        if np.any(upper != 0.0):
            raise ValueError("factors must be lower triangular")

    @classmethod
    def from_covariances(cls, weights, means, covariances) -> "Gmm":
        covs = np.asarray(covariances, dtype=np.float64)
        try:
            factors = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        return cls(weights=np.asarray(weights), means=np.asarray(means), chol_factors=factors)

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def covariances(self) -> np.ndarray:
        L = self.chol_factors
        return np.einsum("kij,klj->kil", L, L)

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "means": [[float(v) for v in m] for m in self.means],
            "covariances": [[[float(v) for v in row] for row in c] for c in self.covariances()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Gmm":
        return cls.from_covariances(doc["weights"], doc["means"], doc["covariances"])


def _log_weights(weights: np.ndarray) -> np.ndarray:
    out = np.full(weights.shape, -np.inf)
    pos = weights > 0.0
    out[pos] = np.log(weights[pos])
    return out


def _mixture_eval(x, weights, means, chols, want_score: bool):
    """Log density (and optionally score) of a Gaussian mixture at x.

    x may carry arbitrary leading batch axes; the last axis is the event
    dimension.
    """
    x = np.asarray(x, dtype=np.float64)
    k, d = means.shape
    if x.shape[-1] != d:
        raise ValueError(f"points have dimension {x.shape[-1]}, model has {d}")
    batch = x.shape[:-1]
    flat = x.reshape(-1, d)
    m = flat.shape[0]

    log_comp = np.empty((m, k))
    zs = np.empty((m, k, d)) if want_score else None
    log_w = _log_weights(weights)
    for j in range(k):
        L = chols[j]
        diff = (flat - means[j]).T  # (d, m)
        y = solve_triangular(L, diff, lower=True)
        maha = np.einsum("im,im->m", y, y)
        log_det = float(np.sum(np.log(np.diag(L))))
        log_comp[:, j] = log_w[j] - 0.5 * maha - log_det - 0.5 * d * _LOG_2PI
        if want_score:
            zs[:, j, :] = solve_triangular(L.T, y, lower=False).T  # Sigma^-1 diff

    log_p = logsumexp(log_comp, axis=1)
    if not want_score:
        return log_p.reshape(batch)
    resp = np.exp(log_comp - log_p[:, None])
    score = -np.einsum("mk,mkd->md", resp, zs)
    return log_p.reshape(batch), score.reshape(batch + (d,))


def _noised_params(g: Gmm, alpha_bar: float):
    means = math.sqrt(alpha_bar) * g.means
    covs = alpha_bar * g.covariances() + (1.0 - alpha_bar) * np.eye(g.dim)
    return means, np.linalg.cholesky(covs)


def gmm_noised_log_density(g: Gmm, x, alpha_bar: float):
    """log p_t(x) of the mixture noised to level alpha_bar in (0, 1]."""
    alpha_bar = float(alpha_bar)
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in (0, 1]")
    means, chols = _noised_params(g, alpha_bar)
    return _mixture_eval(x, g.weights, means, chols, want_score=False)


def gmm_noised_score(g: Gmm, x, alpha_bar: float):
    """grad_x log p_t(x) at noise level alpha_bar in (0, 1)."""
    alpha_bar = float(alpha_bar)
    if not 0.0 < alpha_bar < 1.0:
        raise ValueError("alpha_bar must lie in (0, 1)")
    means, chols = _noised_params(g, alpha_bar)
    _, score = _mixture_eval(x, g.weights, means, chols, want_score=True)
    return score


def gmm_epsilon(g: Gmm, x, alpha_bar: float):
    """Exact epsilon-prediction; undefined at zero noise (alpha_bar = 1)."""
    alpha_bar = float(alpha_bar)
    if not 0.0 < alpha_bar < 1.0:
        raise ValueError("alpha_bar must lie in (0, 1) for epsilon")
    return -math.sqrt(1.0 - alpha_bar) * gmm_noised_score(g, x, alpha_bar)


def gmm_sample(g: Gmm, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. exact samples: categorical component draw, then affine map."""
    if n < 1:
        raise ValueError("n must be >= 1")
    edges = np.cumsum(g.weights)
    idx = np.searchsorted(edges, rng.random(n), side="right")
    idx = np.minimum(idx, g.n_components - 1)
    z = rng.standard_normal((n, g.dim))
    return g.means[idx] + np.einsum("nij,nj->ni", g.chol_factors[idx], z)


class ScoreModel(ABC):
    """Epsilon-predictor over R^d; a pure function of (x, t, schedule)."""

    @property
    @abstractmethod
    def dim(self) -> int: ...

    @abstractmethod
    def predict_epsilon(self, x, t: int, schedule: NoiseSchedule) -> np.ndarray: ...

    @abstractmethod
    def describe(self) -> dict:
        """JSON-able payload identifying the model for run fingerprints."""

    def log_density(self, x) -> np.ndarray:
        """Clean data log density, where analytically available."""
        raise NotImplementedError(f"{type(self).__name__} has no closed-form density")


class GmmScoreModel(ScoreModel):
    def __init__(self, gmm: Gmm):
        self.gmm = gmm

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def predict_epsilon(self, x, t, schedule):
        return gmm_epsilon(self.gmm, x, schedule.alpha_bar_at(t))

    def log_density(self, x):
        return gmm_noised_log_density(self.gmm, x, 1.0)

    def describe(self) -> dict:
        return {"kind": "gmm", **self.gmm.to_dict()}


class BlockProductModel(ScoreModel):
    """Product of independent blocks, each handled by its own model."""

    def __init__(self, blocks):
        blocks = tuple(blocks)
        if not blocks:
            raise ValueError("need at least one block")
        self.blocks = blocks
        dims = [b.dim for b in blocks]
        offsets = np.concatenate([[0], np.cumsum(dims)])
        self._slices = tuple(
            slice(int(offsets[i]), int(offsets[i + 1])) for i in range(len(blocks))
        )
        self._dim = int(offsets[-1])

    @property
    def dim(self) -> int:
        return self._dim

    def predict_epsilon(self, x, t, schedule):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self._dim:
            raise ValueError(f"points have dimension {x.shape[-1]}, model has {self._dim}")
        parts = [
            blk.predict_epsilon(x[..., sl], t, schedule)
            for blk, sl in zip(self.blocks, self._slices)
        ]
        return np.concatenate(parts, axis=-1)

    def log_density(self, x):
        x = np.asarray(x, dtype=np.float64)
        return sum(
            blk.log_density(x[..., sl]) for blk, sl in zip(self.blocks, self._slices)
        )

    def describe(self) -> dict:
        return {"kind": "block_product", "blocks": [b.describe() for b in self.blocks]}


def block_product_model(blocks) -> BlockProductModel:
    return BlockProductModel(blocks)


class VelocityModel(ABC):
    """Flow velocity field v(x, t) under x_t = t x_0 + (1 - t) eps."""

    @property
    @abstractmethod
    def dim(self) -> int: ...

    @abstractmethod
    def velocity(self, x, t_flow: float) -> np.ndarray: ...

    @abstractmethod
    def describe(self) -> dict: ...


def _flow_params(g: Gmm, t_flow: float):
    means = t_flow * g.means
    covs = t_flow**2 * g.covariances() + (1.0 - t_flow) ** 2 * np.eye(g.dim)
    return means, np.linalg.cholesky(covs)


def gmm_flow_log_density(g: Gmm, x, t_flow: float):
    """Log density of the flow-interpolation marginal at time t in (0, 1]."""
    t_flow = float(t_flow)
    if not 0.0 < t_flow <= 1.0:
        raise ValueError("t_flow must lie in (0, 1]")
    means, chols = _flow_params(g, t_flow)
    return _mixture_eval(x, g.weights, means, chols, want_score=False)


def velocity_from_gmm(g: Gmm, x, t_flow: float):
    """E[x_0 - eps | x_t = x] under the flow interpolation.

    Computed from per-component Gaussian conditionals mixed by posterior
    responsibilities, independently of the score identity it is used to
    verify.
    """
    t_flow = float(t_flow)
    if not 0.0 < t_flow < 1.0:
        raise ValueError("t_flow must lie strictly inside (0, 1)")
    x = np.asarray(x, dtype=np.float64)
    k, d = g.means.shape
    if x.shape[-1] != d:
        raise ValueError(f"points have dimension {x.shape[-1]}, model has {d}")
    batch = x.shape[:-1]
    flat = x.reshape(-1, d)
    m = flat.shape[0]

    means, chols = _flow_params(g, t_flow)
    sigmas = g.covariances()
    log_comp = np.empty((m, k))
    comp_v = np.empty((m, k, d))
    log_w = _log_weights(g.weights)
    one_minus_t = 1.0 - t_flow
    for j in range(k):
        L = chols[j]
        diff = (flat - means[j]).T  # (d, m)
        y = solve_triangular(L, diff, lower=True)
        log_det = float(np.sum(np.log(np.diag(L))))
        log_comp[:, j] = (
            log_w[j] - 0.5 * np.einsum("im,im->m", y, y) - log_det - 0.5 * d * _LOG_2PI
        )
        u = solve_triangular(L.T, y, lower=False)  # C_j^-1 (x - t mu_j), (d, m)
        e_x0 = g.means[j] + (t_flow * sigmas[j] @ u).T
        e_eps = one_minus_t * u.T
        comp_v[:, j, :] = e_x0 - e_eps
    resp = np.exp(log_comp - logsumexp(log_comp, axis=1)[:, None])
    v = np.einsum("mk,mkd->md", resp, comp_v)
    return v.reshape(batch + (d,))


def score_from_velocity(v, x, t_flow: float):
    """Linear velocity-to-score transform s = -(-t v + x) / (1 - t)."""
    t_flow = float(t_flow)
    if not 0.0 < t_flow < 1.0:
        raise ValueError("t_flow must lie strictly inside (0, 1)")
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError("v and x must share a shape")
    return -(-t_flow * v + x) / (1.0 - t_flow)


class GmmVelocityModel(VelocityModel):
    def __init__(self, gmm: Gmm):
        self.gmm = gmm

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def velocity(self, x, t_flow):
        return velocity_from_gmm(self.gmm, x, t_flow)

    def describe(self) -> dict:
        return {"kind": "gmm_velocity", **self.gmm.to_dict()}


class VelocityWrappedScoreModel(ScoreModel):
    """Epsilon-predictions obtained from a velocity field.

    The variance-preserving point x is rescaled onto the flow interpolation
    at the SNR-matched time, x' = x * t_flow / sqrt(alpha_bar); the flow
    score at x' converts back through the same change of variables:

        eps_hat(x) = -sqrt(1 - alpha_bar) * c * s(x'),  c = t_flow / sqrt(alpha_bar)
    """

    def __init__(self, vm: VelocityModel):
        self.vm = vm

    @property
    def dim(self) -> int:
        return self.vm.dim

    def predict_epsilon(self, x, t, schedule):
        ab = schedule.alpha_bar_at(t)
        if ab >= 1.0:
            raise ValueError("epsilon undefined at alpha_bar = 1")
        t_flow = alpha_bar_to_flow_time(ab)
        c = t_flow / math.sqrt(ab)
        x = np.asarray(x, dtype=np.float64)
        x_flow = c * x
        s = score_from_velocity(self.vm.velocity(x_flow, t_flow), x_flow, t_flow)
        return -math.sqrt(1.0 - ab) * c * s

    def describe(self) -> dict:
        return {"kind": "velocity_wrapped", "inner": self.vm.describe()}


def velocity_wrapped_score_model(
    vm: VelocityModel, schedule: NoiseSchedule
) -> VelocityWrappedScoreModel:
    """Wrap a velocity field as an epsilon-predictor for the given schedule."""
    ab = schedule.alpha_bar
    if np.any(ab >= 1.0):
        raise ValueError("schedule contains a zero-noise step")
    # Raises if any level falls outside the usable flow-time range.
    alpha_bar_to_flow_time(ab)
    return VelocityWrappedScoreModel(vm)


@dataclass(frozen=True)
class MvScene:
    """Shared-latent multi-view construction plus a per-view edit target.

    Views are x^(i) = y + eta_i with y ~ latent_gmm and eta_i ~ N(0, jitter^2 I)
    independent across views; edit_gmm is the marginal each independently
    edited view should follow.
    """

    n_views: int
    view_dim: int
    latent_gmm: Gmm
    jitter: float
    edit_gmm: Gmm

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("need at least two views")
        if not self.jitter > 0.0:
            raise ValueError("jitter must be positive")
        if self.latent_gmm.dim != self.view_dim or self.edit_gmm.dim != self.view_dim:
            raise ValueError("latent and edit mixtures must live in view_dim")

    @property
    def joint_dim(self) -> int:
        return self.n_views * self.view_dim

    def to_dict(self) -> dict:
        return {
            "n_views": self.n_views,
            "view_dim": self.view_dim,
            "jitter": float(self.jitter),
            "latent": self.latent_gmm.to_dict(),
            "edit": self.edit_gmm.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MvScene":
        return cls(
            n_views=int(doc["n_views"]),
            view_dim=int(doc["view_dim"]),
            latent_gmm=Gmm.from_dict(doc["latent"]),
            jitter=float(doc["jitter"]),
            edit_gmm=Gmm.from_dict(doc["edit"]),
        )


def mv_consistent_model(scene: MvScene) -> Gmm:
    """Joint mixture over all views with shared-latent block covariance.

    Component k has mean mu_k replicated across views and covariance
    Sigma_k in every block plus jitter^2 I on the diagonal blocks.
    """
    n, d = scene.n_views, scene.view_dim
    if n * d > MV_JOINT_DIM_CAP:
        raise ValueError(f"joint dimension {n * d} exceeds cap {MV_JOINT_DIM_CAP}")
    lat = scene.latent_gmm
    covs = lat.covariances()
    eye = scene.jitter**2 * np.eye(n * d)
    joint_means = np.tile(lat.means, (1, n))
    joint_covs = np.stack([np.kron(np.ones((n, n)), covs[k]) + eye for k in range(lat.n_components)])
    return Gmm.from_covariances(lat.weights, joint_means, joint_covs)


def mv_view_marginal(scene: MvScene) -> Gmm:
    """Single-view marginal: the latent mixture convolved with the jitter."""
    lat = scene.latent_gmm
    covs = lat.covariances() + scene.jitter**2 * np.eye(scene.view_dim)
    return Gmm.from_covariances(lat.weights, lat.means, covs)


def mv_edit_chain_model(scene: MvScene) -> BlockProductModel:
    """Per-view independent edit model over the joint view space."""
    return BlockProductModel(
        [GmmScoreModel(scene.edit_gmm) for _ in range(scene.n_views)]
    )
