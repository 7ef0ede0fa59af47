"""Noise schedules, analytic Gaussian-mixture teachers and reverse-SDE sampling.

A *score function* is any callable ``score(a, s, t) -> array`` taking actions
``(n, d)``, states ``(n, state_dim)`` and diffusion times ``(n,)`` (or a
scalar) in ``[0, 1]``, and returning ``grad_a log pi_t(a | s)`` with shape
``(n, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError
from .prob import LOG_2PI, check_chol, logsumexp


@dataclass(frozen=True)
class NoiseSchedule:
    """Maps diffusion time ``t in [0, 1]`` to a signal scale and noise level.

    VE: ``sigma(t) = sigma_min**(1-t) * sigma_max**t`` and ``alpha(t) = 1``.
    VP: linear-beta DDPM chain with ``n_steps`` steps; ``t`` is quantized to
    the grid ``k / n_steps`` and ``alpha = sqrt(alpha_bar_k)``,
    ``sigma = sqrt(1 - alpha_bar_k)``.
    """

    kind: str = "ve"
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    beta_min: float = 1e-3
    beta_max: float = 0.2
    n_steps: int = 100
    _alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "ve":
            if not (0.0 < self.sigma_min < self.sigma_max):
                raise ConfigError("VE schedule needs 0 < sigma_min < sigma_max")
            ab = np.ones(1)
        elif self.kind == "vp":
            if self.n_steps < 1 or not (0.0 < self.beta_min <= self.beta_max < 1.0):
                raise ConfigError("VP schedule needs 0 < beta_min <= beta_max < 1")
            betas = np.linspace(self.beta_min, self.beta_max, self.n_steps)
            ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        object.__setattr__(self, "_alpha_bar", ab)

    # VP helpers
    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_min, self.beta_max, self.n_steps)

    def _k(self, t) -> np.ndarray:
        return np.clip(np.rint(np.asarray(t, dtype=np.float64) * self.n_steps),
                       0, self.n_steps).astype(int)

    def alpha(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "ve":
            return np.ones_like(t)
        return np.sqrt(self._alpha_bar[self._k(t)])

    def sigma(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "ve":
            return self.sigma_min ** (1.0 - t) * self.sigma_max ** t
        return np.sqrt(1.0 - self._alpha_bar[self._k(t)])

    def t_of_sigma(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.kind == "ve":
            t = np.log(sigma / self.sigma_min) / np.log(self.sigma_max / self.sigma_min)
            return np.clip(t, 0.0, 1.0)
        grid = np.sqrt(1.0 - self._alpha_bar)
        k = np.searchsorted(grid, sigma)
        return np.clip(k, 0, self.n_steps) / self.n_steps

    def drift_and_g2(self, a, t):
        """Forward-SDE drift ``f(a, t)`` and squared diffusion ``g(t)**2``."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "ve":
            g2 = 2.0 * self.sigma(t) ** 2 * np.log(self.sigma_max / self.sigma_min)
            return np.zeros_like(a), g2
        # continuous-time rate of the step that ends at t
        k = np.clip(np.ceil(t * self.n_steps - 1e-9), 1, self.n_steps).astype(int)
        beta = self.betas[k - 1] * self.n_steps
        return -0.5 * np.asarray(beta)[..., None] * a, beta

    def prior_std(self) -> float:
        return self.sigma_max if self.kind == "ve" else 1.0

    def to_dict(self) -> dict:
        if self.kind == "ve":
            return {"kind": "ve", "sigma_min": self.sigma_min, "sigma_max": self.sigma_max}
        return {"kind": "vp", "beta_min": self.beta_min, "beta_max": self.beta_max,
                "n_steps": self.n_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


@dataclass(frozen=True)
class GMM:
    """Per-state Gaussian mixture: ``log_weights (n, K)``, ``means (n, K, d)``,
    ``chols (K, d, d)`` or ``(n, K, d, d)``."""

    log_weights: np.ndarray
    means: np.ndarray
    chols: np.ndarray

    @property
    def covs(self) -> np.ndarray:
        return self.chols @ np.swapaxes(self.chols, -1, -2)


class ConditionalGMMTarget:
    """Base class for analytic behaviour policies ``pi(a | s)``.

    Subclasses implement :meth:`components`; the component covariances
    ``chols`` are state-independent.
    """

    chols: np.ndarray
    state_dim: int

    def __init__(self, chols):
        chols = np.asarray(chols, dtype=np.float64)
        check_chol(chols)
        self.chols = chols
        self._covs = chols @ np.swapaxes(chols, -1, -2)
        self._eigval, self._eigvec = np.linalg.eigh(self._covs)

    @property
    def action_dim(self) -> int:
        return self.chols.shape[-1]

    @property
    def n_components(self) -> int:
        return self.chols.shape[0]

    def components(self, states):
        """Return ``(log_weights (n, K), means (n, K, d))``."""
        raise NotImplementedError

    def gmm(self, states) -> GMM:
        log_w, means = self.components(np.atleast_2d(states))
        return GMM(log_w, means, self.chols)

    def _component_terms(self, a, states, alpha, sigma):
        """Log densities and scores of each noised component.

        ``alpha``/``sigma`` have shape ``(n,)``; returns ``(n, K)`` log
        densities (including log weights) and ``(n, K, d)`` scores.
        """
        log_w, means = self.components(states)
        var = alpha[:, None, None] ** 2 * self._eigval[None] + sigma[:, None, None] ** 2
        diff = a[:, None, :] - alpha[:, None, None] * means
        proj = np.einsum("kji,nkj->nki", self._eigvec, diff)
        logp = -0.5 * (np.sum(proj ** 2 / var, axis=-1) + np.sum(np.log(var), axis=-1)
                       + self.action_dim * LOG_2PI)
        scores = -np.einsum("kij,nkj->nki", self._eigvec, proj / var)
        return log_w + logp, scores

    def log_pdf(self, a, states) -> np.ndarray:
        a, states = _batch(a, states)
        n = a.shape[0]
        comp, _ = self._component_terms(a, states, np.ones(n), np.zeros(n))
        return logsumexp(comp, axis=-1)

    def score(self, a, states) -> np.ndarray:
        a, states = _batch(a, states)
        n = a.shape[0]
        comp, scores = self._component_terms(a, states, np.ones(n), np.zeros(n))
        gamma = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))
        return np.einsum("nk,nkd->nd", gamma, scores)

    def sample(self, states, rng, return_labels: bool = False):
        """One action per state row."""
        states = np.atleast_2d(states)
        log_w, means = self.components(states)
        u = rng.random(states.shape[0])
        cdf = np.cumsum(np.exp(log_w), axis=-1)
        z = np.minimum(np.sum(cdf <= u[:, None], axis=-1), self.n_components - 1)
        eps = rng.standard_normal((states.shape[0], self.action_dim))
        a = means[np.arange(len(z)), z] + np.einsum("nij,nj->ni", self.chols[z], eps)
        return (a, z) if return_labels else a

    def mode_means(self, states) -> np.ndarray:
        return self.components(np.atleast_2d(states))[1]


class GMMTarget(ConditionalGMMTarget):
    """Mixture with fixed weights whose means translate with the state:
    ``mu_i(s) = m_i + C s``."""

    def __init__(self, weights, means, chols, state_map=None, state_dim: int = 2):
        super().__init__(chols)
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        self.weights = weights
        self.base_means = np.asarray(means, dtype=np.float64)
        if state_map is None:
            state_map = np.zeros((self.action_dim, state_dim))
        self.state_map = np.asarray(state_map, dtype=np.float64)
        self.state_dim = self.state_map.shape[1]

    def components(self, states):
        states = np.atleast_2d(states)
        n = states.shape[0]
        shift = states @ self.state_map.T
        means = self.base_means[None] + shift[:, None, :]
        log_w = np.broadcast_to(np.log(self.weights), (n, len(self.weights)))
        return log_w, means


def circle_gmm(k: int = 8, radius: float = 1.0, std: float = 0.1,
               state_dim: int = 2, translate: float = 1.0) -> GMMTarget:
    """``k`` equal-weight isotropic modes on a circle, translated by ``translate * s``."""
    ang = 2.0 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    chols = np.repeat((std * np.eye(2))[None], k, axis=0)
    smap = np.zeros((2, state_dim))
    smap[: min(2, state_dim), : min(2, state_dim)] = translate * np.eye(min(2, state_dim))
    return GMMTarget(np.full(k, 1.0 / k), means, chols, smap)


def _batch(a, states):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 1 and a.shape[0] > 1:
        states = np.broadcast_to(states, (a.shape[0], states.shape[1]))
    if a.shape[0] != states.shape[0]:
        raise ValueError("actions and states must have the same number of rows")
    return a, states


def _times(t, n):
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("diffusion time must lie in [0, 1]")
    return np.broadcast_to(t, (n,)) if t.ndim == 0 else t.reshape(n)


def noised_marginal(target: ConditionalGMMTarget, s, t, schedule: NoiseSchedule) -> GMM:
    """Closed-form ``pi_t(. | s)`` for a Gaussian-mixture target.

    Component ``i`` becomes ``N(alpha mu_i, alpha^2 L_i L_i^T + sigma^2 I)``.
    """
    states = np.atleast_2d(s)
    n = states.shape[0]
    tt = _times(t, n)
    alpha, sigma = schedule.alpha(tt), schedule.sigma(tt)
    log_w, means = target.components(states)
    d = target.action_dim
    covs = (alpha[:, None, None, None] ** 2 * target._covs[None]
            + sigma[:, None, None, None] ** 2 * np.eye(d))
    return GMM(log_w, alpha[:, None, None] * means, np.linalg.cholesky(covs))


def analytic_score(target: ConditionalGMMTarget, a, s, t, schedule: NoiseSchedule) -> np.ndarray:
    """Exact ``grad_a log pi_t(a | s)`` of the noised mixture, in log space."""
    a, states = _batch(a, s)
    tt = _times(t, a.shape[0])
    comp, scores = target._component_terms(a, states, schedule.alpha(tt), schedule.sigma(tt))
    gamma = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))
    return np.einsum("nk,nkd->nd", gamma, scores)


def noised_log_pdf(target: ConditionalGMMTarget, a, s, t, schedule: NoiseSchedule) -> np.ndarray:
    a, states = _batch(a, s)
    tt = _times(t, a.shape[0])
    comp, _ = target._component_terms(a, states, schedule.alpha(tt), schedule.sigma(tt))
    return logsumexp(comp, axis=-1)


class AnalyticScore:
    """Score-function wrapper around a target and schedule."""

    def __init__(self, target: ConditionalGMMTarget, schedule: NoiseSchedule):
        self.target = target
        self.schedule = schedule

    def __call__(self, a, s, t):
        return analytic_score(self.target, a, s, t, self.schedule)

    def log_density(self, a, s):
        return self.target.log_pdf(a, s)


def forward_perturb(a0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``alpha(t) a0 + sigma(t) eps``."""
    a0 = np.asarray(a0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return schedule.alpha(t)[..., None] * a0 + schedule.sigma(t)[..., None] * np.asarray(eps)


def reverse_sde_sample(score, schedule: NoiseSchedule, s, n_steps: int, rng,
                       action_dim: int = 2, n_samples: int | None = None) -> np.ndarray:
    """Euler-Maruyama integration of the reverse SDE from ``t=1`` to ``t=0``.

    ``s`` is one state ``(state_dim,)`` or a batch ``(n, state_dim)``; one
    action is produced per state row (``n_samples`` repeats a single state).
    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(rng)
    states = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if n_samples is not None:
        states = np.repeat(states[:1], n_samples, axis=0)
    n = states.shape[0]
    a = schedule.prior_std() * rng.standard_normal((n, action_dim))
    dt = 1.0 / n_steps
    for i in range(n_steps, 0, -1):
        t = np.full(n, i * dt)
        drift, g2 = schedule.drift_and_g2(a, t)
        g2 = np.broadcast_to(g2, (n,))[:, None]
        a = a - (drift - g2 * score(a, states, t)) * dt \
            + np.sqrt(g2 * dt) * rng.standard_normal((n, action_dim))
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"reverse SDE produced non-finite state at step {n_steps - i}",
                                 {"step": n_steps - i})
    return a
