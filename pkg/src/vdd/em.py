"""Maximum-likelihood EM for the same mixture-of-experts family.

The E-step takes posteriors of the dataset pairs under the current mixture.
The M-step solves a weighted ridge regression per expert, refits its
covariance from the weighted residuals and fits the gating to the
responsibilities by a bounded inner optimization.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError
from .moe import MoEParams, init_moe
from .prob import log_softmax, logsumexp, raw_from_chol, safe_cholesky

log = logging.getLogger(__name__)


@dataclass
class EMConfig:
    n_experts: int = 8
    iterations: int = 100
    ridge: float = 1e-6
    cov_floor: float = 1e-8
    gating_tol: float = 1e-6
    gating_max_steps: int = 100
    dead_mass: float = 1e-8     # total responsibility below this counts as an empty component
    seed: int = 0
    init_jitter: float = 0.1
    init_cov_scale: float = 0.25

    def validate(self):
        if self.n_experts < 1:
            raise ConfigError("em.n_experts must be >= 1")
        if self.iterations < 1 or self.gating_max_steps < 1:
            raise ConfigError("em iteration counts must be positive")
        if self.ridge < 0 or self.cov_floor <= 0 or self.gating_tol <= 0:
            raise ConfigError("em tolerances must be positive")


@dataclass
class EMLog:
    log_likelihood: list = field(default_factory=list)   # mean per pair, before each M-step
    reseeds: list = field(default_factory=list)          # (iteration, component)


def em_responsibilities(m: MoEParams, states, actions, phi=None):
    """Posteriors ``(n, Z)`` and the mean dataset log-likelihood."""
    phi = m.features(states) if phi is None else phi
    joint = log_softmax(m.gating_logits(None, phi)) + m.expert_log_pdfs(actions, None, phi)
    norm = logsumexp(joint, axis=1, keepdims=True)
    return np.exp(joint - norm), float(np.mean(norm))


def weighted_ridge(phi, actions, weights, ridge: float = 1e-6):
    """Solve ``min sum_n w_n |a_n - W phi_n - b|^2 + ridge |W|^2``; returns ``(W, b)``."""
    n, f = phi.shape
    X = np.hstack([phi, np.ones((n, 1))])
    Xw = X * weights[:, None]
    A = X.T @ Xw
    A[np.arange(f), np.arange(f)] += ridge   # the bias is left unpenalized
    theta = np.linalg.solve(A, Xw.T @ actions)
    return theta[:f].T, theta[f]


def _fit_gating(m: MoEParams, phi, resp, tol, max_steps):
    Z, f = m.V.shape
    n = phi.shape[0]

    def fun(x):
        V, c = x[: Z * f].reshape(Z, f), x[Z * f:]
        logp = log_softmax(phi @ V.T + c)
        g = (np.exp(logp) - resp) / n
        return -np.sum(resp * logp) / n, np.concatenate([(g.T @ phi).ravel(), g.sum(axis=0)])

    x0 = np.concatenate([m.V.ravel(), m.c])
    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_steps, "gtol": tol, "ftol": 0.0})
    # keep the warm start if the optimizer failed to improve on it
    if res.fun <= fun(x0)[0]:
        m.V[...] = res.x[: Z * f].reshape(Z, f)
        m.c[...] = res.x[Z * f:]
    m.c -= m.c.mean()


def em_train(states, actions, config: EMConfig | None = None, features=None,
             init: MoEParams | None = None):
    """Fit a mixture of experts to ``(s, a)`` pairs by EM. Returns ``(MoEParams, EMLog)``."""
    config = config or EMConfig()
    config.validate()
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    if init is None:
        if features is None:
            raise ValueError("need either an initial mixture or a feature map")
        m = init_moe(config.n_experts, states, actions, features, rng,
                     config.init_jitter, config.init_cov_scale)
    else:
        m = init.copy()
    if m.n_experts != config.n_experts:
        raise ConfigError("initial mixture has the wrong number of experts")
    phi = m.features(states)
    d = m.action_dim
    init_raw = raw_from_chol(np.sqrt(config.init_cov_scale) * np.mean(np.std(actions, axis=0))
                             * np.eye(d))
    elog = EMLog()
    for it in range(config.iterations):
        resp, ll = em_responsibilities(m, states, actions, phi)
        elog.log_likelihood.append(ll)
        for z in range(m.n_experts):
            w = resp[:, z]
            if w.sum() < config.dead_mass:
                i = rng.integers(0, states.shape[0])
                m.W[z] = 0.0
                m.b[z] = actions[i]
                m.chol_raw[z] = init_raw
                elog.reseeds.append((it, z))
                log.warning("EM component %d had no responsibility mass at iteration %d; "
                            "reseeded from data pair %d", z, it, i)
                continue
            W, b = weighted_ridge(phi, actions, w, config.ridge)
            m.W[z], m.b[z] = W, b
            r = actions - phi @ W.T - b
            cov = (r * w[:, None]).T @ r / w.sum()
            m.chol_raw[z] = raw_from_chol(safe_cholesky(cov, config.cov_floor))
        _fit_gating(m, phi, resp, config.gating_tol, config.gating_max_steps)
    elog.log_likelihood.append(em_responsibilities(m, states, actions, phi)[1])
    return m, elog
