"""Conditional Gaussian mixture of experts over a fixed state feature map.

Expert ``z`` has mean ``W_z phi(s) + b_z`` and a state-independent
covariance ``L_z L_z^T``; the gating is ``softmax(V phi(s) + c)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy.spatial.distance import pdist

from .prob import (LOG_2PI, GaussianParams, categorical_sample, chol_from_raw,
                   log_softmax, logsumexp, raw_from_chol)

MOE_VERSION = 1


@dataclass
class FeatureMap:
    """``identity``, ``polynomial`` (all monomials of degree 1..p) or
    ``fourier`` (random Fourier features ``sqrt(2/m) cos(Omega s + phase)``)."""

    kind: str
    input_dim: int
    degree: int = 2
    n_freq: int = 64
    bandwidth: float = 1.0
    seed: int = 0
    frequencies: np.ndarray | None = None
    phases: np.ndarray | None = None
    _monomials: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind == "fourier" and self.frequencies is None:
            rng = np.random.default_rng(self.seed)
            self.frequencies = rng.standard_normal((self.n_freq, self.input_dim)) / self.bandwidth
            self.phases = rng.uniform(0.0, 2.0 * np.pi, self.n_freq)
        if self.kind == "fourier":
            self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
            self.phases = np.asarray(self.phases, dtype=np.float64)
            self.n_freq = self.frequencies.shape[0]
        elif self.kind == "polynomial":
            self._monomials = [c for p in range(1, self.degree + 1)
                               for c in combinations_with_replacement(range(self.input_dim), p)]
        elif self.kind != "identity":
            raise ValueError(f"unknown feature map {self.kind!r}")

    @property
    def dim(self) -> int:
        if self.kind == "identity":
            return self.input_dim
        if self.kind == "polynomial":
            return len(self._monomials)
        return self.n_freq

    def __call__(self, states) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.kind == "identity":
            return s
        if self.kind == "polynomial":
            return np.stack([np.prod(s[:, list(c)], axis=1) for c in self._monomials], axis=1)
        return np.sqrt(2.0 / self.n_freq) * np.cos(s @ self.frequencies.T + self.phases)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "input_dim": self.input_dim}
        if self.kind == "polynomial":
            d["degree"] = self.degree
        if self.kind == "fourier":
            d.update(n_freq=self.n_freq, bandwidth=self.bandwidth, seed=self.seed,
                     frequencies=self.frequencies.tolist(), phases=self.phases.tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        return cls(**d)


def median_bandwidth(states, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance between (a subsample of) the states."""
    states = np.atleast_2d(states)
    if states.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(states.shape[0], max_points, replace=False)
        states = states[idx]
    dist = pdist(states)
    med = float(np.median(dist[dist > 0])) if np.any(dist > 0) else 1.0
    return med


def make_feature_map(kind: str, states, n_freq: int = 64, bandwidth: float | None = None,
                     bandwidth_scale: float = 1.0, degree: int = 2, seed: int = 0) -> FeatureMap:
    states = np.atleast_2d(states)
    if kind == "fourier":
        bw = median_bandwidth(states, seed=seed) if bandwidth is None else bandwidth
        return FeatureMap("fourier", states.shape[1], n_freq=n_freq,
                          bandwidth=bw * bandwidth_scale, seed=seed)
    return FeatureMap(kind, states.shape[1], degree=degree)


@dataclass
class MoEParams:
    W: np.ndarray         # (Z, d, d_phi)
    b: np.ndarray         # (Z, d)
    chol_raw: np.ndarray  # (Z, d, d): log-diagonal, raw strict lower triangle
    V: np.ndarray         # (Z, d_phi)
    c: np.ndarray         # (Z,)
    features: FeatureMap

    def __post_init__(self):
        if self.W.shape[0] < 1:
            raise ValueError("a mixture needs at least one expert")
        z, d, dphi = self.W.shape
        if self.b.shape != (z, d) or self.chol_raw.shape != (z, d, d):
            raise ValueError("expert parameter shapes disagree")
        if self.V.shape != (z, dphi) or self.c.shape != (z,):
            raise ValueError("gating parameter shapes disagree")
        if dphi != self.features.dim:
            raise ValueError("feature dimension mismatch")

    @property
    def n_experts(self) -> int:
        return self.W.shape[0]

    @property
    def action_dim(self) -> int:
        return self.W.shape[1]

    @property
    def state_dim(self) -> int:
        return self.features.input_dim

    @property
    def chols(self) -> np.ndarray:
        return chol_from_raw(self.chol_raw)

    def copy(self) -> "MoEParams":
        return MoEParams(self.W.copy(), self.b.copy(), self.chol_raw.copy(),
                         self.V.copy(), self.c.copy(), self.features)

    def param_dict(self) -> dict:
        """Views of the trainable arrays, keyed by name."""
        return {"W": self.W, "b": self.b, "chol_raw": self.chol_raw, "V": self.V, "c": self.c}

    # -- batched evaluations -------------------------------------------------
    def expert_means(self, states, feats=None) -> np.ndarray:
        """``(n, Z, d)`` expert means."""
        phi = self.features(states) if feats is None else feats
        return np.einsum("zdf,nf->nzd", self.W, phi) + self.b[None]

    def gating_logits(self, states, feats=None) -> np.ndarray:
        phi = self.features(states) if feats is None else feats
        return phi @ self.V.T + self.c

    def expert_log_pdfs(self, a, states, feats=None) -> np.ndarray:
        """``(n, Z)`` log densities of each expert at actions ``a``."""
        a = np.atleast_2d(a)
        means = self.expert_means(states, feats)
        chols = self.chols
        diff = a[:, None, :] - means
        inv = np.linalg.inv(chols)  # tiny (Z, d, d) triangular inverses
        white = np.einsum("zij,nzj->nzi", inv, diff)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)
        return -0.5 * (np.sum(white ** 2, axis=-1) + logdet + self.action_dim * LOG_2PI)

    def joint_log_probs(self, a, states) -> np.ndarray:
        """``log q(z|s) + log q(a|s,z)`` with shape ``(n, Z)``."""
        phi = self.features(states)
        return log_softmax(self.gating_logits(None, phi)) + self.expert_log_pdfs(a, None, phi)


def expert_forward(m: MoEParams, s, z: int) -> GaussianParams:
    if not 0 <= z < m.n_experts:
        raise IndexError(f"expert index {z} out of range for Z={m.n_experts}")
    mean = m.expert_means(np.atleast_2d(s))[:, z]
    return GaussianParams(mean[0] if np.ndim(s) == 1 else mean, chol_from_raw(m.chol_raw[z]))


def gating_log_probs(m: MoEParams, s) -> np.ndarray:
    out = log_softmax(m.gating_logits(np.atleast_2d(s)))
    return out[0] if np.ndim(s) == 1 else out


def moe_log_pdf(m: MoEParams, a, s) -> np.ndarray:
    a2 = np.atleast_2d(a)
    s2 = np.atleast_2d(s)
    if s2.shape[0] == 1 and a2.shape[0] > 1:
        s2 = np.repeat(s2, a2.shape[0], axis=0)
    out = logsumexp(m.joint_log_probs(a2, s2), axis=-1)
    return out[0] if np.ndim(a) == 1 else out


def moe_sample(m: MoEParams, s, rng):
    """Hierarchical draw: ``z ~ gating``, then ``a ~ expert z``. One per state row."""
    s2 = np.atleast_2d(s)
    n = s2.shape[0]
    z = categorical_sample(m.gating_logits(s2), rng.random(n))
    eps = rng.standard_normal((n, m.action_dim))
    means = m.expert_means(s2)[np.arange(n), z]
    a = means + np.einsum("nij,nj->ni", m.chols[z], eps)
    if np.ndim(s) == 1:
        return int(z[0]), a[0]
    return z, a


def moe_mode_action(m: MoEParams, s, policy: str = "sample-then-mean", rng=None):
    """Pick an expert (by gating sample or argmax, lowest index on ties) and
    return its mean."""
    s2 = np.atleast_2d(s)
    n = s2.shape[0]
    phi = m.features(s2)
    logits = m.gating_logits(None, phi)
    if policy == "sample-then-mean":
        if rng is None:
            raise ValueError("sample-then-mean needs an rng")
        z = categorical_sample(logits, rng.random(n))
    elif policy == "argmax-then-mean":
        z = np.argmax(logits, axis=1)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    a = m.expert_means(None, phi)[np.arange(n), z]
    if np.ndim(s) == 1:
        return int(z[0]), a[0]
    return z, a


def init_moe(n_experts: int, states, actions, features: FeatureMap, rng,
             jitter: float = 0.1, cov_scale: float = 0.25) -> MoEParams:
    """Experts start at random dataset actions (plus jitter) with ``W = 0``;
    covariance ``cov_scale * std(actions)^2 * I``; uniform gating."""
    if n_experts < 1:
        raise ValueError("n_experts must be >= 1")
    actions = np.atleast_2d(actions)
    d = actions.shape[1]
    scale = float(np.mean(np.std(actions, axis=0)))
    idx = rng.integers(0, actions.shape[0], n_experts)
    b = actions[idx] + jitter * scale * rng.standard_normal((n_experts, d))
    chol = np.sqrt(cov_scale) * scale * np.eye(d)
    raw = np.repeat(raw_from_chol(chol)[None], n_experts, axis=0)
    return MoEParams(np.zeros((n_experts, d, features.dim)), b, raw,
                     np.zeros((n_experts, features.dim)), np.zeros(n_experts), features)


def moe_from_gmm_target(target, features: FeatureMap | None = None) -> MoEParams:
    """Wrap a fixed-weight, state-translated Gaussian-mixture target as an
    equivalent mixture of experts on identity features."""
    features = features or FeatureMap("identity", target.state_dim)
    if features.kind != "identity":
        raise ValueError("exact wrapping needs identity features")
    k = target.n_components
    W = np.repeat(target.state_map[None], k, axis=0)
    return MoEParams(W, target.base_means.copy(), raw_from_chol(target.chols),
                     np.zeros((k, features.dim)), np.log(target.weights), features)


def moe_to_dict(m: MoEParams) -> dict:
    return {
        "version": MOE_VERSION, "Z": m.n_experts, "d": m.action_dim, "state_dim": m.state_dim,
        "features": m.features.to_dict(),
        "experts": [{"W": m.W[z].tolist(), "b": m.b[z].tolist(), "chol_raw": m.chol_raw[z].tolist()}
                    for z in range(m.n_experts)],
        "gating": {"V": m.V.tolist(), "c": m.c.tolist()},
    }


def moe_from_dict(d: dict) -> MoEParams:
    from .errors import CheckpointVersionError

    if d.get("version") != MOE_VERSION:
        raise CheckpointVersionError(
            f"MoE checkpoint version {d.get('version')!r} is not supported (expected {MOE_VERSION})")
    feats = FeatureMap.from_dict(d["features"])
    ex = d["experts"]
    dphi = feats.dim
    W = np.array([e["W"] for e in ex], dtype=np.float64).reshape(len(ex), d["d"], dphi)
    return MoEParams(W, np.array([e["b"] for e in ex], dtype=np.float64),
                     np.array([e["chol_raw"] for e in ex], dtype=np.float64),
                     np.array(d["gating"]["V"], dtype=np.float64).reshape(len(ex), dphi),
                     np.array(d["gating"]["c"], dtype=np.float64), feats)
