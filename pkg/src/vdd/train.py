"""Variational distillation of a score-based teacher into a mixture of experts.

One outer iteration:

1. E-step: freeze a :class:`Snapshot` of the current mixture. Its posterior
   ``q~(z | a, s)`` is held fixed for the rest of the iteration.
2. Expert M-step: every expert takes one pathwise-gradient step on its own
   upper-bound term ``E_q_z[log q_z(a) - log pi_t(a|s) - log q~(z|a,s)]``
   with the teacher score standing in for ``grad_a log pi``.
3. Gating M-step: one step on the cross-entropy between snapshot
   responsibilities of dataset pairs and the gating.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError
from .moe import MoEParams, init_moe, moe_sample
from .optim import Adam
from .prob import LOG_2PI, chol_grad_to_raw, log_softmax, logsumexp, softmax
from .sde import NoiseSchedule, forward_perturb

log = logging.getLogger(__name__)


class Snapshot:
    """Read-only copy of a mixture; the stop-gradient of the E-step."""

    def __init__(self, m: MoEParams):
        self.params = m.copy()
        for arr in self.params.param_dict().values():
            arr.setflags(write=False)
        self.chols = self.params.chols
        self.inv_chols = np.linalg.inv(self.chols)
        self.precisions = np.swapaxes(self.inv_chols, -1, -2) @ self.inv_chols
        self._W_flat = self.params.W.reshape(-1, self.params.W.shape[-1]).T
        self.logdets = 2.0 * np.sum(np.log(np.diagonal(self.chols, axis1=-2, axis2=-1)), axis=-1)

    @property
    def n_experts(self) -> int:
        return self.params.n_experts

    def _terms(self, a, states, phi=None):
        """Joint log-probs ``(..., Z)`` and expert scores ``(..., Z, d)``.

        ``a`` has shape ``(..., d)``; ``states`` ``(..., state_dim)`` has
        matching leading axes, or pass precomputed features ``phi`` whose
        leading axes broadcast against ``a[..., :1]``.
        """
        p = self.params
        lead = a.shape[:-1]
        if phi is None:
            phi = p.features(states.reshape(-1, states.shape[-1])).reshape(lead + (-1,))
        Z, d = p.b.shape
        means = (phi @ self._W_flat).reshape(phi.shape[:-1] + (Z, d)) + p.b
        log_gate = log_softmax(phi @ p.V.T + p.c)
        diff = (a[..., None, :] - means)[..., None]
        white = np.matmul(self.inv_chols, diff)[..., 0]
        log_exp = -0.5 * (np.sum(white ** 2, axis=-1) + self.logdets + d * LOG_2PI)
        scores = -np.matmul(self.precisions, diff)[..., 0]
        return log_gate + log_exp, scores

    def log_responsibilities(self, a, states, phi=None) -> np.ndarray:
        joint, _ = self._terms(np.asarray(a, dtype=np.float64), np.asarray(states, dtype=np.float64), phi)
        return joint - logsumexp(joint, axis=-1, keepdims=True)

    def repulsion(self, a, states, z, phi=None) -> np.ndarray:
        """``grad_a log q~(z | a, s)`` for expert index (array) ``z``."""
        a = np.asarray(a, dtype=np.float64)
        joint, scores = self._terms(a, np.asarray(states, dtype=np.float64), phi)
        gamma = np.exp(joint - logsumexp(joint, axis=-1, keepdims=True))
        mixed = np.einsum("...z,...zd->...d", gamma, scores)
        z = np.broadcast_to(np.asarray(z), a.shape[:-1])
        own = np.take_along_axis(scores, z[..., None, None], axis=-2)[..., 0, :]
        return own - mixed


def e_step_responsibilities(snap: Snapshot, a, s) -> np.ndarray:
    """Posterior ``q~(z | a, s)`` under the snapshot, shape ``(..., Z)``."""
    return np.exp(snap.log_responsibilities(a, s))


def repulsion_grad(snap: Snapshot, a, s, z) -> np.ndarray:
    return snap.repulsion(a, s, z)


# --- timestep selection ------------------------------------------------------

@dataclass(frozen=True)
class TimestepSampler:
    """Noise-level distribution ``p(t)``.

    ``kind`` is ``min``, ``max``, ``uniform`` or ``interval``; ``space`` says
    whether ``lo``/``hi`` are noise levels (``sigma``, VE) or diffusion times
    (``t``). ``min``/``max``/``uniform`` use ``[lo, hi]`` as the full range;
    :meth:`for_schedule` fills it from a schedule.
    """

    kind: str = "interval"
    lo: float = 0.2
    hi: float = 0.5
    space: str = "sigma"

    def __post_init__(self):
        if self.kind not in ("min", "max", "uniform", "interval"):
            raise ConfigError(f"unknown timestep sampler {self.kind!r}")
        if self.space not in ("sigma", "t"):
            raise ConfigError(f"unknown timestep space {self.space!r}")
        if not self.lo <= self.hi:
            raise ConfigError("timestep sampler needs lo <= hi")
        if self.space == "t" and not (0.0 <= self.lo and self.hi <= 1.0):
            raise ConfigError("diffusion-time bounds must lie in [0, 1]")
        if self.space == "sigma" and self.lo <= 0.0:
            raise ConfigError("noise-level bounds must be positive")

    @classmethod
    def for_schedule(cls, kind: str, schedule: NoiseSchedule, lo=None, hi=None) -> "TimestepSampler":
        if schedule.kind == "ve":
            rlo, rhi, space = schedule.sigma_min, schedule.sigma_max, "sigma"
        else:
            rlo, rhi, space = 0.0, 1.0, "t"
        if kind == "interval":
            if lo is None or hi is None:
                raise ConfigError("interval sampling needs explicit bounds")
            return cls(kind, float(lo), float(hi), space)
        return cls(kind, float(rlo if lo is None else lo), float(rhi if hi is None else hi), space)

    def to_time(self, values, schedule: NoiseSchedule) -> np.ndarray:
        if self.space == "t":
            return np.asarray(values, dtype=np.float64)
        return schedule.t_of_sigma(values)


def sample_timestep(ts: TimestepSampler, rng, size=None):
    """Draw noise levels (or times) in the sampler's own space."""
    if ts.kind == "min":
        return np.full(size, ts.lo) if size is not None else ts.lo
    if ts.kind == "max":
        return np.full(size, ts.hi) if size is not None else ts.hi
    return rng.uniform(ts.lo, ts.hi, size)


# --- gradients ---------------------------------------------------------------

@dataclass(frozen=True)
class Terms:
    entropy: bool = True
    score: bool = True
    repulsion: bool = True


def _expert_grads(m: MoEParams, snap: Snapshot, zs, states, eps, t, teacher, schedule,
                  perturb: bool = False, eps_perturb=None, terms: Terms = Terms(), phi=None):
    """Pathwise gradients for experts ``zs`` (K,).

    ``states`` (K, M, state_dim), ``eps`` (K, M, N, d), ``t`` (K, M, N)
    diffusion times; ``phi`` optionally holds the features of ``states``. Returns gradients for ``W[zs]``, ``b[zs]``,
    ``chol_raw[zs]``, each averaged over the M*N draws.
    """
    zs = np.asarray(zs)
    K, M, N, d = eps.shape
    ds = states.shape[-1]
    if phi is None:
        phi = m.features(states.reshape(-1, ds)).reshape(K, M, -1)
    chols = m.chols[zs]
    mean = np.matmul(phi, np.swapaxes(m.W[zs], -1, -2)) + m.b[zs][:, None, :]
    a = mean[:, :, None, :] + np.matmul(eps, np.swapaxes(chols, -1, -2)[:, None])

    grad_a = np.zeros_like(a)
    s_rep = np.broadcast_to(states[:, :, None, :], (K, M, N, ds))
    if terms.score:
        if perturb:
            alpha = schedule.alpha(t)[..., None]
            a_score = forward_perturb(a, t, eps_perturb, schedule)
        else:
            alpha = 1.0
            a_score = a
        f = teacher(a_score.reshape(-1, d), s_rep.reshape(-1, ds), t.reshape(-1)).reshape(a.shape)
        _check(f, "score", K, M, N)
        grad_a -= alpha * f
    if terms.repulsion:
        rep = snap.repulsion(a, s_rep, zs[:, None, None], phi[:, :, None, :])
        _check(rep, "repulsion", K, M, N)
        grad_a -= rep

    count = M * N
    g_b = grad_a.sum(axis=(1, 2)) / count
    g_W = np.matmul(np.swapaxes(grad_a.sum(axis=2), -1, -2), phi) / count
    g_L = np.tril(np.matmul(np.swapaxes(grad_a.reshape(K, M * N, d), -1, -2),
                            eps.reshape(K, M * N, d)) / count)
    g_raw = chol_grad_to_raw(g_L, chols)
    if terms.entropy:
        # d(-H)/d(log L_ii) = -1
        g_raw = g_raw - np.eye(d)[None]
    return {"W": g_W, "b": g_b, "chol_raw": g_raw}


def _check(x, tag, K, M, N):
    bad = ~np.all(np.isfinite(x.reshape(K, M, N, -1)), axis=(2, 3))
    if np.any(bad):
        k, i = np.argwhere(bad)[0]
        raise NonFiniteError(f"non-finite {tag} term for expert slot {k}, state {i}",
                             {"term": tag, "expert_slot": int(k), "state": int(i)})


def expert_m_step_grad(m: MoEParams, snap: Snapshot, z: int, states, teacher,
                       ts: TimestepSampler, schedule: NoiseSchedule, rng, mc_samples: int = 1,
                       perturb: bool = False, terms: Terms = Terms()):
    """Averaged reparameterized gradient of expert ``z``'s objective on a
    batch of states."""
    if not 0 <= z < m.n_experts:
        raise IndexError(f"expert index {z} out of range")
    states = np.atleast_2d(states)
    if states.shape[0] == 0:
        raise ValueError("empty state batch")
    M, d = states.shape[0], m.action_dim
    eps = rng.standard_normal((1, M, mc_samples, d))
    t = ts.to_time(sample_timestep(ts, rng, (1, M, mc_samples)), schedule)
    eps_p = rng.standard_normal(eps.shape) if perturb else None
    g = _expert_grads(m, snap, [z], states[None], eps, t, teacher, schedule, perturb, eps_p, terms)
    return {k: v[0] for k, v in g.items()}


def expert_objective(m: MoEParams, snap: Snapshot, z: int, states, eps, t, log_density,
                     terms: Terms = Terms()) -> float:
    """Common-random-numbers estimate of expert ``z``'s upper-bound term.

    ``log_density(a, s, t)`` is the (noised) teacher log density; entropy is
    taken in closed form.
    """
    states = np.atleast_2d(states)
    M, N, d = eps.shape
    chol = m.chols[z]
    mean = m.expert_means(states)[:, z]
    a = mean[:, None, :] + np.einsum("ij,mnj->mni", chol, eps)
    s_rep = np.broadcast_to(states[:, None, :], a.shape[:-1] + (states.shape[1],))
    val = 0.0
    if terms.entropy:
        val -= 0.5 * d * (1.0 + LOG_2PI) + np.sum(np.log(np.diag(chol)))
    if terms.score:
        val -= np.mean(log_density(a.reshape(-1, d), s_rep.reshape(-1, states.shape[1]), t.reshape(-1)))
    if terms.repulsion:
        val -= np.mean(snap.log_responsibilities(a, s_rep)[..., z])
    return float(val)


def gating_targets(snap: Snapshot, states, actions) -> np.ndarray:
    return e_step_responsibilities(snap, actions, states)


def gating_cross_entropy(m: MoEParams, states, targets) -> float:
    logp = log_softmax(m.gating_logits(states))
    return float(-np.mean(np.sum(targets * logp, axis=1)))


def gating_m_step_grad(m: MoEParams, snap: Snapshot, states, actions, targets=None, phi=None):
    """Softmax cross-entropy gradient of the gating towards snapshot
    responsibilities of dataset pairs."""
    states = np.atleast_2d(states)
    if states.shape[0] == 0:
        raise ValueError("empty gating batch")
    if phi is None:
        phi = m.features(states)
    if targets is None:
        targets = np.exp(snap.log_responsibilities(np.atleast_2d(actions), states, phi))
    g = (softmax(phi @ m.V.T + m.c) - targets) / states.shape[0]
    return {"V": g.T @ phi, "c": g.sum(axis=0)}


# --- bound diagnostics ------------------------------------------------------

def bound_identity_error(m: MoEParams, snap: Snapshot, states, rng, n: int = 100) -> float:
    """Max deviation of ``log q(a|s) = log q(z|s) + log q_z(a|s) - log q~(z|a,s)``
    over ``n`` random ``(s, z, a)`` triples drawn from ``m``."""
    states = np.atleast_2d(states)
    s = states[rng.integers(0, states.shape[0], n)]
    z, a = moe_sample(m, s, rng)
    joint = m.joint_log_probs(a, s)
    lhs = logsumexp(joint, axis=1)
    rhs = joint[np.arange(n), z] - snap.log_responsibilities(a, s)[np.arange(n), z]
    return float(np.max(np.abs(lhs - rhs)))


def upper_bound_estimate(m: MoEParams, snap: Snapshot, states, log_target, rng, n_per_state: int = 1):
    """Shared-sample Monte Carlo estimates of the upper bound U and the reverse
    KL J. Returns ``(U, J, se_U, se_J, se_diff)``."""
    states = np.repeat(np.atleast_2d(states), n_per_state, axis=0)
    z, a = moe_sample(m, states, rng)
    joint = m.joint_log_probs(a, states)
    log_q = logsumexp(joint, axis=1)
    log_pi = log_target(a, states)
    idx = np.arange(len(z))
    u = joint[idx, z] - log_pi - snap.log_responsibilities(a, states)[idx, z]
    j = log_q - log_pi
    n = len(u)
    se = lambda x: float(np.std(x, ddof=1) / np.sqrt(n))  # noqa: E731
    return float(u.mean()), float(j.mean()), se(u), se(j), se(u - j)


# --- outer loop ---------------------------------------------------------------

@dataclass
class VDDConfig:
    n_experts: int = 8
    iterations: int = 2000
    batch_states: int = 64
    mc_samples: int = 1
    lr: float = 1e-3
    lr_final: float | None = None   # geometric decay of both rates towards lr_final * rate / lr
    gating_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    timestep: str = "interval"
    t_lo: float = 0.2
    t_hi: float = 0.5
    seed: int = 0
    perturb_action_before_score: bool = False
    gating_batch: int = 256
    train_gating: bool = True
    init_jitter: float = 0.1
    init_cov_scale: float = 0.25
    log_every: int = 50
    kl_states: int = 64
    kl_samples: int = 8
    check_bound: bool = True
    bound_triples: int = 100

    def validate(self, dataset_size: int | None = None):
        if self.n_experts < 1:
            raise ConfigError("vdd.n_experts must be >= 1")
        for name in ("iterations", "batch_states", "mc_samples", "gating_batch", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"vdd.{name} must be positive")
        if self.lr <= 0 or self.gating_lr <= 0:
            raise ConfigError("vdd learning rates must be positive")
        if self.lr_final is not None and self.lr_final <= 0:
            raise ConfigError("vdd.lr_final must be positive")
        if dataset_size is not None and self.batch_states > dataset_size:
            raise ConfigError("vdd.batch_states exceeds the dataset size")

    def sampler(self, schedule: NoiseSchedule) -> TimestepSampler:
        if self.timestep == "interval":
            return TimestepSampler.for_schedule("interval", schedule, self.t_lo, self.t_hi)
        return TimestepSampler.for_schedule(self.timestep, schedule)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    bound_errors: list = field(default_factory=list)

    COLUMNS = ("iteration", "reverse_kl_mc", "reverse_kl_se", "gating_entropy",
               "bound_identity_err")

    def columns(self, n_experts: int) -> list:
        return list(self.COLUMNS) + [f"expert{z}_mean_norm" for z in range(n_experts)]


def vdd_train(config: VDDConfig, teacher, schedule: NoiseSchedule, states, actions,
              init: MoEParams | None = None, features=None, on_iteration=None):
    """Distill ``teacher`` (a score function) into a mixture of experts.

    ``states``/``actions`` are the dataset pairs: states feed the expert
    updates, pairs feed the gating update. If ``teacher`` has a
    ``log_density(a, s)`` method the log carries reverse-KL estimates.
    ``on_iteration(it, m, snap)`` is called after each E-step (before the
    M-steps) when given. Returns ``(MoEParams, TrainLog)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("empty dataset")
    config.validate(states.shape[0])
    seq = np.random.SeedSequence(config.seed)
    train_seq, log_seq, init_seq = seq.spawn(3)
    rng = np.random.default_rng(train_seq)
    log_rng = np.random.default_rng(log_seq)
    if init is None:
        if features is None:
            raise ValueError("need either an initial mixture or a feature map")
        m = init_moe(config.n_experts, states, actions, features, np.random.default_rng(init_seq),
                     config.init_jitter, config.init_cov_scale)
    else:
        m = init.copy()
    if m.n_experts != config.n_experts:
        raise ConfigError("initial mixture has the wrong number of experts")
    ts = config.sampler(schedule)
    Z, d, n = m.n_experts, m.action_dim, states.shape[0]
    betas = (config.beta1, config.beta2)
    p = m.param_dict()
    opt_e = Adam({k: p[k] for k in ("W", "b", "chol_raw")}, config.lr, betas, config.adam_eps)
    opt_g = Adam({k: p[k] for k in ("V", "c")}, config.gating_lr, betas, config.adam_eps)
    log_density = getattr(teacher, "log_density", None)
    eval_states = states[log_rng.integers(0, n, config.kl_states)]
    tlog = TrainLog()
    M, N = config.batch_states, config.mc_samples
    zs = np.arange(Z)
    decay = 1.0
    if config.lr_final is not None:
        decay = (config.lr_final / config.lr) ** (1.0 / max(config.iterations - 1, 1))
    phi_data = m.features(states)  # the feature map never changes during training

    for it in range(config.iterations):
        snap = Snapshot(m)
        bound_err = float("nan")
        if config.check_bound:
            bound_err = bound_identity_error(m, snap, states, log_rng, config.bound_triples)
            tlog.bound_errors.append(bound_err)
        if on_iteration is not None:
            on_iteration(it, m, snap)

        idx = rng.integers(0, n, (Z, M))
        eps = rng.standard_normal((Z, M, N, d))
        t = ts.to_time(sample_timestep(ts, rng, (Z, M, N)), schedule)
        eps_p = rng.standard_normal(eps.shape) if config.perturb_action_before_score else None
        grads = _expert_grads(m, snap, zs, states[idx], eps, t, teacher, schedule,
                              config.perturb_action_before_score, eps_p, phi=phi_data[idx])
        opt_e.step(grads)

        if config.train_gating:
            gidx = rng.integers(0, n, min(config.gating_batch, n))
            opt_g.step(gating_m_step_grad(m, snap, states[gidx], actions[gidx], phi=phi_data[gidx]))

        opt_e.lr *= decay
        opt_g.lr *= decay
        if not all(np.all(np.isfinite(v)) for v in p.values()):
            raise NonFiniteError(f"parameters became non-finite at iteration {it}", {"iteration": it})

        if it % config.log_every == 0 or it == config.iterations - 1:
            tlog.rows.append(_log_row(it, m, log_density, eval_states, config, log_rng, bound_err))
    return m, tlog


def _log_row(it, m, log_density, eval_states, config, rng, bound_err):
    from .metrics import reverse_kl_mc

    kl, kl_se = float("nan"), float("nan")
    if log_density is not None:
        kl, kl_se = reverse_kl_mc(m, log_density, eval_states, config.kl_samples, rng)
    gate = softmax(m.gating_logits(eval_states))
    entropy = float(-np.mean(np.sum(gate * np.log(np.maximum(gate, 1e-300)), axis=1)))
    norms = np.mean(np.linalg.norm(m.expert_means(eval_states), axis=-1), axis=0)
    row = {"iteration": it, "reverse_kl_mc": kl, "reverse_kl_se": kl_se,
           "gating_entropy": entropy, "bound_identity_err": bound_err}
    row.update({f"expert{z}_mean_norm": float(v) for z, v in enumerate(norms)})
    return row


def config_dict(config: VDDConfig) -> dict:
    return asdict(config)
