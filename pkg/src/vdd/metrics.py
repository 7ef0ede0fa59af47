"""Evaluation: success rate, task entropy, reverse KL, mode coverage, timing."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedOperation
from .moe import MoEParams, moe_log_pdf, moe_sample
from .tasks import FAIL, rollout_batch


def behavior_entropy(freqs, n_behaviors: int) -> float:
    """Entropy of one frequency vector in base ``n_behaviors`` (0 log 0 = 0)."""
    p = np.asarray(freqs, dtype=np.float64)
    total = p.sum()
    if total <= 0 or n_behaviors < 2:
        return 0.0
    p = p / total
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)) / np.log(n_behaviors))


@dataclass
class PolicyEvaluation:
    success_rate: float
    success_se: float
    task_entropy: float
    flagged_s0: list = field(default_factory=list)
    counts: np.ndarray | None = None   # (n_s0, n_behaviors)

    def as_row(self) -> dict:
        return {"success_rate": self.success_rate, "success_se": self.success_se,
                "task_entropy": self.task_entropy, "n_flagged_s0": len(self.flagged_s0)}


def evaluate_policy(policy, task, n_s0: int, rollouts_per_s0: int, rng, s0=None) -> PolicyEvaluation:
    """Roll out ``rollouts_per_s0`` times from each of ``n_s0`` initial states.

    Failed rollouts carry no behaviour mass; an initial state whose rollouts
    all fail contributes zero entropy and is listed in ``flagged_s0``.
    """
    if n_s0 < 1 or rollouts_per_s0 < 1:
        raise ValueError("n_s0 and rollouts_per_s0 must be >= 1")
    rng = np.random.default_rng(rng)
    if s0 is None:
        s0 = task.sample_initial_states(n_s0, rng)
    s0 = np.atleast_2d(s0)[:n_s0]
    starts = np.repeat(s0, rollouts_per_s0, axis=0)
    res = rollout_batch(policy, task, starts, rng=rng)
    labels = res.behavior.reshape(n_s0, rollouts_per_s0)
    counts = np.stack([np.sum(labels == b, axis=1) for b in range(task.n_behaviors)], axis=1)
    ents, flagged = [], []
    for i in range(n_s0):
        if counts[i].sum() == 0:
            flagged.append(i)
            ents.append(0.0)
        else:
            ents.append(behavior_entropy(counts[i], task.n_behaviors))
    succ = res.success.astype(np.float64)
    se = float(np.std(succ, ddof=1) / np.sqrt(len(succ))) if len(succ) > 1 else 0.0
    return PolicyEvaluation(float(succ.mean()), se, float(np.mean(ents)), flagged, counts)


def task_entropy(policy, task, n_s0: int, rollouts_per_s0: int, rng) -> float:
    return evaluate_policy(policy, task, n_s0, rollouts_per_s0, rng).task_entropy


def success_rate(policy, task, n_s0: int, rollouts_per_s0: int, rng):
    """Fraction of successful rollouts and its standard error."""
    ev = evaluate_policy(policy, task, n_s0, rollouts_per_s0, rng)
    return ev.success_rate, ev.success_se


def _log_density_fn(teacher):
    if callable(getattr(teacher, "log_density", None)):
        return teacher.log_density
    if callable(getattr(teacher, "log_pdf", None)):
        return teacher.log_pdf
    if callable(teacher) and not hasattr(teacher, "schedule"):
        return teacher
    raise UnsupportedOperation("teacher does not expose a tractable log density")


def _sampler(q):
    if isinstance(q, MoEParams):
        return (lambda s, rng: moe_sample(q, s, rng)[1]), (lambda a, s: moe_log_pdf(q, a, s))
    return q.sample, q.log_pdf


def reverse_kl_mc(q, teacher, states, n_samples: int, rng):
    """``mean_s mean_i [log q(a_i|s) - log pi(a_i|s)]`` with ``a_i ~ q(.|s)``.

    Returns ``(estimate, standard_error)``; the error treats every sample as
    independent.
    """
    log_pi = _log_density_fn(teacher)
    sample, log_q = _sampler(q)
    states = np.repeat(np.atleast_2d(states), n_samples, axis=0)
    a = sample(states, rng)
    diff = log_q(a, states) - log_pi(a, states)
    se = float(np.std(diff, ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else float("nan")
    return float(np.mean(diff)), se


def mode_coverage(q, target, s, n_samples: int, rng, threshold: float = 0.2) -> int:
    """Modes receiving at least ``threshold / k`` of ``q``'s samples at state ``s``."""
    sample, _ = _sampler(q)
    states = np.repeat(np.atleast_2d(s)[:1], n_samples, axis=0)
    a = sample(states, rng)
    means = target.mode_means(states[:1])[0]
    nearest = np.argmin(np.linalg.norm(a[:, None, :] - means[None], axis=-1), axis=1)
    k = means.shape[0]
    mass = np.bincount(nearest, minlength=k) / n_samples
    return int(np.sum(mass >= threshold / k))


def mode_coverage_counts(q, target, s, n_samples, rng):
    sample, _ = _sampler(q)
    states = np.repeat(np.atleast_2d(s)[:1], n_samples, axis=0)
    a = sample(states, rng)
    means = target.mode_means(states[:1])[0]
    nearest = np.argmin(np.linalg.norm(a[:, None, :] - means[None], axis=-1), axis=1)
    return np.bincount(nearest, minlength=means.shape[0]) / n_samples


def score_grid_mse(score, reference, states, schedule, n_states: int = 8, n_grid: int = 15,
                   times=(0.1, 0.3, 0.5, 0.7), extent: float = 2.0, seed: int = 0) -> float:
    """Noise-scaled squared error ``mean |sigma (score - reference)|^2`` on an
    action grid around the data, at a few states and diffusion times."""
    rng = np.random.default_rng(seed)
    states = np.atleast_2d(states)
    s = states[rng.choice(states.shape[0], min(n_states, states.shape[0]), replace=False)]
    ref_call = reference if callable(reference) else reference.score
    g = np.linspace(-extent, extent, n_grid)
    base = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    errs = []
    for t in times:
        sig = float(schedule.sigma(np.array([t]))[0])
        for st in s:
            # centre the grid on the noised target's mean so off-support corners stay modest
            a = base * max(1.0, sig) + _noised_centre(reference, st, t, schedule)
            ss = np.repeat(st[None], a.shape[0], axis=0)
            tt = np.full(a.shape[0], t)
            errs.append(np.mean(np.sum((sig * (score(a, ss, tt) - ref_call(a, ss, tt))) ** 2, axis=1)))
    return float(np.mean(errs))


def _noised_centre(reference, s, t, schedule):
    target = getattr(reference, "target", None)
    if target is None:
        return np.zeros(2)
    log_w, means = target.components(np.atleast_2d(s))
    return float(schedule.alpha(np.array([t]))[0]) * np.sum(np.exp(log_w[0])[:, None] * means[0], axis=0)


# --- inference timing --------------------------------------------------------

@dataclass
class TimingRow:
    method: str
    nfe: int
    median_ms: float
    iqr_ms: float


def _time(fn, repetitions):
    fn()  # warm-up
    out = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out * 1e3


def inference_benchmark(moe: MoEParams, score, schedule, state, nfe_list=(1, 4, 8, 16),
                        repetitions: int = 200, seed: int = 0) -> list:
    """Wall-clock per generated action: one mixture forward pass versus
    reverse-SDE sampling with ``nfe`` score evaluations."""
    from .moe import moe_mode_action
    from .sde import reverse_sde_sample

    if repetitions < 100:
        raise ValueError("repetitions must be >= 100")
    rng = np.random.default_rng(seed)
    s = np.atleast_2d(state)
    rows = []
    ms = _time(lambda: moe_mode_action(moe, s, "sample-then-mean", rng), repetitions)
    q1, q2, q3 = np.percentile(ms, [25, 50, 75])
    rows.append(TimingRow("moe", 1, float(q2), float(q3 - q1)))
    for nfe in nfe_list:
        ms = _time(lambda: reverse_sde_sample(score, schedule, s, nfe, rng, moe.action_dim),
                   repetitions)
        q1, q2, q3 = np.percentile(ms, [25, 50, 75])
        rows.append(TimingRow("reverse_sde", int(nfe), float(q2), float(q3 - q1)))
    return rows
