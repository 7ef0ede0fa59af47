"""Toy multi-modal behaviour tasks and demonstration datasets.

``StaticGMMTask`` is a one-step task: the action distribution at state ``s``
is a ring of Gaussian modes translated by ``s``. ``Avoid2DTask`` is a
point-mass navigation task: the state is a 2D position, the action a 2D
velocity integrated for one unit step, and four scripted routes pass a first
obstacle above or below and then one of the two second-layer obstacles above
or below.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sde import ConditionalGMMTarget, GMMTarget, circle_gmm

FAIL = -1


@dataclass
class Dataset:
    states: np.ndarray
    actions: np.ndarray
    traj_ids: np.ndarray
    steps: np.ndarray
    behaviors: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.states.shape[0]
        for name in ("actions", "traj_ids", "steps", "behaviors"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"dataset column {name} has the wrong length")

    def __len__(self):
        return self.states.shape[0]

    def behavior_counts(self) -> dict:
        """Trajectories per behaviour label."""
        first = np.unique(self.traj_ids, return_index=True)[1]
        labels, counts = np.unique(self.behaviors[first], return_counts=True)
        return {int(k): int(v) for k, v in zip(labels, counts)}


# --- static ring task --------------------------------------------------------

@dataclass
class StaticGMMTask:
    n_modes: int = 8
    radius: float = 1.0
    mode_std: float = 0.1
    state_box: float = 1.0
    translate: float = 1.0
    kind: str = field(default="static_gmm", init=False)

    state_dim = 2
    action_dim = 2
    horizon = 1

    @property
    def n_behaviors(self) -> int:
        return self.n_modes

    def target(self, mode_std: float | None = None) -> GMMTarget:
        std = self.mode_std if mode_std is None else mode_std
        return circle_gmm(self.n_modes, self.radius, std, translate=self.translate)

    def sample_initial_states(self, n, rng):
        return rng.uniform(-self.state_box, self.state_box, (n, 2))

    def classify_actions(self, states, actions):
        means = self.target().mode_means(states)
        return np.argmin(np.linalg.norm(means - actions[:, None, :], axis=-1), axis=1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_modes": self.n_modes, "radius": self.radius,
                "mode_std": self.mode_std, "state_box": self.state_box, "translate": self.translate}


# --- obstacle avoidance task -------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Avoid2DTask:
    """Reach the goal line ``x >= goal_x`` without touching an obstacle.

    Route ``r = 2 * i + j`` passes obstacle one on side ``i`` (0 above, 1
    below) and the second-layer obstacle on that side on side ``j``.
    """

    offset: float = 4.0          # lateral displacement of each decision
    x_turn1: float = 5.0
    x_turn2: float = 15.0
    turn_width: float = 1.0
    gain: float = 0.5            # pull towards the route centreline, per unit
    speed: float = 1.0
    obstacle_x: tuple = (10.0, 20.0)
    obstacle_radius: float = 1.5
    goal_x: float = 30.0
    wall_y: float = 12.0
    horizon: int = 60
    start_y: float = 0.5         # initial y ~ U(-start_y, start_y), x = 0
    noise_std: float = 0.5       # demonstration action noise, also the behaviour-policy std
    route_width: float = 1.0     # state-space width of each route's basin
    prefer_above: float = 0.6    # behaviour-policy probability of the upper branch at each decision
    kind: str = field(default="avoid2d", init=False)

    state_dim = 2
    action_dim = 2
    n_behaviors = 4

    @property
    def obstacles(self) -> np.ndarray:
        x1, x2 = self.obstacle_x
        return np.array([[x1, 0.0], [x2, self.offset], [x2, -self.offset]])

    @property
    def signs(self) -> np.ndarray:
        """``(4, 2)`` lateral direction of each route's two decisions."""
        return np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)

    def route_y(self, x):
        """Centreline ``y`` and slope of every route at ``x``: ``(n, 4)`` each."""
        x = np.asarray(x, dtype=np.float64)[..., None]
        w = self.turn_width
        s1 = _sigmoid((x - self.x_turn1) / w)
        s2 = _sigmoid((x - self.x_turn2) / w)
        sg = self.signs
        y = self.offset * (sg[:, 0] * s1 + sg[:, 1] * s2)
        dy = self.offset * (sg[:, 0] * s1 * (1 - s1) + sg[:, 1] * s2 * (1 - s2)) / w
        return y, dy

    def route_actions(self, states) -> np.ndarray:
        """``(n, 4, 2)`` scripted mean velocity of every route."""
        states = np.atleast_2d(states)
        y, dy = self.route_y(states[:, 0])
        vy = self.speed * (dy + self.gain * (y - states[:, 1:2]))
        vx = np.full_like(vy, self.speed)
        return np.stack([vx, vy], axis=-1)

    def target(self) -> "Avoid2DTarget":
        return Avoid2DTarget(self)

    def sample_initial_states(self, n, rng):
        return np.stack([np.zeros(n), rng.uniform(-self.start_y, self.start_y, n)], axis=1)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "kind"}
        out["obstacle_x"] = list(self.obstacle_x)
        return {"kind": self.kind, **out}

    # dynamics ----------------------------------------------------------------
    def segment_hits(self, p0, p1) -> np.ndarray:
        """True where the segment ``p0 -> p1`` touches an obstacle or wall."""
        d = p1 - p0
        hit = np.zeros(p0.shape[0], dtype=bool)
        dd = np.maximum(np.sum(d * d, axis=1), 1e-300)
        for c in self.obstacles:
            u = np.clip(np.sum((c - p0) * d, axis=1) / dd, 0.0, 1.0)
            closest = p0 + u[:, None] * d
            hit |= np.sum((closest - c) ** 2, axis=1) < self.obstacle_radius ** 2
        hit |= np.abs(p1[:, 1]) > self.wall_y
        return hit

    def label(self, y_cross1, y_cross2) -> np.ndarray:
        first = np.where(y_cross1 > 0.0, 0, 1)
        centre = np.where(first == 0, self.offset, -self.offset)
        second = np.where(y_cross2 > centre, 0, 1)
        return 2 * first + second


class Avoid2DTarget(ConditionalGMMTarget):
    """Behaviour policy of :class:`Avoid2DTask`: one Gaussian per route with
    weights ``exp(-(y - route_y(x))^2 / (2 w^2))`` normalized over routes."""

    def __init__(self, task: Avoid2DTask):
        super().__init__(np.repeat((task.noise_std * np.eye(2))[None], 4, axis=0))
        self.task = task
        self.state_dim = 2

    def components(self, states):
        states = np.atleast_2d(states)
        y, _ = self.task.route_y(states[:, 0])
        p = self.task.prefer_above
        up = self.task.signs > 0
        log_prior = np.sum(np.where(up, np.log(p), np.log1p(-p)), axis=1)
        logits = -0.5 * ((states[:, 1:2] - y) / self.task.route_width) ** 2 + log_prior
        log_w = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
        return log_w, self.task.route_actions(states)


def make_task(kind: str, **kwargs):
    if kind in ("static_gmm", "static"):
        return StaticGMMTask(**kwargs)
    if kind == "avoid2d":
        return Avoid2DTask(**kwargs)
    raise ValueError(f"unknown task kind {kind!r}")


# --- demonstrations ---------------------------------------------------------

def generate_dataset(task, trajectories_per_behavior: int, noise_std: float | None = None,
                     seed: int = 0) -> Dataset:
    """Scripted demonstrations, exactly ``trajectories_per_behavior`` per label."""
    if trajectories_per_behavior < 1:
        raise ValueError("trajectories_per_behavior must be positive")
    rng = np.random.default_rng(seed)
    n = trajectories_per_behavior
    if isinstance(task, StaticGMMTask):
        std = task.mode_std if noise_std is None else noise_std
        target = task.target(std)
        S, A, B = [], [], []
        for mode in range(task.n_modes):
            s = task.sample_initial_states(n, rng)
            mean = target.mode_means(s)[:, mode]
            S.append(s)
            A.append(mean + std * rng.standard_normal((n, 2)))
            B.append(np.full(n, mode))
        S, A, B = np.concatenate(S), np.concatenate(A), np.concatenate(B)
        ids = np.arange(len(S))
        meta = {"task": task.to_dict(), "seed": seed, "noise_std": std,
                "counts": {str(k): n for k in range(task.n_modes)}}
        return Dataset(S, A, ids, np.zeros(len(S), dtype=int), B, meta)

    std = task.noise_std if noise_std is None else noise_std
    S, A, ids, steps, B = [], [], [], [], []
    tid = 0
    for route in range(task.n_behaviors):
        s0 = task.sample_initial_states(n, rng)
        for j in range(n):
            s = s0[j].copy()
            for k in range(task.horizon):
                a = task.route_actions(s)[0, route] + std * rng.standard_normal(2)
                S.append(s.copy())
                A.append(a)
                ids.append(tid)
                steps.append(k)
                B.append(route)
                s = s + a
                if s[0] >= task.goal_x:
                    break
            tid += 1
    meta = {"task": task.to_dict(), "seed": seed, "noise_std": std,
            "counts": {str(r): n for r in range(task.n_behaviors)}}
    return Dataset(np.array(S), np.array(A), np.array(ids), np.array(steps), np.array(B), meta)


# --- policies -----------------------------------------------------------------

class ScriptedPolicy:
    def __init__(self, task: Avoid2DTask, route: int, noise_std: float = 0.0):
        self.task, self.route, self.noise_std = task, route, noise_std

    def __call__(self, states, rng):
        a = self.task.route_actions(states)[:, self.route]
        if self.noise_std:
            a = a + self.noise_std * rng.standard_normal(a.shape)
        return a


class ZeroPolicy:
    def __call__(self, states, rng):
        return np.zeros_like(np.atleast_2d(states), dtype=np.float64)


class RandomPolicy:
    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def __call__(self, states, rng):
        return self.scale * rng.standard_normal(np.atleast_2d(states).shape)


class MoEPolicy:
    """Executes a mixture: pick an expert per step, act with its mean."""

    def __init__(self, m, selection: str = "sample-then-mean"):
        self.m, self.selection = m, selection

    def __call__(self, states, rng):
        from .moe import moe_mode_action, moe_sample

        if self.selection == "sample":
            return moe_sample(self.m, states, rng)[1]
        return moe_mode_action(self.m, states, self.selection, rng)[1]


class UniformGatingPolicy(MoEPolicy):
    """Ignores the learned gating and picks experts uniformly at random."""

    def __call__(self, states, rng):
        states = np.atleast_2d(states)
        z = rng.integers(0, self.m.n_experts, states.shape[0])
        return self.m.expert_means(states)[np.arange(states.shape[0]), z]


class TeacherPolicy:
    """Acts with one reverse-SDE sample of the teacher per step."""

    def __init__(self, score, schedule, n_steps: int = 64):
        self.score, self.schedule, self.n_steps = score, schedule, n_steps

    def __call__(self, states, rng):
        from .sde import reverse_sde_sample

        return reverse_sde_sample(self.score, self.schedule, states, self.n_steps, rng)


# --- rollouts -----------------------------------------------------------------

@dataclass
class RolloutResult:
    trajectories: np.ndarray   # (n, T+1, 2), NaN after termination
    success: np.ndarray        # (n,) bool
    behavior: np.ndarray       # (n,) label or FAIL
    lengths: np.ndarray


def rollout_batch(policy, task, s0, max_steps: int | None = None, rng=None) -> RolloutResult:
    """Closed-loop rollouts from every row of ``s0`` at once."""
    rng = np.random.default_rng(rng)
    s = np.array(np.atleast_2d(s0), dtype=np.float64)
    n = s.shape[0]
    if isinstance(task, StaticGMMTask):
        a = policy(s, rng)
        ok = np.all(np.isfinite(a), axis=1)
        labels = np.where(ok, task.classify_actions(s, np.nan_to_num(a)), FAIL)
        return RolloutResult(np.stack([s, s + a], axis=1), ok, labels, np.ones(n, dtype=int))
    T = task.horizon if max_steps is None else max_steps
    traj = np.full((n, T + 1, 2), np.nan)
    traj[:, 0] = s
    alive = np.ones(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    y1 = np.full(n, np.nan)
    y2 = np.full(n, np.nan)
    lengths = np.full(n, T)
    x1, x2 = task.obstacle_x
    for k in range(T):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        a = policy(s[idx], rng)
        new = s[idx] + a
        finite = np.all(np.isfinite(new), axis=1)
        new_safe = np.where(finite[:, None], new, s[idx])
        hit = task.segment_hits(s[idx], new_safe) | ~finite
        for xc, store in ((x1, y1), (x2, y2)):
            cross = finite & (s[idx, 0] < xc) & (new_safe[:, 0] >= xc)
            u = (xc - s[idx, 0]) / np.where(cross, new_safe[:, 0] - s[idx, 0], 1.0)
            yc = s[idx, 1] + u * (new_safe[:, 1] - s[idx, 1])
            store[idx[cross]] = yc[cross]
        done = ~hit & (new_safe[:, 0] >= task.goal_x)
        s[idx] = new_safe
        traj[idx, k + 1] = new_safe
        success[idx[done]] = True
        ended = idx[hit | done]
        alive[ended] = False
        lengths[ended] = k + 1
    labels = np.full(n, FAIL)
    ok = success & np.isfinite(y1) & np.isfinite(y2)
    labels[ok] = task.label(y1[ok], y2[ok])
    success &= ok
    return RolloutResult(traj, success, labels, lengths)


def rollout(policy, task, s0, max_steps: int | None = None, rng=None):
    """Single rollout; returns ``(trajectory, success, behavior)``."""
    res = rollout_batch(policy, task, np.atleast_2d(s0), max_steps, rng)
    traj = res.trajectories[0]
    traj = traj[: res.lengths[0] + 1] if traj.ndim == 2 and len(traj) > 2 else traj
    return traj, bool(res.success[0]), int(res.behavior[0])
