"""SVG figures: student samples against the target modes, and closed-loop
trajectories coloured by the expert that produced each step."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

MARKER_GID = "expert-mean"

# deterministic SVG output (no random ids, no timestamp)
plt.rcParams["svg.hashsalt"] = "vdd"
plt.rcParams["svg.fonttype"] = "none"


def _expert_colors(n):
    cmap = plt.get_cmap("tab10" if n <= 10 else "tab20")
    return [cmap(i % cmap.N) for i in range(n)]


def _mark_experts(ax, means, colors):
    for z, mu in enumerate(means):
        ax.plot([mu[0]], [mu[1]], marker="X", ms=11, mec="black", mew=1.0, color=colors[z],
                linestyle="none", gid=f"{MARKER_GID}-{z}", zorder=5)


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_samples(m, state, path, target=None, n_samples: int = 2000, seed: int = 0) -> None:
    """Scatter of mixture samples at one state, coloured by expert, with one
    marker per expert mean and (optionally) the target's mode centres."""
    from .moe import moe_sample

    rng = np.random.default_rng(seed)
    s = np.repeat(np.atleast_2d(state)[:1], n_samples, axis=0)
    z, a = moe_sample(m, s, rng)
    colors = _expert_colors(m.n_experts)
    fig, ax = plt.subplots(figsize=(5, 5))
    if target is not None:
        modes = target.mode_means(s[:1])[0]
        ax.scatter(modes[:, 0], modes[:, 1], s=120, facecolors="none", edgecolors="grey",
                   linewidths=1.5, label="target modes")
    for k in range(m.n_experts):
        sel = z == k
        if np.any(sel):
            ax.scatter(a[sel, 0], a[sel, 1], s=3, alpha=0.4, color=colors[k])
    _mark_experts(ax, m.expert_means(s[:1])[0], colors)
    ax.set_aspect("equal")
    ax.set_xlabel("a[0]")
    ax.set_ylabel("a[1]")
    ax.set_title(f"{m.n_experts} experts at s = ({s[0, 0]:.2f}, {s[0, 1]:.2f})")
    _save(fig, path)


class _RecordingPolicy:
    """Wraps a mixture policy and remembers which expert acted."""

    def __init__(self, m, selection):
        self.m, self.selection, self.log = m, selection, []

    def __call__(self, states, rng):
        from .moe import moe_mode_action

        z, a = moe_mode_action(self.m, states, self.selection, rng)
        self.log.append(np.atleast_1d(z))
        return a


def plot_trajectories(m, task, path, n_rollouts: int = 24, seed: int = 0,
                      selection: str = "sample-then-mean") -> None:
    """Avoid2D rollouts with each step coloured by the expert that chose it.

    Expert means at the first start state are marked as positions reached
    after one step, one marker per expert.
    """
    from .tasks import rollout_batch

    rng = np.random.default_rng(seed)
    s0 = task.sample_initial_states(n_rollouts, rng)
    pol = _RecordingPolicy(m, selection)
    # rollout_batch queries only the live rollouts; rebuild per-rollout expert ids
    res = rollout_batch(pol, task, s0, rng=rng)
    colors = _expert_colors(m.n_experts)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for c in task.obstacles:
        ax.add_patch(plt.Circle(c, task.obstacle_radius, color="0.6"))
    ax.axvline(task.goal_x, color="green", lw=1, ls="--")
    alive = np.ones(n_rollouts, dtype=bool)
    zs = np.full((n_rollouts, len(pol.log)), -1)
    for k, z in enumerate(pol.log):
        idx = np.flatnonzero(alive)
        zs[idx, k] = z
        alive[idx] = k + 1 < res.lengths[idx]
    for i in range(n_rollouts):
        L = res.lengths[i]
        pts = res.trajectories[i, : L + 1]
        segs = np.stack([pts[:-1], pts[1:]], axis=1)
        lc = LineCollection(segs, colors=[colors[z] for z in zs[i, :L]], linewidths=1.2)
        ax.add_collection(lc)
    means = m.expert_means(s0[:1])[0]
    _mark_experts(ax, s0[0] + means, colors)
    ax.set_xlim(-1, task.goal_x + 2)
    ax.set_ylim(-task.wall_y, task.wall_y)
    ax.set_aspect("equal")
    ax.set_title(f"success {res.success.mean():.2f}")
    _save(fig, path)


def count_expert_markers(svg_text: str) -> int:
    return svg_text.count(f'id="{MARKER_GID}-')
