"""
Diverse behaviour in obstacle avoidance
=======================================

Four scripted routes lead around two layers of obstacles. The teacher mixes
them, and a student with several experts should keep that diversity while
still reaching the goal.

Task entropy is 1 when all four routes are used equally from every start
state and 0 when a single route is always taken. Each eight-expert run
takes about a minute.
"""
from pathlib import Path

import numpy as np

from vdd.metrics import evaluate_policy
from vdd.moe import make_feature_map
from vdd.plots import plot_trajectories
from vdd.sde import AnalyticScore, NoiseSchedule
from vdd.tasks import Avoid2DTask, MoEPolicy, UniformGatingPolicy, generate_dataset
from vdd.train import VDDConfig, vdd_train

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

task = Avoid2DTask()
schedule = NoiseSchedule("ve", 0.05, 10.0)
teacher = AnalyticScore(task.target(), schedule)
data = generate_dataset(task, 25, seed=0)
print("demonstrations per route:", data.behavior_counts())


def distill(Z, seed=0):
    feats = make_feature_map("fourier", data.states, n_freq=128, bandwidth_scale=0.1, seed=seed)
    cfg = VDDConfig(n_experts=Z, iterations=4000, lr=1e-2, lr_final=1e-4, mc_samples=4,
                    seed=seed, log_every=4000)
    m, _ = vdd_train(cfg, teacher, schedule, data.states, data.actions, features=feats)
    return m


def report(name, policy):
    ev = evaluate_policy(policy, task, 20, 16, np.random.default_rng(1))
    print(f"{name:<22} success {ev.success_rate:.3f}  task entropy {ev.task_entropy:.3f}")


# %%
# One expert must commit to a route at every state, so its entropy is 0.

one = distill(1)
report("Z=1", MoEPolicy(one))

# %%
# Eight experts spread over the routes. Replacing the learned gating with a
# uniform pick shows what the gating contributes.

eight = distill(8)
report("Z=8", MoEPolicy(eight))
report("Z=8, uniform gating", UniformGatingPolicy(eight))

plot_trajectories(eight, task, OUT / "avoid_z8.svg")
plot_trajectories(one, task, OUT / "avoid_z1.svg")
print(f"figures in {OUT}")
