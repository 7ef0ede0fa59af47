"""
Distilling a learned score
==========================

Here the teacher is a small score network trained by denoising score
matching on ring samples, not the closed-form score. We check the network
on a grid, sample from it with the reverse SDE, and distill it into eight
experts. Training the network takes about half a minute.
"""
import numpy as np

from vdd.metrics import mode_coverage, score_grid_mse
from vdd.moe import FeatureMap
from vdd.scorenet import DSMConfig, ScoreNetScore, dsm_train
from vdd.sde import AnalyticScore, NoiseSchedule, reverse_sde_sample
from vdd.tasks import StaticGMMTask, generate_dataset
from vdd.train import VDDConfig, vdd_train

task = StaticGMMTask()
target = task.target()
schedule = NoiseSchedule("ve", 0.01, 10.0)
data = generate_dataset(task, 200, seed=0)

net, log = dsm_train(data.states, data.actions, schedule,
                     config=DSMConfig(epochs=1500, widths=(128, 128), seed=0))
score = ScoreNetScore(net, schedule)
exact = AnalyticScore(target, schedule)
print(f"DSM loss {log.epoch_loss[0]:.3f} -> {log.epoch_loss[-1]:.3f}")
print(f"grid MSE {score_grid_mse(score, exact, data.states, schedule):.3f} "
      f"(zero score: {score_grid_mse(lambda a, s, t: 0 * a, exact, data.states, schedule):.3f})")

# %%
# Reverse-SDE samples from the net and from the exact score, at one state.

s = np.array([0.5, -0.5])
for name, sc in (("net", score), ("exact", exact)):
    x = reverse_sde_sample(sc, schedule, s, 64, 0, n_samples=4000)
    share = np.bincount(task.classify_actions(np.tile(s, (len(x), 1)), x), minlength=8) / len(x)
    print(f"{name:>5} sampler: mean {np.round(x.mean(0), 3)}, mode shares {np.round(share, 3)}")

# %%
# Distill from the network. Coverage is judged against the true ring.

cfg = VDDConfig(n_experts=8, iterations=2000, lr=1e-2, lr_final=1e-3, t_lo=0.05, t_hi=0.2,
                init_cov_scale=1.0, seed=0)
student, _ = vdd_train(cfg, score, schedule, data.states, data.actions,
                       features=FeatureMap("identity", 2))
print("student covers", mode_coverage(student, target, s, 4000, np.random.default_rng(0)), "modes")
