"""
One expert, two modes
=====================

With a single Gaussian and a two-mode target, maximum likelihood spreads the
Gaussian over both modes while the reverse-KL student picks one of them.
"""
import numpy as np

from vdd.em import EMConfig, em_train
from vdd.moe import FeatureMap
from vdd.sde import AnalyticScore, GMMTarget, NoiseSchedule
from vdd.train import VDDConfig, vdd_train

half = 1.5
target = GMMTarget([0.5, 0.5], np.array([[-half, 0.0], [half, 0.0]]),
                   np.array([0.2 * np.eye(2)] * 2))
schedule = NoiseSchedule("ve", 0.01, 10.0)
rng = np.random.default_rng(0)
states = np.zeros((1000, 2))      # the target ignores the state here
actions = target.sample(states, rng)
feats = FeatureMap("identity", 2)

em, _ = em_train(states, actions, EMConfig(n_experts=1, iterations=5), features=feats)
cfg = VDDConfig(n_experts=1, iterations=1500, lr=1e-2, lr_final=1e-4, timestep="min", seed=0)
vdd, _ = vdd_train(cfg, AnalyticScore(target, schedule), schedule, states, actions, features=feats)

for name, m in (("EM", em), ("VDD", vdd)):
    cov = m.chols[0] @ m.chols[0].T
    print(f"{name:>3}: mean {np.round(m.b[0], 3)}  variance along the mode axis {cov[0, 0]:.3f}")
print(f"single-mode variance {0.04:.3f}, half-separation squared {half ** 2:.3f}")
