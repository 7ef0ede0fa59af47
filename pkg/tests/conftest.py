import numpy as np
import pytest

from vdd.moe import FeatureMap, MoEParams


def make_moe(rng, Z=3, d=2, state_dim=2, kind="identity", scale=0.5, gating=True):
    """Random small mixture with well-conditioned covariances."""
    feats = FeatureMap(kind, state_dim, n_freq=5, bandwidth=1.0, seed=int(rng.integers(1 << 30)))
    f = feats.dim
    raw = np.tril(0.3 * rng.standard_normal((Z, d, d)), -1)
    raw[:, np.arange(d), np.arange(d)] = np.log(rng.uniform(0.3, 0.8, (Z, d)))
    return MoEParams(scale * rng.standard_normal((Z, d, f)), rng.standard_normal((Z, d)), raw,
                     rng.standard_normal((Z, f)) if gating else np.zeros((Z, f)),
                     rng.standard_normal(Z) if gating else np.zeros(Z), feats)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = [v for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
             for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
