"""A two-hidden-layer score network with hand-written backpropagation and
denoising-score-matching training.

The network sees ``x = [a * c_in(sigma), s, log sigma]`` with
``c_in = 1 / sqrt(sigma^2 + sigma_data^2)`` and its raw output ``F`` is read
as ``sigma * score``. Under that scaling the denoising target is simply
``F = -eps``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError
from .optim import Adam
from .sde import NoiseSchedule

log = logging.getLogger(__name__)

LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")
# VP has sigma(0) = 0; the network input and output scaling use this floor
SIGMA_FLOOR = 1e-4
SCORENET_VERSION = 1


def _act(name, x):
    if name == "tanh":
        y = np.tanh(x)
        return y, 1.0 - y * y
    if name == "identity":
        return x, np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class ScoreNet:
    action_dim: int
    state_dim: int
    widths: tuple = (64, 64)
    activation: str = "tanh"
    sigma_data: float = 1.0
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.action_dim + self.state_dim + 1

    @classmethod
    def init(cls, action_dim, state_dim, widths=(64, 64), activation="tanh",
             sigma_data=1.0, rng=None) -> "ScoreNet":
        rng = np.random.default_rng(rng)
        net = cls(action_dim, state_dim, tuple(int(w) for w in widths), activation,
                  float(sigma_data))
        sizes = [net.input_dim, *net.widths, action_dim]
        for i in range(3):
            fan_in = sizes[i]
            net.params[f"W{i + 1}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (sizes[i + 1], fan_in))
            net.params[f"b{i + 1}"] = np.zeros(sizes[i + 1])
        return net

    def check(self):
        for k in LAYERS:
            if not np.all(np.isfinite(self.params[k])):
                raise NonFiniteError(f"ScoreNet weight {k} is non-finite", {"param": k})

    def copy(self) -> "ScoreNet":
        return ScoreNet(self.action_dim, self.state_dim, self.widths, self.activation,
                        self.sigma_data, {k: v.copy() for k, v in self.params.items()})

    def inputs(self, a, s, sigma):
        sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_FLOOR)
        c_in = 1.0 / np.sqrt(sigma ** 2 + self.sigma_data ** 2)
        x = np.concatenate([a * c_in[:, None], s, np.log(sigma)[:, None]], axis=1)
        return x, c_in


def scorenet_forward(net: ScoreNet, x):
    """Raw network output for inputs ``x`` of shape ``(n, input_dim)``."""
    p = net.params
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"expected {net.input_dim} inputs, got {x.shape[-1]}")
    h1, d1 = _act(net.activation, x @ p["W1"].T + p["b1"])
    h2, d2 = _act(net.activation, h1 @ p["W2"].T + p["b2"])
    out = h2 @ p["W3"].T + p["b3"]
    return out, (x, h1, d1, h2, d2)


def scorenet_backward(net: ScoreNet, cache, grad_out):
    """Gradients of ``sum(grad_out * out)`` w.r.t. every weight and the inputs."""
    x, h1, d1, h2, d2 = cache
    p = net.params
    g2 = (grad_out @ p["W3"]) * d2
    g1 = (g2 @ p["W2"]) * d1
    grads = {
        "W3": grad_out.T @ h2, "b3": grad_out.sum(0),
        "W2": g2.T @ h1, "b2": g2.sum(0),
        "W1": g1.T @ x, "b1": g1.sum(0),
    }
    return grads, g1 @ p["W1"]


def scorenet_forward_backward(net: ScoreNet, x, grad_out):
    out, cache = scorenet_forward(net, x)
    grads, grad_x = scorenet_backward(net, cache, grad_out)
    return out, grads, grad_x


class ScoreNetScore:
    """Adapts a trained :class:`ScoreNet` to the ``score(a, s, t)`` contract."""

    def __init__(self, net: ScoreNet, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule

    def __call__(self, a, s, t):
        a = np.atleast_2d(a)
        s = np.atleast_2d(s)
        if s.shape[0] == 1 and a.shape[0] > 1:
            s = np.broadcast_to(s, (a.shape[0], s.shape[1]))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (a.shape[0],))
        sigma = np.maximum(self.schedule.sigma(t), SIGMA_FLOOR)
        x, _ = self.net.inputs(a, s, sigma)
        out, _ = scorenet_forward(self.net, x)
        return out / sigma[:, None]

    def grad_wrt_action(self, a, s, t, grad_score):
        """Vector-Jacobian product ``grad_score . d score / d a``."""
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (a.shape[0],))
        sigma = np.maximum(self.schedule.sigma(t), SIGMA_FLOOR)
        x, c_in = self.net.inputs(a, s, sigma)
        _, _, gx = scorenet_forward_backward(self.net, x, grad_score / sigma[:, None])
        return gx[:, : self.net.action_dim] * c_in[:, None]


@dataclass
class DSMConfig:
    epochs: int = 400
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-4
    seed: int = 0
    widths: tuple = (64, 64)


@dataclass
class DSMLog:
    epoch_loss: list = field(default_factory=list)


def dsm_sample_sigma(schedule: NoiseSchedule, n, rng):
    """Log-uniform noise levels on the schedule's range (uniform ``t`` for VE)."""
    t = rng.random(n)
    if schedule.kind == "vp":
        t = np.maximum(np.rint(t * schedule.n_steps), 1) / schedule.n_steps
    return t


def dsm_loss_and_grads(net, schedule, a0, s, t, eps):
    alpha = schedule.alpha(t)
    sigma = np.maximum(schedule.sigma(t), SIGMA_FLOOR)
    a_t = alpha[:, None] * a0 + sigma[:, None] * eps
    x, _ = net.inputs(a_t, s, sigma)
    out, cache = scorenet_forward(net, x)
    resid = out + eps
    n = a0.shape[0]
    loss = float(np.sum(resid * resid) / n)
    grads, _ = scorenet_backward(net, cache, 2.0 * resid / n)
    return loss, grads


def dsm_train(states, actions, schedule: NoiseSchedule, net: ScoreNet | None = None,
              config: DSMConfig | None = None):
    """Fit ``net`` by denoising score matching on ``(s, a)`` pairs.

    Returns ``(net, DSMLog)``. The learning rate decays geometrically from
    ``lr`` to ``lr_final`` over the run.
    """
    config = config or DSMConfig()
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    n = actions.shape[0]
    if n == 0:
        raise ValueError("dsm_train needs a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = ScoreNet.init(actions.shape[1], states.shape[1], config.widths,
                            sigma_data=float(np.std(actions)), rng=rng)
    opt = Adam(net.params, lr=config.lr)
    decay = (config.lr_final / config.lr) ** (1.0 / max(config.epochs - 1, 1))
    bs = min(config.batch_size, n)
    log_ = DSMLog()
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start:start + bs]
            t = dsm_sample_sigma(schedule, bs, rng)
            eps = rng.standard_normal((bs, actions.shape[1]))
            loss, grads = dsm_loss_and_grads(net, schedule, actions[idx], states[idx], t, eps)
            if not np.isfinite(loss):
                raise NonFiniteError(f"DSM loss diverged at epoch {epoch}",
                                     {"epoch": epoch, "loss": loss})
            opt.step(grads)
            total += loss * bs
            count += bs
        log_.epoch_loss.append(total / count)
        opt.lr *= decay
        if epoch % 50 == 0:
            log.debug("dsm epoch %d loss %.5f", epoch, log_.epoch_loss[-1])
    net.check()
    return net, log_


def scorenet_to_dict(net: ScoreNet) -> dict:
    return {
        "version": SCORENET_VERSION,
        "d": net.action_dim, "state_dim": net.state_dim, "widths": list(net.widths),
        "activation": net.activation, "sigma_data": net.sigma_data,
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in net.params.items()},
    }


def scorenet_from_dict(d: dict) -> ScoreNet:
    from .errors import CheckpointVersionError

    if d.get("version") != SCORENET_VERSION:
        raise CheckpointVersionError(
            f"score-net checkpoint version {d.get('version')!r} is not supported "
            f"(expected {SCORENET_VERSION})")
    params = {k: np.asarray(w["data"], dtype=np.float64).reshape(w["shape"])
              for k, w in d["weights"].items()}
    return ScoreNet(int(d["d"]), int(d["state_dim"]), tuple(d["widths"]),
                    d["activation"], float(d["sigma_data"]), params)
