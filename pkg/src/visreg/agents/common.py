from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import net as nn
from ..randomizers import RandomizationSpace

REGIMES = ("normal", "randomized", "regularized", "output_regularized")
TRAINERS = ("dqn", "reinforce")


class ConfigError(ValueError):
    pass


@dataclass
class AgentConfig:
    regime: str = "regularized"
    lam: float = 1.0
    trainer: str = "reinforce"
    space: RandomizationSpace | None = None
    episodes: int = 2000
    max_steps: int | None = None
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    batch_episodes: int = 4
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    hidden_activation: str = "tanh"
    conv: list[dict] | None = None
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.25
    warmup: int = 1000
    train_every: int = 1
    buffer_capacity: int = 20000
    target_update: int = 0
    double_q: bool = False
    stop_gradient_on_reference: bool = False
    output_penalty: str = "logits"
    dropout: float = 0.0
    weight_decay: float = 0.0
    zero_xi_init: bool = False

    def validate(self) -> "AgentConfig":
        if self.regime not in REGIMES:
            raise ConfigError(f"agent.regime: unknown regime {self.regime!r}")
        if self.trainer not in TRAINERS:
            raise ConfigError(f"agent.trainer: unknown trainer {self.trainer!r}")
        if self.lam < 0:
            raise ConfigError("agent.lam: must be >= 0")
        if self.regime in ("normal", "randomized") and self.lam != 0:
            raise ConfigError(f"agent.lam: regime {self.regime!r} requires lam = 0, got {self.lam}")
        if self.space is None:
            raise ConfigError("agent.space: a randomization space is required")
        if self.episodes < 0:
            raise ConfigError("agent.episodes: must be >= 0")
        if self.lr <= 0:
            raise ConfigError("agent.lr: must be > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("agent.dropout: must be in [0, 1)")
        if self.train_every < 1:
            raise ConfigError("agent.train_every: must be >= 1")
        if self.output_penalty not in ("logits", "probs"):
            raise ConfigError("agent.output_penalty: must be 'logits' or 'probs'")
        return self

    @property
    def penalty_target(self) -> str:
        return "output" if self.regime == "output_regularized" else "feature"


def default_conv() -> list[dict]:
    return [
        {"kind": "conv", "filters": 8, "kernel": 5, "stride": 2, "activation": "relu"},
        {"kind": "conv", "filters": 16, "kernel": 3, "stride": 2, "activation": "relu"},
        {"kind": "dense", "units": 64, "activation": "relu"},
    ]


def build_agent_network(cfg: AgentConfig, input_shape, n_out: int,
                        rng: np.random.Generator) -> nn.Network:
    if len(input_shape) == 3:
        arch = [dict(l) for l in (cfg.conv or default_conv())]
    else:
        arch = [{"kind": "dense", "units": n, "activation": cfg.hidden_activation} for n in cfg.hidden]
    arch.append({"kind": "dense", "units": n_out, "activation": "identity"})
    net = nn.build_network(input_shape, arch, rng, feature_layer_index=len(arch) - 2)
    if cfg.zero_xi_init and len(input_shape) == 1:
        net.layers[0].W[:, -1] = 0.0
    return net


def act(net: nn.Network, obs: np.ndarray, mode: str = "greedy", rng=None,
        epsilon: float = 0.0, n_actions: int | None = None) -> int:
    """Pick an action. Greedy ties go to the lowest index."""
    out = net.predict(obs)
    n = n_actions or out.shape[-1]
    scores = out[:n]
    if mode == "greedy":
        return int(np.argmax(scores))
    if mode == "epsilon":
        if rng.random() < epsilon:
            return int(rng.integers(n))
        return int(np.argmax(scores))
    if mode == "sample":
        p, _ = nn.softmax_logprob(scores)
        return int(rng.choice(n, p=p))
    raise ValueError(f"unknown action mode {mode!r}")


def compute_returns(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def epsilon_at(step: int, total: int, start: float, end: float, fraction: float) -> float:
    horizon = max(1, int(fraction * total))
    if step >= horizon:
        return end
    return start + (end - start) * step / horizon


def penalty(tr_ref, tr_s, net: nn.Network, target: str, scale: float,
            n_actions: int | None = None, prob_space: bool = False,
            stop_ref: bool = False):
    """Squared distance penalty between the reference and sampled branches.

    Returns ``(value, cot_ref, cot_s)`` where value is ``scale * sum ||d||^2``
    and each cot is an ``(output_cotangent, feature_cotangent)`` pair for
    ``backward`` holding the gradient of ``value`` (not yet multiplied by
    lambda's caller-side weighting).
    """
    n_out = tr_ref.layers[-1].h.shape
    zero_out = np.zeros(n_out)
    if target == "feature":
        fr, fs = nn.feature(tr_ref, net), nn.feature(tr_s, net)
        d = fr - fs
        value = scale * float(np.sum(d * d))
        g = 2.0 * scale * d
        cot_ref = (zero_out, None if stop_ref else g)
        cot_s = (zero_out, -g)
        return value, cot_ref, cot_s

    zr, zs = tr_ref.layers[-1].h, tr_s.layers[-1].h
    k = n_actions or zr.shape[1]
    if prob_space:
        pr, _ = nn.softmax_logprob(zr[:, :k])
        ps, _ = nn.softmax_logprob(zs[:, :k])
        d = pr - ps
        g = 2.0 * scale * d
        gr = pr * (g - np.sum(pr * g, axis=1, keepdims=True))
        gs = ps * (-g + np.sum(ps * g, axis=1, keepdims=True))
    else:
        d = zr[:, :k] - zs[:, :k]
        gr = 2.0 * scale * d
        gs = -gr
    value = scale * float(np.sum(d * d))
    out_r, out_s = zero_out.copy(), zero_out.copy()
    if not stop_ref:
        out_r[:, :k] = gr
    out_s[:, :k] = gs
    return value, (out_r, None), (out_s, None)


@dataclass
class LossResult:
    total: float
    rl: float
    reg: float
    grad: list


@dataclass
class TrainResult:
    net: nn.Network
    curve: list[dict]
    steps: int = 0
