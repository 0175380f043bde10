"""REINFORCE with a learned baseline and the feature-invariance penalty.

The network's last layer has ``n_actions + 1`` outputs: policy logits
followed by the baseline value.  Both are linear heads on the shared
feature layer.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import net as nn
from ..randomizers import Randomizer
from .common import (AgentConfig, LossResult, TrainResult, act, build_agent_network,
                     compute_returns, penalty)


@dataclass
class Trajectory:
    payloads: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    phi_ref: Randomizer       # the randomizer the agent acted under
    phi_sampled: Randomizer   # the randomizer compared against by the penalty

    def __len__(self):
        return len(self.actions)

    @property
    def obs_ref(self) -> np.ndarray:
        return self.phi_ref(self.payloads)

    @property
    def obs_sampled(self) -> np.ndarray:
        return self.phi_sampled(self.payloads)


def pg_loss(trajs: list[Trajectory], net: nn.Network, gamma: float, lam: float,
            n_actions: int, target: str = "feature", prob_space: bool = False,
            stop_gradient_on_reference: bool = False, dropout: float = 0.0,
            rng=None, advantages: np.ndarray | None = None) -> LossResult:
    """Sum over steps of  -A_t log pi(a_t) + (R_t - b_t)^2 + lam ||df_t||^2,
    averaged over trajectories.

    The advantage ``A_t = R_t - b_t`` is held constant in the policy term, so
    the baseline only learns through the squared error.  Passing
    ``advantages`` pins that constant explicitly (finite-difference checks
    need it).
    """
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    if not trajs or any(len(t) == 0 for t in trajs):
        raise ValueError("pg_loss needs non-empty trajectories")
    scale = 1.0 / len(trajs)
    obs = np.concatenate([t.obs_ref for t in trajs])
    actions = np.concatenate([t.actions for t in trajs]).astype(int)
    returns = np.concatenate([compute_returns(t.rewards, gamma) for t in trajs])
    idx = np.arange(len(actions))

    tr = nn.forward(net, obs, dropout, rng)
    out = tr.layers[-1].h
    probs, logp = nn.softmax_logprob(out[:, :n_actions])
    b = out[:, n_actions]
    resid = returns - b
    adv = resid if advantages is None else np.asarray(advantages, dtype=np.float64)
    policy = -float(np.sum(adv * logp[idx, actions])) * scale
    base = float(np.sum(resid * resid)) * scale
    rl = policy + base

    g_out = np.zeros_like(out)
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    g_out[:, :n_actions] = -scale * adv[:, None] * (onehot - probs)
    g_out[:, n_actions] = -2.0 * scale * resid

    if lam == 0:
        return LossResult(rl, rl, 0.0, nn.backward(tr, net, g_out))

    obs_s = np.concatenate([t.obs_sampled for t in trajs])
    trs = nn.forward(net, obs_s, dropout, rng)
    reg, (o_r, f_r), (o_s, f_s) = penalty(tr, trs, net, target, scale, n_actions,
                                          prob_space, stop_gradient_on_reference)
    f_r = None if f_r is None else lam * f_r
    f_s = None if f_s is None else lam * f_s
    grad = nn.add_grads(nn.backward(tr, net, g_out + lam * o_r, f_r),
                        nn.backward(trs, net, lam * o_s, f_s))
    return LossResult(rl + lam * reg, rl, reg, grad)


def rollout(net: nn.Network, env, phi: Randomizer, rng, n_actions: int,
            mode: str = "sample", max_steps: int | None = None):
    env.reset(rng)
    payloads, actions, rewards = [], [], []
    done = False
    while not done:
        p = env.payload()
        a = act(net, phi(p), mode, rng, n_actions=n_actions)
        _, r, done = env.step(a)
        payloads.append(p)
        actions.append(a)
        rewards.append(r)
        if max_steps is not None and len(actions) >= max_steps:
            break
    return np.array(payloads), np.array(actions), np.array(rewards)


def train_reinforce(cfg: AgentConfig, env, rng: np.random.Generator, log=None) -> TrainResult:
    """Policy gradient with a baseline.

    Every trajectory gets its own sampled randomizer. Normal and
    regularized agents roll out under the reference; the randomized agent
    rolls out under the sampled one.
    """
    cfg.validate()
    space = cfg.space
    r_init, r_phi, r_env, r_drop = rng.spawn(4)
    n_actions = env.n_actions
    ref = space.reference
    probe = ref(env.blank_payload())
    net = build_agent_network(cfg, probe.shape, n_actions + 1, r_init)
    opt = nn.AdamState.zeros(net)
    gamma = env.spec.gamma
    lam = 0.0 if cfg.regime in ("normal", "randomized") else cfg.lam
    target = cfg.penalty_target
    curve, t0, steps = [], time.perf_counter(), 0

    ep = 0
    while ep < cfg.episodes:
        batch = []
        for _ in range(min(cfg.batch_episodes, cfg.episodes - ep)):
            phi_s = space.sample(r_phi)
            phi_act = phi_s if cfg.regime == "randomized" else ref
            payloads, actions, rewards = rollout(net, env, phi_act, r_env, n_actions)
            batch.append(Trajectory(payloads, actions, rewards, phi_act, phi_s))
            steps += len(actions)
        res = pg_loss(batch, net, gamma, lam, n_actions, target,
                      cfg.output_penalty == "probs", cfg.stop_gradient_on_reference,
                      cfg.dropout, r_drop)
        nn.adam_step(opt, net, res.grad, cfg.lr, *cfg.adam_betas, cfg.adam_eps,
                     weight_decay=cfg.weight_decay)
        wall = round(1000 * (time.perf_counter() - t0), 1)
        for t in batch:
            curve.append({"episode": ep, "return": float(t.rewards.sum()), "rl_loss": res.rl,
                          "reg_loss": res.reg, "epsilon": 0.0, "steps": steps, "wall_ms": wall})
            ep += 1
        if log is not None and ep % 200 < len(batch):
            recent = np.mean([c["return"] for c in curve[-50:]])
            log(f"episode {ep} return(50) {recent:.2f}")
    return TrainResult(net, curve, steps)
