"""Deep Q-learning with the feature-invariance penalty."""
from __future__ import annotations

import time

import numpy as np

from .. import net as nn
from .common import (AgentConfig, LossResult, TrainResult, act, build_agent_network,
                     epsilon_at, penalty)
from .replay import ReplayBuffer, Transition


def dqn_loss(batch: dict, net: nn.Network, gamma: float, lam: float,
             target_net: nn.Network | None = None, target: str = "feature",
             stop_gradient_on_reference: bool = False, double_q: bool = False,
             dropout: float = 0.0, rng=None) -> LossResult:
    """Batch-mean of (y - Q(s, a))^2 + lam * ||f(s_ref) - f(s_sampled)||^2.

    ``y`` is a constant: ``r`` on terminal transitions, otherwise
    ``r + gamma * max_a' Q(s', a')`` evaluated with ``target_net`` (or with
    ``net`` itself when no target network is given).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    obs, act_, r = batch["obs"], batch["action"], batch["reward"]
    n = len(act_)
    if n == 0:
        raise ValueError("empty batch")
    tnet = target_net if target_net is not None else net
    q_next = tnet.predict(batch["next_obs"])
    if double_q:
        a_star = np.argmax(net.predict(batch["next_obs"]), axis=1)
        boot = q_next[np.arange(n), a_star]
    else:
        boot = q_next.max(axis=1)
    y = np.where(batch["terminal"], r, r + gamma * boot)

    tr = nn.forward(net, obs, dropout, rng)
    q = tr.layers[-1].h
    td = y - q[np.arange(n), act_]
    rl = float(np.mean(td * td))
    g_out = np.zeros_like(q)
    g_out[np.arange(n), act_] = -2.0 * td / n

    if lam == 0:
        return LossResult(rl, rl, 0.0, nn.backward(tr, net, g_out))

    trs = nn.forward(net, batch["obs_sampled"], dropout, rng)
    reg, (o_r, f_r), (o_s, f_s) = penalty(tr, trs, net, target, 1.0 / n,
                                          stop_ref=stop_gradient_on_reference)
    f_r = None if f_r is None else lam * f_r
    f_s = None if f_s is None else lam * f_s
    grad = nn.add_grads(nn.backward(tr, net, g_out + lam * o_r, f_r),
                        nn.backward(trs, net, lam * o_s, f_s))
    return LossResult(rl + lam * reg, rl, reg, grad)


def train_dqn(cfg: AgentConfig, env, rng: np.random.Generator, log=None) -> TrainResult:
    """Regularized DQN.

    Each episode samples one randomizer. Normal and regularized agents act
    on reference observations; the randomized agent acts on the sampled
    ones. Every transition keeps both parameter vectors so the penalty
    always compares against the randomizer active at storage time.
    """
    cfg.validate()
    space = cfg.space
    r_init, r_phi, r_env, r_act, r_batch, r_drop = rng.spawn(6)
    n_actions = env.n_actions
    ref = space.reference
    probe = ref(env.blank_payload())
    net = build_agent_network(cfg, probe.shape, n_actions, r_init)
    tnet = net.copy() if cfg.target_update > 0 else None
    opt = nn.AdamState.zeros(net)
    buf = ReplayBuffer(cfg.buffer_capacity, space.randomizer_kind, space.xi_scale)
    gamma = env.spec.gamma
    lam = 0.0 if cfg.regime in ("normal", "randomized") else cfg.lam
    total = cfg.max_steps or cfg.episodes * env.spec.time_limit
    curve, step, t0 = [], 0, time.perf_counter()

    for ep in range(cfg.episodes):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        phi_s = space.sample(r_phi)
        phi_act = phi_s if cfg.regime == "randomized" else ref
        env.reset(r_env)
        payload = env.payload()
        ret, done, losses = 0.0, False, []
        while not done:
            eps = epsilon_at(step, total, cfg.epsilon_start, cfg.epsilon_end, cfg.epsilon_fraction)
            a = act(net, phi_act(payload), "epsilon", r_act, eps, n_actions)
            _, reward, done = env.step(a)
            nxt = env.payload()
            buf.push(Transition(payload, nxt, a, reward, done,
                                np.array(phi_act.params), np.array(phi_s.params)))
            payload = nxt
            ret += reward
            step += 1
            if (step >= cfg.warmup and len(buf) >= cfg.batch_size
                    and step % cfg.train_every == 0):
                idx = buf.sample_indices(r_batch, cfg.batch_size)
                batch = buf.batch(idx, need_sampled=lam > 0)
                res = dqn_loss(batch, net, gamma, lam, tnet, cfg.penalty_target,
                               cfg.stop_gradient_on_reference, cfg.double_q,
                               cfg.dropout, r_drop)
                nn.adam_step(opt, net, res.grad, cfg.lr, *cfg.adam_betas, cfg.adam_eps,
                             weight_decay=cfg.weight_decay)
                losses.append((res.rl, res.reg))
            if tnet is not None and step % cfg.target_update == 0:
                tnet = net.copy()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        rl = float(np.mean([l[0] for l in losses])) if losses else float("nan")
        rg = float(np.mean([l[1] for l in losses])) if losses else float("nan")
        curve.append({"episode": ep, "return": ret, "rl_loss": rl, "reg_loss": rg,
                      "epsilon": eps, "steps": step,
                      "wall_ms": round(1000 * (time.perf_counter() - t0), 1)})
        if log is not None and (ep + 1) % 10 == 0:
            recent = np.mean([c["return"] for c in curve[-10:]])
            log(f"episode {ep + 1} steps {step} eps {eps:.3f} return(10) {recent:.1f}")
    return TrainResult(net, curve, step)
