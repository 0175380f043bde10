"""Measurement tools: TV distance, policy Lipschitz constants, return-gap
bounds, domain-grid evaluation, and representation diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import net as nn
from .envs import GridState, GridWorld, grid_payload, grid_step
from .randomizers import Randomizer, color, distance, observe, sup_distance


# --- distributions --------------------------------------------------------------

def _check_dist(p, name, atol=1e-9):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -atol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError(f"{name} is not a probability distribution")
    return p


def tv_distance(p, q) -> float:
    """Half the L1 distance between two discrete distributions."""
    p, q = _check_dist(p, "p"), _check_dist(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def tv_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(P - Q).sum(axis=-1)


def lemma1_check(p_joint, q_joint, tol: float = 1e-12):
    """Compare TV of two joints p(x, y), q(x, y) (rows index x) against
    TV of the x-marginals plus the worst conditional TV.

    The max runs over x with p(x) > 0; where q(x) = 0 its conditional is
    taken uniform.  Returns (lhs, rhs, lhs <= rhs + tol).
    """
    p = _check_dist(np.asarray(p_joint, dtype=np.float64).ravel(), "p").reshape(np.shape(p_joint))
    q = _check_dist(np.asarray(q_joint, dtype=np.float64).ravel(), "q").reshape(np.shape(q_joint))
    if p.shape != q.shape or p.ndim != 2:
        raise ValueError("joints must be matching 2-d arrays")
    lhs, rhs = _lemma1_terms(p[None], q[None])
    return float(lhs[0]), float(rhs[0]), bool(lhs[0] <= rhs[0] + tol)


def _lemma1_terms(p: np.ndarray, q: np.ndarray):
    # batched over axis 0
    lhs = 0.5 * np.abs(p - q).sum(axis=(1, 2))
    px, qx = p.sum(axis=2), q.sum(axis=2)
    ny = p.shape[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        pc = np.where(px[..., None] > 0, p / px[..., None], 1.0 / ny)
        qc = np.where(qx[..., None] > 0, q / qx[..., None], 1.0 / ny)
    cond = 0.5 * np.abs(pc - qc).sum(axis=2)
    cond = np.where(px > 0, cond, -np.inf)
    rhs = 0.5 * np.abs(px - qx).sum(axis=1) + cond.max(axis=1)
    return lhs, rhs


def lemma1_random_trial(n: int, rng: np.random.Generator, nx: int = 4, ny: int = 3,
                        tol: float = 1e-12) -> tuple[int, float]:
    """Check the joint-TV inequality on n random pairs of joints.

    Returns (violations, smallest slack rhs - lhs)."""
    p = rng.dirichlet(np.ones(nx * ny), size=n).reshape(n, nx, ny)
    q = rng.dirichlet(np.ones(nx * ny), size=n).reshape(n, nx, ny)
    lhs, rhs = _lemma1_terms(p, q)
    return int(np.sum(lhs > rhs + tol)), float(np.min(rhs - lhs))


# --- policies ------------------------------------------------------------------------

def softmax_policy(net: nn.Network, n_actions: int):
    def pi(obs):
        return nn.softmax_logprob(net.predict(obs)[..., :n_actions])[0]
    return pi


def greedy_policy(net: nn.Network, n_actions: int):
    def pi(obs):
        q = net.predict(obs)[..., :n_actions]
        out = np.zeros_like(q)
        np.put_along_axis(out, np.argmax(q, axis=-1)[..., None], 1.0, axis=-1)
        return out
    return pi


def lipschitz_constant(policy, randomizers: list[Randomizer], payloads, norm: str = "l2") -> float:
    """sup over randomizer pairs and states of TV(pi(.|phi1(s)), pi(.|phi2(s))) / |phi1(s) - phi2(s)|.

    Pairs with zero observation distance are skipped. Exact when the
    payloads and randomizers enumerate everything.
    """
    if len(randomizers) < 2:
        raise ValueError("need at least two randomizers")
    payloads = np.asarray(payloads)
    obs = [phi(payloads) for phi in randomizers]
    probs = [policy(o) for o in obs]
    best, seen = 0.0, False
    for i in range(len(randomizers)):
        for j in range(i + 1, len(randomizers)):
            d = distance(obs[i], obs[j], norm)
            ok = d > 0
            if not np.any(ok):
                continue
            seen = True
            ratio = tv_rows(probs[i], probs[j])[ok] / d[ok]
            best = max(best, float(ratio.max()))
    if not seen:
        raise ValueError("every randomizer pair gives identical observations; K is undefined")
    return best


# --- bounds ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    K: float
    r_max: float
    gamma: float
    delta: float
    horizon: float = math.inf

    def __post_init__(self):
        if self.K < 0 or self.r_max < 0 or self.delta < 0:
            raise ValueError("K, r_max and delta must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.gamma == 1 and math.isinf(self.horizon):
            raise ValueError("gamma = 1 needs a finite horizon")


def prop1_bounds(b: BoundInputs) -> tuple[float, float]:
    """Return-gap bounds (tight, loose).

    tight = 2 r_max sum_{t<T} gamma^t min(1, (t+1) K delta)
    loose = 2 r_max K delta / (1 - gamma)^2   (inf when gamma = 1)
    """
    kd = b.K * b.delta
    if kd == 0:
        return 0.0, 0.0
    if math.isinf(b.horizon):
        # terms saturate once (t+1) K delta >= 1; the tail is geometric
        n, g = max(0, math.ceil(1.0 / kd) - 1), b.gamma
        # sum_{t<n} g^t (t+1) kd in closed form
        gn = g ** n
        head = kd * (1.0 - (n + 1) * gn + n * gn * g) / (1.0 - g) ** 2
        tail = gn / (1.0 - g)
        tight = 2 * b.r_max * (head + tail)
    else:
        tight = 2 * b.r_max * sum(b.gamma ** t * min(1.0, (t + 1) * kd) for t in range(int(b.horizon)))
    loose = math.inf if b.gamma == 1 else 2 * b.r_max * kd / (1.0 - b.gamma) ** 2
    return tight, loose


# --- gridworld exact quantities ------------------------------------------------------------

def gridworld_return(policy, phi: Randomizer, time_limit: int = 10, gamma: float = 1.0) -> float:
    """Expected return of a stochastic policy, by exhaustive enumeration."""
    positions = GridWorld.positions()
    probs = policy(phi(np.stack([grid_payload(s) for s in positions])))
    table = {(s.x, s.y): probs[i] for i, s in enumerate(positions)}

    @lru_cache(maxsize=None)
    def value(x, y, t):
        v = 0.0
        for a, pa in enumerate(table[(x, y)]):
            if pa == 0:
                continue
            s1, r, done = grid_step(GridState(x, y, t), a, time_limit)
            v += pa * (r + (0.0 if done else gamma * value(s1.x, s1.y, s1.t)))
        return v

    return value(0, 0, 0)


def greedy_path(net: nn.Network, phi: Randomizer, n_actions: int = 2,
                time_limit: int = 10) -> tuple[list[int], float]:
    env = GridWorld(time_limit)
    env.reset()
    actions, ret, done = [], 0.0, False
    while not done:
        a = int(np.argmax(net.predict(phi(env.payload()))[:n_actions]))
        _, r, done = env.step(a)
        actions.append(a)
        ret += r
    return actions, ret


def same_path_probability(nets: list[nn.Network], phis=(5.0, -5.0), n_actions: int = 2,
                          xi_scale: float = 1.0) -> float:
    from .randomizers import xi
    if not nets:
        raise ValueError("no checkpoints")
    same = 0
    for net in nets:
        if net.input_shape != (3,):
            raise ValueError("same_path_probability needs gridworld checkpoints")
        paths = [greedy_path(net, xi(v, xi_scale), n_actions)[0] for v in phis]
        same += all(p == paths[0] for p in paths[1:])
    return same / len(nets)


def gridworld_bound_report(net: nn.Network, phis: tuple[Randomizer, Randomizer],
                           n_actions: int = 2, time_limit: int = 10, gamma: float = 1.0,
                           r_max: float = 1.0, norm: str = "l2") -> dict:
    """Exact K, delta, both bounds, and the exact return gap of the
    stochastic policy between two xi domains."""
    pi = softmax_policy(net, n_actions)
    payloads = np.stack([grid_payload(s) for s in GridWorld.positions()])
    K = lipschitz_constant(pi, list(phis), payloads, norm)
    delta = sup_distance(phis[0], phis[1], payloads, norm)
    horizon = time_limit if gamma == 1 else math.inf
    tight, loose = prop1_bounds(BoundInputs(K, r_max, gamma, delta, horizon))
    eta = [gridworld_return(pi, phi, time_limit, gamma) for phi in phis]
    greedy = [greedy_path(net, phi, n_actions, time_limit)[1] for phi in phis]
    gap = abs(eta[0] - eta[1])
    return {"K": K, "r_max": r_max, "gamma": gamma, "delta": delta, "horizon": horizon,
            "tight": tight, "loose": loose, "eta_1": eta[0], "eta_2": eta[1],
            "empirical_gap": gap, "greedy_gap": abs(greedy[0] - greedy[1]),
            "gap_within_tight": bool(gap <= tight + 1e-12)}


def policy_tv(net: nn.Network, payloads, phi1: Randomizer, phi2: Randomizer,
              n_actions: int) -> float:
    """Mean over states of the TV between the policy under two randomizers."""
    pi = softmax_policy(net, n_actions)
    payloads = np.asarray(payloads)
    return float(np.mean(tv_rows(pi(phi1(payloads)), pi(phi2(payloads)))))


# --- domain grids ------------------------------------------------------------------------------

def rb_plane(n: int = 5, g: float = 1.0, r_range=(0.5, 1.0), b_range=(0.0, 1.0)) -> list[Randomizer]:
    return [color(r, g, b) for r in np.linspace(*r_range, n) for b in np.linspace(*b_range, n)]


def gray_diagonal(n: int = 11) -> list[Randomizer]:
    return [color(x, x, x) for x in np.round(np.linspace(0.0, 1.0, n), 10)]


GRID_PRESETS = {"rb_plane": rb_plane, "gray_diagonal": gray_diagonal}


@dataclass
class EvalGrid:
    domains: list[Randomizer]
    means: list[float]
    stds: list[float]
    episodes: int
    mode: str
    returns: list[list[float]] = field(default_factory=list)

    @property
    def across_domain_std(self) -> float:
        return float(np.std(self.means))

    @property
    def mean(self) -> float:
        return float(np.mean(self.means))

    def rows(self) -> list[dict]:
        out = []
        for phi, m, s in zip(self.domains, self.means, self.stds):
            row = {f"p{i}": v for i, v in enumerate(phi.params)}
            row.update(mean=m, std=s, episodes=self.episodes)
            out.append(row)
        return out


def evaluate_grid(net: nn.Network, env, domains: list[Randomizer], episodes: int = 100,
                  mode: str = "greedy", rng: np.random.Generator | None = None,
                  n_actions: int | None = None) -> EvalGrid:
    """Return statistics of a fixed policy under each domain.

    Gridworld is evaluated exactly: the greedy return, or for ``sample``
    mode the expected return by enumeration.  Other environments use
    ``episodes`` Monte Carlo rollouts per domain, each domain starting from
    the same seeded initial states.
    """
    from .agents.common import act
    if not domains:
        raise ValueError("empty domain list")
    n_actions = n_actions or env.n_actions
    means, stds, all_returns = [], [], []
    if isinstance(env, GridWorld):
        for phi in domains:
            if mode == "greedy":
                ret = greedy_path(net, phi, n_actions, env.time_limit)[1]
            else:
                ret = gridworld_return(softmax_policy(net, n_actions), phi, env.time_limit, env.gamma)
            means.append(ret)
            stds.append(0.0)
            all_returns.append([ret])
        return EvalGrid(list(domains), means, stds, 1, mode, all_returns)

    base_seed = int((rng or np.random.default_rng(0)).integers(2 ** 31))
    for phi in domains:
        r = np.random.default_rng(base_seed)
        rets = []
        for _ in range(episodes):
            env.reset(r)
            done, ret = False, 0.0
            while not done:
                a = act(net, phi(env.payload()), mode, r, n_actions=n_actions)
                _, rew, done = env.step(a)
                ret += rew
            rets.append(ret)
        means.append(float(np.mean(rets)))
        stds.append(float(np.std(rets)))
        all_returns.append(rets)
    return EvalGrid(list(domains), means, stds, episodes, mode, all_returns)


# --- representations -------------------------------------------------------------------------

def reference_payloads(net: nn.Network, env, phi: Randomizer, rng=None,
                       n_actions: int | None = None, max_states: int | None = None) -> np.ndarray:
    """Payloads visited by one greedy rollout under ``phi``."""
    from .agents.common import act
    n_actions = n_actions or env.n_actions
    env.reset(rng if rng is not None else np.random.default_rng(0))
    out, done = [], False
    while not done:
        p = env.payload()
        out.append(p)
        a = act(net, phi(p), "greedy", n_actions=n_actions)
        _, _, done = env.step(a)
        if max_states and len(out) >= max_states:
            break
    return np.stack(out)


def q_value(net: nn.Network, n_actions: int):
    return lambda obs: net.predict(obs)[..., :n_actions].max(axis=-1)


def baseline_value(net: nn.Network, n_actions: int):
    return lambda obs: net.predict(obs)[..., n_actions]


def value_std(value_fn, payloads, domains: list[Randomizer]) -> float:
    """Std of the value estimate across domains, averaged over states."""
    payloads = np.asarray(payloads)
    vals = np.stack([value_fn(phi(payloads)) for phi in domains])  # (domains, states)
    return float(np.mean(np.std(vals, axis=0)))


def features(net: nn.Network, obs) -> np.ndarray:
    return nn.feature(nn.forward(net, obs), net)


def feature_spread(net: nn.Network, payloads, domains: list[Randomizer]) -> float:
    """Mean pairwise feature distance across domains for the same state."""
    payloads = np.asarray(payloads)
    F = [features(net, phi(payloads)) for phi in domains]
    d = [np.linalg.norm(F[i] - F[j], axis=1).mean()
         for i in range(len(F)) for j in range(i + 1, len(F))]
    return float(np.mean(d)) if d else 0.0


def export_features(net: nn.Network, payloads, domains: list[Randomizer], path,
                    value_fn=None, header: dict | None = None) -> int:
    """Write one CSV row per (state, domain) with the feature vector and value.

    Rows are ordered state-major then domain. Returns the number of rows.
    """
    payloads = np.asarray(payloads)
    rows = []
    for sid in range(len(payloads)):
        for phi in domains:
            obs = phi(payloads[sid])
            f = features(net, obs)
            v = float(value_fn(obs)) if value_fn else float("nan")
            rows.append([sid, *phi.params, *f.tolist(), v])
    n_p = len(domains[0].params) if domains else 0
    d = len(rows[0]) - 2 - n_p if rows else 0
    cols = ["state_id"] + [f"phi_{i}" for i in range(n_p)] + [f"f_{i + 1}" for i in range(d)] + ["value"]
    meta = {"checkpoint": net.digest(), **(header or {})}
    path = Path(path)
    with path.open("w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    return len(rows)
