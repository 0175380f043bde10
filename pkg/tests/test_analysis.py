import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visreg import analysis as an
from visreg import net as nn
from visreg.envs import GridState, GridWorld, grid_payload, grid_step
from visreg.randomizers import xi


def test_tv_hand_values():
    assert an.tv_distance([0.5, 0.5], [1.0, 0.0]) == 0.5
    assert an.tv_distance([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
    assert an.tv_distance([1, 0, 0], [0, 0, 1]) == 1.0
    with pytest.raises(ValueError):
        an.tv_distance([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        an.tv_distance([0.5, 0.5], [1.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 8))
def test_tv_is_max_event_probability_gap(seed, n):
    # oracle: TV = max over events A of |p(A) - q(A)|, by brute force over subsets
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    best = max(abs(p[list(A)].sum() - q[list(A)].sum())
               for k in range(n + 1) for A in itertools.combinations(range(n), k))
    assert an.tv_distance(p, q) == pytest.approx(best, abs=1e-12)


def test_lemma1_on_product_distributions():
    # identical conditionals: joint TV equals marginal TV exactly
    px, qx = np.array([0.3, 0.7]), np.array([0.6, 0.4])
    c = np.array([[0.2, 0.8], [0.5, 0.5]])
    lhs, rhs, ok = an.lemma1_check(px[:, None] * c, qx[:, None] * c)
    assert ok and lhs == pytest.approx(0.3) and rhs == pytest.approx(0.3)


def test_lemma1_random_trials_hold():
    v, slack = an.lemma1_random_trial(2000, np.random.default_rng(0))
    assert v == 0 and slack >= -1e-12


def test_lipschitz_of_hand_policy():
    # pi(up | x, y, xi) = sigmoid(a * xi); the TV between xi = +-5 is the same everywhere
    a = 0.1

    def pi(obs):
        s = 1 / (1 + np.exp(-a * obs[..., 2]))
        return np.stack([s, 1 - s], axis=-1)

    payloads = np.stack([grid_payload(s) for s in GridWorld.positions()])
    K = an.lipschitz_constant(pi, [xi(5), xi(-5)], payloads)
    s5 = 1 / (1 + math.exp(-0.5))
    assert K == pytest.approx(abs(2 * s5 - 1) / 10, rel=1e-12)


def test_uniform_policy_has_zero_constant_and_zero_bounds():
    pi = lambda obs: np.full(obs.shape[:-1] + (2,), 0.5)
    payloads = np.stack([grid_payload(s) for s in GridWorld.positions()])
    K = an.lipschitz_constant(pi, [xi(5), xi(-5)], payloads)
    assert K == 0.0
    assert an.prop1_bounds(an.BoundInputs(K, 1.0, 1.0, 10.0, 10)) == (0.0, 0.0)


def test_tight_bound_hand_value():
    # K * delta = 0.1, T = 10: 2 * (0.1 + 0.2 + ... + 1.0) = 11
    tight, loose = an.prop1_bounds(an.BoundInputs(0.01, 1.0, 1.0, 10.0, 10))
    assert tight == pytest.approx(11.0)
    assert loose == math.inf


@settings(max_examples=60, deadline=None)
@given(K=st.floats(1e-4, 2.0), delta=st.floats(0.01, 10.0), gamma=st.floats(0.0, 0.995),
       r=st.floats(0.1, 5.0))
def test_infinite_horizon_closed_form_matches_direct_sum(K, delta, gamma, r):
    tight, loose = an.prop1_bounds(an.BoundInputs(K, r, gamma, delta))
    kd = K * delta
    direct = 2 * r * sum(gamma ** t * min(1.0, (t + 1) * kd) for t in range(20000))
    assert tight == pytest.approx(direct, rel=1e-9, abs=1e-12)
    assert tight <= loose * (1 + 1e-12)


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        an.BoundInputs(-1, 1, 0.9, 1)
    with pytest.raises(ValueError):
        an.BoundInputs(1, 1, 1.0, 1)


def simulate_return(policy_probs, episodes, rng):
    total = 0.0
    for _ in range(episodes):
        s, done = GridState(), False
        while not done:
            p = policy_probs(s)
            s, r, done = grid_step(s, int(rng.random() >= p[0]))
            total += r
    return total / episodes


def test_exact_gridworld_return_matches_monte_carlo():
    # a fixed stochastic policy that depends on position only
    table = {(x, y): np.array([0.2 + 0.2 * x, 0.8 - 0.2 * x]) for x in range(3) for y in range(3)}

    def pi(obs):
        return np.stack([table[(int(o[0]), int(o[1]))] for o in np.atleast_2d(obs)])

    exact = an.gridworld_return(pi, xi(5))
    mc = simulate_return(lambda s: table[(s.x, s.y)], 20000, np.random.default_rng(0))
    assert exact == pytest.approx(mc, abs=0.03)


def test_deterministic_policies_have_hand_returns():
    up = lambda obs: np.tile([1.0, 0.0], (len(obs), 1))
    right = lambda obs: np.tile([0.0, 1.0], (len(obs), 1))
    assert an.gridworld_return(up, xi(5)) == -8.0
    assert an.gridworld_return(right, xi(5)) == -8.0


def test_bound_report_holds_for_random_nets():
    for seed in range(5):
        net = nn.mlp([3, 8, 8, 3], np.random.default_rng(seed))
        rep = an.gridworld_bound_report(net, (xi(5), xi(-5)))
        assert rep["gap_within_tight"]
        assert rep["delta"] == 10.0
        assert rep["empirical_gap"] == pytest.approx(abs(rep["eta_1"] - rep["eta_2"]))


def test_same_path_probability_counts_seeds():
    invariant = nn.mlp([3, 4, 3], np.random.default_rng(0))
    invariant.layers[0].W[:, 2] = 0.0
    assert an.same_path_probability([invariant]) == 1.0
    with pytest.raises(ValueError):
        an.same_path_probability([])


def test_grid_presets():
    rb = an.rb_plane()
    assert len(rb) == 25 and all(p.params[1] == 1.0 for p in rb)
    gd = an.gray_diagonal()
    assert [p.params[0] for p in gd] == [i / 10 for i in range(11)]


def test_evaluate_grid_rejects_empty_domains():
    net = nn.mlp([3, 4, 3], np.random.default_rng(0))
    with pytest.raises(ValueError):
        an.evaluate_grid(net, GridWorld(), [])


def test_value_std_zero_for_invariant_net():
    net = nn.mlp([3, 4, 3], np.random.default_rng(0))
    net.layers[0].W[:, 2] = 0.0
    payloads = np.stack([grid_payload(s) for s in GridWorld.positions()])
    assert an.value_std(an.baseline_value(net, 2), payloads, [xi(5), xi(-5)]) == 0.0
    assert an.feature_spread(net, payloads, [xi(5), xi(-5)]) == 0.0


def test_export_features_layout(tmp_path):
    net = nn.mlp([3, 4, 3], np.random.default_rng(0))
    payloads = np.stack([grid_payload(s) for s in GridWorld.positions()])
    path = tmp_path / "f.csv"
    n = an.export_features(net, payloads, [xi(5), xi(-5)], path, an.baseline_value(net, 2),
                           {"config_hash": "abc"})
    lines = path.read_text().splitlines()
    assert n == 18
    assert lines[0].startswith("# checkpoint=") and lines[1] == "# config_hash=abc"
    assert lines[2] == "state_id,phi_0,f_1,f_2,f_3,f_4,value"
    assert len(lines) == 3 + 18
