"""Accuracy, mode counting and L1 distance."""

import numpy as np
import pytest

from flowmatch.env import RewardSpec, StateGraph, attach_reward, tree_seq_env
from flowmatch.metrics import (
    MetricPoint,
    ModeCounter,
    ModeSpec,
    accuracy,
    accuracy_exact,
    count_modes,
    expected_reward,
    l1_to_target,
)

from conftest import make_graph


def sample_target(graph, n, seed):
    rng = np.random.default_rng(seed)
    ids = graph.terminal_ids
    p = graph.target_distribution()[ids]
    return [graph.states[i] for i in rng.choice(ids, size=n, p=p)]


class TestAccuracy:
    def test_closed_form_80(self, tree21):
        assert accuracy([(0,), (1,)], tree21.env, graph=tree21) == pytest.approx(80.0)
        assert accuracy_exact(np.array([0.0, 0.5, 0.5]), tree21) == pytest.approx(80.0)

    def test_expected_reward(self, tree21):
        assert expected_reward(tree21) == pytest.approx(2.5)

    def test_exact_samples_near_100(self):
        g = make_graph("tree_seq", 3, 3, seed=1)
        assert abs(accuracy(sample_target(g, 10_000, 0), g.env, graph=g) - 100.0) <= 2.0

    def test_clamped(self, tree21):
        assert accuracy([(1,)] * 5, tree21.env, graph=tree21) == 100.0

    def test_supplied_denominator(self, tree21):
        assert accuracy([(0,)], tree21.env, target_mean=2.0) == pytest.approx(50.0)

    def test_missing_denominator(self, tree21):
        with pytest.raises(ValueError, match="denominator"):
            accuracy([(0,)], tree21.env)

    def test_empty(self, tree21):
        with pytest.raises(ValueError):
            accuracy([], tree21.env, graph=tree21)

    def test_spread_shrinks(self):
        """Estimates at n = 10^4 scatter less than at n = 10^2 (law of large numbers)."""
        g = make_graph("tree_seq", 2, 3, seed=3)
        pi = g.uniform_policy()
        probs = g.push_forward(pi)
        ids = g.terminal_ids

        def est(n, seed):
            rng = np.random.default_rng(seed)
            xs = [g.states[i] for i in rng.choice(ids, size=n, p=probs[ids])]
            return accuracy(xs, g.env, graph=g)

        small = np.std([est(100, s) for s in range(30)])
        large = np.std([est(10_000, s) for s in range(30)])
        truth = accuracy_exact(probs, g)
        assert large < small / 3
        assert np.mean([est(10_000, s) for s in range(5)]) == pytest.approx(truth, abs=1.0)


class TestModes:
    @pytest.fixture
    def env(self):
        spec = RewardSpec("target_set", num_targets=4, min_separation=3, base=0.0, peak=1.0, width=0.5, seed=2)
        return attach_reward(tree_seq_env(4, 6), spec)

    def test_close_pair_is_one_mode(self):
        env = attach_reward(tree_seq_env(2, 4), RewardSpec("uniform", value=1.0))
        assert count_modes([(0, 0, 0, 0), (0, 0, 0, 1)], ModeSpec(0.8, 3), env) == 1

    def test_planted_peaks(self, env):
        peaks = [env.parse(k) for k in env.reward_spec.planted]
        assert count_modes(peaks, ModeSpec(0.8, 3), env) == 4

    def test_none_above_threshold(self, env):
        peaks = [env.parse(k) for k in env.reward_spec.planted]
        low = [x for x in env.terminals() if env.reward(x) < 0.8][:50]
        assert count_modes(low, ModeSpec(0.8, 3), env) == 0
        assert count_modes(low, ModeSpec(5.0, 3), env) == 0 == count_modes(peaks, ModeSpec(5.0, 3), env)

    def test_cumulative_and_deduplicated(self, env):
        peaks = [env.parse(k) for k in env.reward_spec.planted]
        counter = ModeCounter(env, ModeSpec(0.8, 3))
        assert counter.update(peaks[:2]) == 2
        assert counter.update(peaks[:2]) == 2
        assert counter.update(peaks) == 4
        assert counter.count == 4

    def test_order_invariant_when_well_separated(self, env):
        peaks = [env.parse(k) for k in env.reward_spec.planted]
        rng = np.random.default_rng(0)
        for _ in range(5):
            order = list(rng.permutation(len(peaks)))
            assert count_modes([peaks[i] for i in order], ModeSpec(0.8, 3), env) == 4

    def test_order_sensitive_at_boundary(self):
        """Greedy clustering: a chain a-b-c with gaps equal to the threshold depends on order."""
        env = attach_reward(tree_seq_env(2, 6), RewardSpec("uniform"))
        a, b, c = (0,) * 6, (1, 1, 1, 0, 0, 0), (1,) * 6
        spec = ModeSpec(0.5, 3)
        assert count_modes([a, b, c], spec, env) == 2
        assert count_modes([b, a, c], spec, env) == 1

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            ModeSpec(0.0, 3)
        with pytest.raises(ValueError):
            ModeSpec(0.8, 0)


class TestL1:
    def test_exact_push_forward_is_zero(self, setgen32):
        assert l1_to_target(setgen32.target_distribution(), setgen32) < 1e-15

    def test_point_mass(self):
        g = StateGraph(attach_reward(tree_seq_env(2, 2), RewardSpec("uniform")))
        assert l1_to_target({(0, 1): 7}, g) == pytest.approx(2 * 3 / 4)

    def test_uniform_on_1_3(self, tree21):
        assert l1_to_target(tree21.push_forward(tree21.uniform_policy()), tree21) == pytest.approx(0.5)

    def test_histogram_normalised(self, tree21):
        assert l1_to_target({(0,): 10, (1,): 30}, tree21) == pytest.approx(0.0)

    def test_wrong_terminals(self, tree21):
        with pytest.raises(ValueError):
            l1_to_target({(0, 0): 1}, tree21)
        with pytest.raises(ValueError):
            l1_to_target({(): 1}, tree21)
        with pytest.raises(ValueError):
            l1_to_target(np.ones(5), tree21)


def test_metric_point_dict():
    p = MetricPoint(10, 0.5, 99.0, 3, 0.1, 1000, 12.0)
    assert p.to_dict() == {
        "step": 10,
        "loss": 0.5,
        "accuracy": 99.0,
        "modes": 3,
        "l1": 0.1,
        "samples": 1000,
        "wall_ms": 12.0,
    }
