"""Policy tests: hierarchical normalization, forced stop, masking soundness,
embedding symmetry, sampling distributions, and checkpoint round-trips."""

import math
from collections import Counter

import numpy as np
import pytest

from dagforge import autodiff as ad
from dagforge import models
from dagforge.dags import apply_add_edge, empty_state
from dagforge.models import ModelConfig, ParamSet
from dagforge.policy import (
    Policy,
    PolicyConfig,
    sample_trajectory,
)


def make_policy(d=3, hidden=16, seed=0, kind=models.LINEAR, full=False, rounds=2):
    cfg = PolicyConfig(d=d, model=ModelConfig(kind=kind), hidden=hidden,
                       rounds=rounds, full_covariance=full)
    return Policy.initialize(cfg, np.random.default_rng(seed))


def random_state(d, rng, steps):
    state = empty_state(d)
    for _ in range(steps):
        choices = np.argwhere(state.mask)
        if len(choices) == 0:
            break
        i, j = choices[rng.integers(len(choices))]
        state = apply_add_edge(state, int(i), int(j))
    return state


def complete_dag(d):
    state = empty_state(d)
    while state.mask.any():
        i, j = np.argwhere(state.mask)[0]
        state = apply_add_edge(state, int(i), int(j))
    return state


class TestEmbed:
    def test_deterministic(self):
        policy = make_policy()
        state = apply_add_edge(empty_state(3), 0, 1)
        first = policy.embed(state)
        second = policy.embed(state)
        np.testing.assert_array_equal(first.g, second.g)
        np.testing.assert_array_equal(first.u, second.u)

    def test_empty_graph_symmetric_with_shared_features(self):
        policy = make_policy()
        policy.params["node_embed"] = np.tile(policy.params["node_embed"][:1], (3, 1))
        emb = policy.embed(empty_state(3))
        for block in (emb.u, emb.v, emb.w):
            np.testing.assert_allclose(block - block[0], 0.0, atol=1e-12)

    def test_relabeling_permutes_embeddings(self):
        policy = make_policy(d=4)
        policy.params["node_embed"] = np.tile(policy.params["node_embed"][:1], (4, 1))
        state = apply_add_edge(apply_add_edge(empty_state(4), 0, 1), 2, 1)
        perm = np.array([3, 0, 2, 1])
        adjacency_p = np.zeros((4, 4), dtype=bool)
        for i, j in state.edges():
            adjacency_p[perm[i], perm[j]] = True
        from dagforge.dags import state_from_adjacency

        state_p = state_from_adjacency(adjacency_p)
        emb = policy.embed(state)
        emb_p = policy.embed(state_p)
        np.testing.assert_allclose(emb_p.u[perm], emb.u, atol=1e-10)
        np.testing.assert_allclose(emb_p.v[perm], emb.v, atol=1e-10)
        np.testing.assert_allclose(emb_p.w[perm], emb.w, atol=1e-10)
        np.testing.assert_allclose(emb_p.g, emb.g, atol=1e-10)


class TestForward:
    def test_complete_dag_forces_stop(self):
        policy = make_policy(d=3)
        fd = policy.forward(complete_dag(3))
        assert fd.p_stop == 1.0
        assert fd.log_p_stop == 0.0
        assert fd.log_1m_p_stop == ad.LOG_SENTINEL

    def test_fresh_heads_give_uniform_edges(self):
        policy = make_policy(d=4)
        fd = policy.forward(empty_state(4))
        valid = empty_state(4).mask
        probs = np.exp(fd.edge_log_probs[valid])
        np.testing.assert_allclose(probs, 1.0 / 12.0, atol=1e-12)
        assert fd.p_stop == pytest.approx(0.5)

    def test_normalization_on_random_states(self):
        rng = np.random.default_rng(1)
        policy = make_policy(d=5, seed=3)
        # detune the zero-initialized heads so probabilities are nontrivial
        policy.params["u_w"] = rng.normal(size=policy.params["u_w"].shape) * 0.3
        policy.params["stop2_w"] = rng.normal(size=policy.params["stop2_w"].shape)
        for _ in range(100):
            state = random_state(5, rng, steps=int(rng.integers(0, 9)))
            fd = policy.forward(state)
            if not state.mask.any():
                assert fd.p_stop == 1.0
                continue
            edge_total = np.exp(fd.edge_log_probs[state.mask]).sum()
            assert edge_total == pytest.approx(1.0, abs=1e-12)
            hierarchy = fd.p_stop + (1.0 - fd.p_stop) * edge_total
            assert hierarchy == pytest.approx(1.0, abs=1e-12)

    def test_invalid_actions_have_zero_probability(self):
        rng = np.random.default_rng(2)
        policy = make_policy(d=4, seed=4)
        policy.params["u_w"] = rng.normal(size=policy.params["u_w"].shape)
        for _ in range(20):
            state = random_state(4, rng, steps=int(rng.integers(0, 7)))
            fd = policy.forward(state)
            assert np.all(np.exp(fd.edge_log_probs[~state.mask]) == 0.0)


class TestLogPfEdge:
    def test_matches_stop_and_softmax_terms(self):
        policy = make_policy(d=3, seed=5)
        state = empty_state(3)
        child = apply_add_edge(state, 0, 2)
        fd = policy.forward(state)
        expected = math.log(1.0 - fd.p_stop) + fd.edge_log_probs[0, 2]
        assert policy.log_pf_edge(state, child) == pytest.approx(expected, rel=1e-9)

    def test_uniform_arithmetic(self):
        # p_stop 0.5 and a uniform edge head on d=5: log(0.5 / 20)
        policy = make_policy(d=5, seed=6)
        state = empty_state(5)
        child = apply_add_edge(state, 1, 3)
        assert policy.log_pf_edge(state, child) == pytest.approx(math.log(0.5 / 20.0))

    def test_invalid_transition_rejected(self):
        policy = make_policy(d=3)
        state = apply_add_edge(empty_state(3), 0, 1)
        with pytest.raises(ValueError):
            policy.log_pf_edge(state, state)

    def test_marginalized_normalization_over_actions(self):
        # p_stop + sum over edges of P(edge) = 1 (theta integrates to one)
        rng = np.random.default_rng(7)
        policy = make_policy(d=4, seed=8)
        policy.params["u_w"] = rng.normal(size=policy.params["u_w"].shape)
        policy.params["stop2_w"] = rng.normal(size=policy.params["stop2_w"].shape)
        for _ in range(20):
            state = random_state(4, rng, steps=int(rng.integers(0, 5)))
            if not state.mask.any():
                continue
            total = policy.forward(state).p_stop
            for i, j in np.argwhere(state.mask):
                child = apply_add_edge(state, int(i), int(j))
                total += math.exp(policy.log_pf_edge(state, child))
            assert total == pytest.approx(1.0, abs=1e-12)


class TestLogPfTheta:
    def test_density_at_head_means(self):
        policy = make_policy(d=3, seed=9)
        state = apply_add_edge(apply_add_edge(empty_state(3), 0, 1), 0, 2)
        fd = policy.forward(state)
        act = models.active_mask(state, policy.config.model)
        values = np.where(act, fd.theta_mean, 0.0)
        got = policy.log_pf_theta(state, ParamSet(values))
        expected = fd.log_p_stop + sum(
            -0.5 * math.log(2 * math.pi * fd.theta_var[i, j])
            for i, j in np.argwhere(act))
        assert got == pytest.approx(expected, rel=1e-10)

    def test_empty_graph_reduces_to_stop_probability(self):
        policy = make_policy(d=3, seed=10)
        state = empty_state(3)
        theta = models.zero_params(state, policy.config.model)
        fd = policy.forward(state)
        assert policy.log_pf_theta(state, theta) == pytest.approx(fd.log_p_stop)

    def test_layout_mismatch_rejected(self):
        policy = make_policy(d=3)
        state = apply_add_edge(empty_state(3), 0, 1)
        with pytest.raises(ValueError):
            policy.log_pf_theta(state, ParamSet(np.ones((3, 3))))

    def test_diag_density_matches_full_with_matching_factor(self):
        # a full-covariance factor holding the diag head's standard
        # deviations must produce the same density
        policy = make_policy(d=3, seed=11)
        state = apply_add_edge(apply_add_edge(empty_state(3), 0, 1), 2, 1)
        fd = policy.forward(state)
        theta, _ = policy.sample_theta(state, np.random.default_rng(13))
        dens_diag = policy.log_pf_theta(state, theta) - fd.log_p_stop
        expected = 0.0
        act = models.active_mask(state, policy.config.model)
        for i in range(3):
            idx = np.nonzero(act[i])[0]
            if idx.size == 0:
                continue
            scale = np.diag(np.sqrt(fd.theta_var[i, idx]))
            expected += float(ad.gaussian_full_log_density(
                theta.per_node[i, idx], fd.theta_mean[i, idx], scale))
        assert dens_diag == pytest.approx(expected, abs=1e-12)


def policy_full_config(d):
    return PolicyConfig(d=d, model=ModelConfig(), hidden=16, full_covariance=True)


class TestSampleTheta:
    def test_inactive_coordinates_exactly_zero(self):
        policy = make_policy(d=4, seed=14)
        rng = np.random.default_rng(0)
        state = random_state(4, rng, steps=3)
        theta, _ = policy.sample_theta(state, rng)
        act = models.active_mask(state, policy.config.model)
        assert np.all(theta.per_node[~act] == 0.0)

    def test_log_density_self_consistency(self):
        policy = make_policy(d=4, seed=15)
        rng = np.random.default_rng(1)
        state = random_state(4, rng, steps=4)
        theta, logd = policy.sample_theta(state, rng)
        fd = policy.forward(state)
        assert logd == pytest.approx(
            policy.log_pf_theta(state, theta) - fd.log_p_stop, abs=1e-12)

    def test_moments_match_heads(self):
        policy = make_policy(d=2, seed=16)
        rng = np.random.default_rng(2)
        state = apply_add_edge(empty_state(2), 0, 1)
        fd = policy.forward(state)
        draws = np.array([policy.sample_theta(state, rng, fd=fd)[0].per_node[1, 0]
                          for _ in range(100_000)])
        mean, var = fd.theta_mean[1, 0], fd.theta_var[1, 0]
        se_mean = math.sqrt(var / draws.size)
        assert abs(draws.mean() - mean) <= 3.0 * se_mean
        se_var = var * math.sqrt(2.0 / (draws.size - 1))
        assert abs(draws.var() - var) <= 3.0 * se_var

    def test_full_mode_sample_density_self_consistent(self):
        policy = Policy.initialize(policy_full_config(3), np.random.default_rng(17))
        rng = np.random.default_rng(3)
        state = apply_add_edge(apply_add_edge(empty_state(3), 0, 2), 1, 2)
        theta, logd = policy.sample_theta(state, rng)
        fd = policy.forward(state)
        assert logd == pytest.approx(
            policy.log_pf_theta(state, theta) - fd.log_p_stop, abs=1e-12)


class TestSampleTrajectory:
    def test_full_exploration_uniform_over_single_edge_graphs(self):
        policy = make_policy(d=2, seed=18)
        rng = np.random.default_rng(4)
        counts = Counter()
        draws = 10_000
        for _ in range(draws):
            _, final = sample_trajectory(policy, rng, exploration_eps=1.0)
            counts[final.to_hex()] += 1
        # the two single-edge graphs must be hit equally often
        a = counts[apply_add_edge(empty_state(2), 0, 1).to_hex()]
        b = counts[apply_add_edge(empty_state(2), 1, 0).to_hex()]
        expected = (a + b) / 2.0
        chi2 = (a - expected) ** 2 / expected + (b - expected) ** 2 / expected
        assert chi2 < 6.635  # chi-square 1 dof, 0.99 quantile

    def test_trajectories_bounded_by_complete_dag(self):
        policy = make_policy(d=4, seed=19)
        policy.params["stop2_b"] = np.array([-20.0])  # never wants to stop
        rng = np.random.default_rng(5)
        for _ in range(30):
            states, final = sample_trajectory(policy, rng)
            assert final.num_edges <= 4 * 3 // 2
            assert len(states) == final.num_edges + 1

    def test_deterministic_under_fixed_seed(self):
        policy = make_policy(d=4, seed=20)
        first = [s.to_hex() for s in
                 sample_trajectory(policy, np.random.default_rng(9), 0.3)[0]]
        second = [s.to_hex() for s in
                  sample_trajectory(policy, np.random.default_rng(9), 0.3)[0]]
        assert first == second

    def test_rejects_bad_eps(self):
        policy = make_policy()
        with pytest.raises(ValueError):
            sample_trajectory(policy, np.random.default_rng(0), exploration_eps=1.5)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        policy = make_policy(d=4, seed=21)
        path = tmp_path / "checkpoint.json"
        policy.save(path)
        loaded = Policy.load(path)
        assert loaded.config == policy.config
        assert set(loaded.params) == set(policy.params)
        for name in policy.params:
            np.testing.assert_array_equal(loaded.params[name], policy.params[name])

    def test_version_guard(self, tmp_path):
        import json

        policy = make_policy()
        path = tmp_path / "checkpoint.json"
        policy.save(path)
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="version"):
            Policy.load(path)

    def test_forward_identical_after_reload(self, tmp_path):
        policy = make_policy(d=4, seed=22)
        path = tmp_path / "checkpoint.json"
        policy.save(path)
        loaded = Policy.load(path)
        state = apply_add_edge(empty_state(4), 1, 2)
        a, b = policy.forward(state), loaded.forward(state)
        np.testing.assert_array_equal(a.edge_log_probs, b.edge_log_probs)
        np.testing.assert_array_equal(a.theta_mean, b.theta_mean)
        assert a.p_stop == b.p_stop
