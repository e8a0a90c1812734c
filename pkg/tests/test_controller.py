import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dress import nn
from dress.controller import (METRIC_COLUMNS, Actor, Critic, PPOConfig, SampleBatch, actor_objective, advantage,
                              controller_learning, critic_loss, entropy, fit_critic, ppo_clip_term, td_target,
                              write_metrics_csv)
from dress.errors import ContractError, NumericalError
from sanity_problems import chain_batch, train_bandit, train_chain_critic


def test_td_target_examples():
    assert td_target(1.0, 2.0, 0.7, False) == pytest.approx(2.4)
    assert td_target(1.0, 2.0, 0.7, True) == 1.0
    assert td_target(0.3, 5.0, 0.0, False) == 0.3


def test_td_target_rejects_bad_gamma():
    with pytest.raises(ContractError):
        td_target(1.0, 1.0, 1.5, False)


def test_advantage_example():
    assert advantage(1.0, 2.2, 2.0, 0.7, False) == pytest.approx(0.2)


def test_clip_term_examples():
    assert ppo_clip_term(0.75, 0.5, 1.0, 0.2) == pytest.approx(1.2)
    assert ppo_clip_term(0.25, 0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert ppo_clip_term(0.4, 0.4, -0.37, 0.2) == pytest.approx(-0.37)
    with pytest.raises(ContractError):
        ppo_clip_term(0.4, 0.0, 1.0, 0.2)


@settings(max_examples=80, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0), st.floats(-5, 5), st.floats(0.01, 0.5))
def test_clip_term_is_pessimistic(p_new, p_old, adv, eps):
    term = ppo_clip_term(p_new, p_old, adv, eps)
    assert term <= (p_new / p_old) * adv + 1e-12
    assert term <= (1 + eps) * adv + 1e-12 if adv >= 0 else term <= (1 - eps) * adv + 1e-12


def test_entropy_examples():
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4))
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    with pytest.raises(ContractError):
        entropy([0.5, 0.6])


def test_zero_critic_outputs_zero():
    c = Critic(5, 8, np.random.default_rng(0), zero=True)
    np.testing.assert_array_equal(c.values(np.random.default_rng(1).normal(size=(4, 5))), np.zeros(4))


def test_single_candidate_has_probability_one():
    a = Actor(3, np.random.default_rng(0).normal(size=(4, 2)), 8, np.random.default_rng(1))
    np.testing.assert_array_equal(a.probs(np.ones(3), [2]), [1.0])


def test_zero_output_layer_is_uniform():
    a = Actor(3, np.random.default_rng(0).normal(size=(6, 2)), 8, np.random.default_rng(1), zero=True)
    np.testing.assert_allclose(a.probs(np.ones(3), [0, 3, 5, 1]), np.full(4, 0.25), atol=1e-15)


def test_identical_story_features_get_identical_probabilities():
    feats = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, -1.0]])
    a = Actor(3, feats, 8, np.random.default_rng(4))
    p = a.probs(np.random.default_rng(5).normal(size=3), [0, 1, 2])
    assert p[0] == p[1]
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_actor_rejects_empty_candidates_and_bad_state():
    a = Actor(3, np.eye(2), 4, np.random.default_rng(0))
    with pytest.raises(ContractError):
        a.probs(np.ones(3), np.zeros(0, int))
    with pytest.raises(ContractError):
        a.probs(np.ones(4), [0, 1])


def _random_batch(rng, n=32, state_dim=3, n_stories=5, k=3, rewards=None):
    feats = rng.normal(size=(n_stories, 2))
    cand = np.stack([rng.choice(n_stories, k, replace=False) for _ in range(n)])
    actions = rng.integers(0, k, n)
    r = rng.random(n) if rewards is None else rewards
    return feats, SampleBatch(rng.normal(size=(n, state_dim)), cand, actions, r, rng.normal(size=(n, state_dim)),
                              rng.random(n) < 0.2, rng.uniform(0.2, 0.6, n))


def test_zero_advantage_and_no_entropy_leaves_actor_unchanged():
    rng = np.random.default_rng(0)
    feats, batch = _random_batch(rng, rewards=np.zeros(32))
    batch.terminal[:] = True
    actor = Actor(3, feats, 8, rng)
    critic = Critic(3, 8, rng, zero=True)
    new, _ = controller_learning(batch, actor, critic, PPOConfig(entropy_weight=0.0, batch_size=8))
    for name, t in actor.store.items():
        np.testing.assert_array_equal(new.store[name].data, t.data)


def test_inputs_are_not_mutated():
    rng = np.random.default_rng(1)
    feats, batch = _random_batch(rng)
    actor, critic = Actor(3, feats, 8, rng), Critic(3, 8, rng)
    a0 = {k: v.copy() for k, v in actor.store.values().items()}
    c0 = {k: v.copy() for k, v in critic.store.values().items()}
    new_a, new_c = controller_learning(batch, actor, critic, PPOConfig(batch_size=8))
    for k, v in a0.items():
        np.testing.assert_array_equal(actor.store[k].data, v)
    for k, v in c0.items():
        np.testing.assert_array_equal(critic.store[k].data, v)
    assert not np.array_equal(new_a.store["a2.W"].data, a0["a2.W"])


def test_clipped_samples_contribute_no_gradient():
    rng = np.random.default_rng(2)
    feats, batch = _random_batch(rng, n=6)
    actor = Actor(3, feats, 8, rng)
    p = actor.probs(batch.states, batch.candidates)[np.arange(6), batch.actions]
    # ratio 2 with positive advantage sits beyond the clip range
    batch.p_old = p / 2.0
    obj, stats = actor_objective(actor, batch, np.ones(6), 0.2, 0.0)
    assert stats["clip_fraction"] == 1.0 and stats["mean_ratio"] == pytest.approx(2.0)
    nn.backward(-obj, actor.store)
    for name, t in actor.store.items():
        np.testing.assert_array_equal(t.grad, 0.0, err_msg=name)


def test_critic_target_carries_no_gradient():
    """With the state equal to the next state, only the prediction side may push the value."""
    critic = Critic(2, 4, np.random.default_rng(3))
    s = np.ones((1, 2))
    batch = SampleBatch(s, np.zeros((1, 1), int), np.zeros(1, int), np.zeros(1), s, np.zeros(1, bool), np.ones(1))
    v = critic.values(s)[0]
    nn.backward(critic_loss(critic, batch, 0.9), critic.store)
    g_full = critic.store["v2.b"].grad[0]
    # d/dv (v - 0.9 v_detached)^2 = 2 (0.1 v); a live target would give 2 (0.1 v)(0.1)
    assert g_full == pytest.approx(2 * 0.1 * v, rel=1e-9)


def test_tiny_clip_range_keeps_policy_close():
    rng = np.random.default_rng(4)
    feats, batch = _random_batch(rng, n=64)
    actor, critic = Actor(3, feats, 8, rng), Critic(3, 8, rng)
    batch.p_old = actor.probs(batch.states, batch.candidates)[np.arange(64), batch.actions]
    p0 = actor.probs(batch.states, batch.candidates)

    def drift(eps):
        cfg = PPOConfig(clip_eps=eps, batch_size=16, epochs=10, lr=1e-2, entropy_weight=0.0)
        new, _ = controller_learning(batch, actor, critic, cfg)
        p = new.probs(batch.states, batch.candidates)
        return float((p0 * np.log(p0 / p)).sum(axis=-1).mean())

    tight, loose = drift(1e-6), drift(0.2)
    assert tight < loose
    assert tight < 0.01


def test_policy_stays_a_distribution_after_updates():
    rng = np.random.default_rng(5)
    feats, batch = _random_batch(rng, n=64)
    actor, critic = Actor(3, feats, 8, rng), Critic(3, 8, rng)
    for i in range(3):
        actor, critic = controller_learning(batch, actor, critic, PPOConfig(batch_size=16, lr=5e-2), seed=i)
    p = actor.probs(batch.states, batch.candidates)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_bandit_prefers_paying_arm():
    prob, updates = train_bandit(seed=0)
    assert prob > 0.9 and updates <= 500


def test_chain_critic_matches_true_values():
    assert train_chain_critic() < 1e-2


def test_fit_critic_reduces_td_error():
    batch, _ = chain_batch()
    cfg = PPOConfig(gamma=0.7, batch_size=3, critic_lr=1e-2)
    critic = Critic(3, 16, np.random.default_rng(0))
    fitted = fit_critic(critic, batch, cfg, steps=300)
    with nn.no_grad():
        assert critic_loss(fitted, batch, 0.7).item() < critic_loss(critic, batch, 0.7).item()


def test_learning_is_deterministic_for_a_seed():
    rng = np.random.default_rng(6)
    feats, batch = _random_batch(rng)
    actor, critic = Actor(3, feats, 8, rng), Critic(3, 8, rng)
    a1, _ = controller_learning(batch, actor, critic, PPOConfig(batch_size=8), seed=3)
    a2, _ = controller_learning(batch, actor, critic, PPOConfig(batch_size=8), seed=3)
    for k, v in a1.store.values().items():
        assert v.tobytes() == a2.store[k].data.tobytes()


def test_metrics_csv(tmp_path):
    rng = np.random.default_rng(7)
    feats, batch = _random_batch(rng)
    metrics = []
    controller_learning(batch, Actor(3, feats, 8, rng), Critic(3, 8, rng), PPOConfig(batch_size=8, epochs=2),
                        metrics=metrics)
    assert [m["update"] for m in metrics] == list(range(8))
    write_metrics_csv(metrics, tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 9


def test_non_finite_reward_is_numerical_error():
    rng = np.random.default_rng(8)
    feats, batch = _random_batch(rng)
    batch.rewards[3] = np.nan
    with pytest.raises(NumericalError, match="critic"):
        controller_learning(batch, Actor(3, feats, 8, rng), Critic(3, 8, rng), PPOConfig(batch_size=8),
                            stage="drl-iter-0")


def test_sample_batch_checks():
    with pytest.raises(ContractError, match="p_old"):
        SampleBatch(np.ones((1, 2)), np.zeros((1, 1), int), np.zeros(1, int), np.zeros(1), np.ones((1, 2)),
                    np.zeros(1, bool), np.zeros(1))
    with pytest.raises(ContractError, match="rows"):
        SampleBatch(np.ones((2, 2)), np.zeros((1, 1), int), np.zeros(1, int), np.zeros(1), np.ones((1, 2)),
                    np.zeros(1, bool), np.ones(1))
    with pytest.raises(ContractError):
        PPOConfig(gamma=-0.1)
