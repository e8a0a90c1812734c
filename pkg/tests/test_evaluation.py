import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dress import env as sim
from dress.data import Feedback, Product, Query, Session, Story
from dress.errors import ContractError, DataError
from dress.evaluation import (DifferenceRow, EvalConfig, FoldEvaluation, bootstrap_se, compare_folds, ctr, cvr,
                              dominates, horizon_sweep, improvement, kl_divergence, log_ratio,
                              policy_difference_report, sign_test, tv_divergence, twis, twis_terms,
                              write_sweep_csv)


def _session(clicked: int, ordered: int = 0) -> Session:
    fb = Feedback(0, (clicked,), (ordered,), (1,) if clicked else ())
    return Session(0, 0, Query((1,)), Story(0, (1,), (1,), ()), (0,), (Product(1, (1,)),), fb)


def test_rates():
    assert ctr([_session(1), _session(1)]) == 1.0
    assert ctr([_session(1), _session(0)]) == 0.5
    assert cvr([_session(1, 1), _session(1, 0), _session(0)]) == pytest.approx(1 / 3)
    with pytest.raises(DataError):
        ctr([])
    with pytest.raises(DataError):
        cvr([])


def test_order_rate_never_exceeds_click_rate(small_dataset):
    sessions = [s for e in small_dataset for s in e.sessions]
    assert cvr(sessions) <= ctr(sessions)


# --- TWIS ---------------------------------------------------------------------


def _episodes(rng, n=6, lo=3, hi=9):
    lens = rng.integers(lo, hi, n)
    r = [rng.integers(0, 2, k).astype(float) for k in lens]
    pi = [rng.uniform(0.05, 1, k) for k in lens]
    b = [rng.uniform(0.05, 1, k) for k in lens]
    return r, pi, b


def test_equal_policies_give_truncated_mean():
    r = [np.array([1.0, 0, 0, 1, 1]), np.array([0.0, 1])]
    p = [np.full(5, 0.3), np.full(2, 0.3)]
    # H=2: last three sessions of the first episode, all of the second
    assert twis(r, p, p, 2) == pytest.approx((2 + 1) / (3 + 2), abs=1e-12)


def test_single_episode_weight_cancels():
    r = [np.array([0.0, 1, 1, 0, 1])]
    assert twis(r, [np.full(5, 0.9)], [np.full(5, 0.1)], 3) == pytest.approx(3 / 4, abs=1e-12)


def test_window_is_last_h_plus_one_sessions():
    r = [np.array([1.0, 1, 0, 0]), np.array([0.0, 0, 1, 1])]
    pi = [np.array([1, 1, 0.5, 0.5]), np.array([1, 1, 1.0, 1.0])]
    b = [np.full(4, 0.5), np.full(4, 0.5)]
    # H=1: weights are (1*1) and (2*2), window rewards sum to 0 and 2 over 2 sessions each
    assert twis(r, pi, b, 1) == pytest.approx((1 * 0 + 4 * 2) / (1 * 2 + 4 * 2), abs=1e-12)
    terms = twis_terms(r, pi, b, 1)
    np.testing.assert_array_equal(terms.count, [2, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.integers(1, 8))
def test_twis_scale_invariance_and_bounds(seed, c, H):
    # every episode covers the full window, so each weight gains the same factor
    r, pi, b = _episodes(np.random.default_rng(seed), lo=H + 1, hi=H + 12)
    base = twis(r, pi, b, H)
    assert abs(twis(r, pi, [x * c for x in b], H) - base) <= 1e-10
    assert abs(twis(r, [x * c for x in pi], b, H) - base) <= 1e-10
    window = np.concatenate([x[max(0, len(x) - H - 1):] for x in r])
    assert window.min() - 1e-12 <= base <= window.max() + 1e-12


def test_short_episodes_break_scale_invariance():
    r = [np.array([1.0, 1, 1]), np.array([0.0])]
    p = [np.full(3, 0.5), np.full(1, 0.5)]
    assert twis(r, p, p, 2) != pytest.approx(twis(r, p, [x * 2 for x in p], 2))


def test_twis_survives_extreme_ratios():
    r = [np.ones(16), np.zeros(16)]
    pi = [np.full(16, 1.0), np.full(16, 1.0)]
    b = [np.full(16, 1e-30), np.full(16, 1.0)]
    assert twis(r, pi, b, 15) == pytest.approx(1.0)


def test_zero_logging_probability_names_session():
    r = [np.ones(3), np.ones(4)]
    b = [np.ones(3), np.array([1.0, 0.5, 0.0, 1.0])]
    with pytest.raises(DataError, match="episode 1, session 2"):
        twis(r, [np.ones(3), np.ones(4)], b, 5)


def test_zero_probability_outside_window_is_ignored():
    r = [np.ones(4)]
    assert twis(r, [np.ones(4)], [np.array([0.0, 1, 1, 1])], 2) == 1.0


def test_twis_rejects_bad_input():
    with pytest.raises(ContractError):
        twis([np.ones(2)], [np.ones(2)], [np.ones(2)], 0)
    with pytest.raises(DataError):
        twis([], [], [], 3)
    with pytest.raises(DataError):
        twis([np.ones(2)], [np.ones(3)], [np.ones(2)], 3)


def test_bootstrap_se_is_zero_for_constant_rewards():
    r = [np.ones(5)] * 10
    rng = np.random.default_rng(0)
    terms = twis_terms(r, [rng.uniform(0.1, 1, 5) for _ in r], [np.full(5, 0.5)] * 10, 3)
    assert bootstrap_se(terms) == pytest.approx(0.0, abs=1e-15)
    r2, pi2, b2 = _episodes(rng, n=30)
    assert bootstrap_se(twis_terms(r2, pi2, b2, 3)) > 0


# --- divergences -----------------------------------------------------------------


def test_log_ratio_examples():
    assert log_ratio([0.3, 0.2], [0.3, 0.2]) == 0.0
    assert log_ratio([0.5, 0.5, 0.8], [0.25, 0.25, 0.4]) == pytest.approx(math.log(2), abs=1e-12)
    want = (math.log(0.9 / 0.3) + math.log(0.1 / 0.5) + math.log(0.4 / 0.4)) / 3
    assert log_ratio([0.9, 0.1, 0.4], [0.3, 0.5, 0.4]) == pytest.approx(want, abs=1e-12)
    with pytest.raises(ContractError):
        log_ratio([0.0], [0.5])


def test_tv_examples():
    assert tv_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert tv_divergence([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert tv_divergence([0.75, 0.25], [0.25, 0.75]) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ContractError):
        tv_divergence([0.5, 0.5], [1 / 3] * 3)


def test_kl_examples():
    assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0
    want = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert kl_divergence([0.5, 0.5], [0.75, 0.25]) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.143841, abs=1e-6)
    assert kl_divergence([0.0, 1.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(ContractError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_divergences_on_random_pairs():
    rng = np.random.default_rng(1)
    b, pi = rng.dirichlet(np.ones(5), 1000), rng.dirichlet(np.ones(5), 1000)
    assert (kl_divergence(b, pi) >= 0).all()
    tv = tv_divergence(b, pi)
    assert ((tv >= 0) & (tv <= 1)).all()
    np.testing.assert_allclose(kl_divergence(b, b), 0.0, atol=1e-15)


def test_difference_report_by_hand():
    ref = np.array([[0.5, 0.5], [0.25, 0.75]])
    pi = np.array([[0.75, 0.25], [0.5, 0.5]])
    actions = np.array([0, 1])
    rows = {r.method: r for r in policy_difference_report({"ref": ref, "pi": pi}, ref, actions)}
    assert rows["ref"] == DifferenceRow("ref", 0.0, 0.0, 0.0)
    assert rows["pi"].log_ratio == pytest.approx((math.log(1.5) + math.log(0.5 / 0.75)) / 2)
    assert rows["pi"].tv == pytest.approx(0.25)
    kl2 = 0.25 * math.log(0.25 / 0.5) + 0.75 * math.log(0.75 / 0.5)
    assert rows["pi"].kl == pytest.approx((0.143841036225890 + kl2) / 2, abs=1e-12)
    assert rows["unif"].tv == pytest.approx(0.125)


def test_dominance_uses_log_ratio_magnitude():
    far = DifferenceRow("unif", -2.0, 0.5, 1.0)
    near = DifferenceRow("x", 0.1, 0.1, 0.1)
    assert dominates(far, near) and not dominates(near, far)
    assert dominates(near, near, strict=False) and not dominates(near, near)


# --- comparison reports ------------------------------------------------------------


def test_improvement_and_sign_test():
    assert improvement(1.1, 1.0) == pytest.approx(10.0)
    assert improvement(0.5, 0.5) == 0.0
    assert sign_test([0, 0, 0]) == 1.0
    assert sign_test([1, 1, 1, 1, 1]) == pytest.approx(0.0625)
    assert sign_test([1, -1, 1, -1]) == 1.0


def _fold(rng, n_eps=40, k=4, methods=("pi0", "a", "b")):
    lens = rng.integers(3, 8, n_eps)
    episode = np.repeat(np.arange(n_eps), lens)
    n = len(episode)
    probs = {m: rng.dirichlet(np.ones(k) * 5, n) for m in methods}
    clicks = rng.integers(0, 2, n).astype(float)
    return FoldEvaluation(episode, rng.integers(0, k, n), clicks, clicks * rng.integers(0, 2, n), probs, "pi0")


def test_identical_variants_show_no_improvement():
    rng = np.random.default_rng(2)
    folds = [_fold(rng) for _ in range(5)]
    for f in folds:
        f.probs["copy"] = f.probs["pi0"].copy()
    rows = {(r["method"], r["metric"]): r for r in compare_folds(folds, EvalConfig(horizon=3)).summary()}
    for metric in ("ctr", "cvr"):
        assert rows[("copy", metric)]["improvement"] == 0.0
        assert rows[("copy", metric)]["p_value"] == 1.0
        assert rows[("pi0", metric)]["improvement"] == 0.0


def test_report_arithmetic_matches_raw_values(tmp_path):
    rng = np.random.default_rng(3)
    folds = [_fold(rng) for _ in range(3)]
    report = compare_folds(folds, EvalConfig(horizon=2))
    raw = report.per_fold["ctr"]
    for row in report.summary():
        if row["metric"] != "ctr":
            continue
        want = np.mean([100 * (x / y - 1) for x, y in zip(raw[row["method"]], raw["pi0"])])
        assert row["improvement"] == pytest.approx(want, rel=1e-12)
        assert row["mean"] == pytest.approx(np.mean(raw[row["method"]]))
    assert raw["a"][1] == folds[1].twis("a", 2, "click")
    report.write_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "method,metric,mean,std,significance"
    assert {r.method for r in report.differences} == {"pi0", "a", "b", "unif"}


def test_horizon_sweep_is_deterministic(tmp_path):
    folds = [_fold(np.random.default_rng(s)) for s in (4, 5)]
    a, b = horizon_sweep(folds), horizon_sweep(folds)
    assert a == b and len(a) == 15 * 3
    assert all(r["mean"] == 0.0 for r in a if r["method"] == "pi0")
    write_sweep_csv(a, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 46


def test_eval_config_validation():
    with pytest.raises(ContractError):
        EvalConfig(horizon=0)
    with pytest.raises(ContractError):
        EvalConfig(reward="dwell")


def test_oracle_best_policy_has_highest_twis(trap_env):
    """Per session, the story with the highest true expected click probability wins the comparison."""
    env, seed = trap_env, 4
    logging = sim.LoggingPolicy.for_env(env)
    data = sim.gen_logged_dataset(env, logging, 1000, sim.PowerLawLengths(lo=11, hi=20), seed=seed,
                                  min_len=11, max_len=20)
    index = {p.product_id: j for j, p in enumerate(env.products)}
    z_start, _ = sim.user_start(env, [e.user_id for e in data], seed)
    episode, actions, clicks, b, best, worst = [], [], [], [], [], []
    k = env.candidate_pool_size
    for i, ep in enumerate(data):
        z = z_start[i]
        for s in ep.sessions:
            cand = np.array(s.candidates)
            prods = np.array([index[p.product_id] for p in s.impressed_products])
            value = env.expected_reward(env.drift(np.repeat(z[None], k, 0), cand), np.tile(prods, (k, 1)))
            best.append(np.eye(k)[value.argmax()])
            worst.append(np.eye(k)[value.argmin()])
            b.append(logging.probs(env, z[None], s.t, cand[None])[0])
            episode.append(i)
            actions.append(s.action)
            clicks.append(s.reward)
            # zero latent noise: the logged story alone drives the latent forward
            z = env.drift(z[None], np.array([s.story_shown.story_id]))[0]
    b = np.array(b)
    probs = {"pi0": b, "unif": np.full_like(b, 1 / k), "oracle": np.array(best), "worst": np.array(worst),
             "half": 0.5 * (np.array(best) + b)}
    fold = FoldEvaluation(np.array(episode), np.array(actions), np.array(clicks, float), np.zeros(len(b)),
                          probs, "pi0")
    scores = {m: fold.twis(m, 1) for m in probs}
    assert max(scores, key=scores.get) == "oracle"
