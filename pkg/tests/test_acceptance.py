"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dress import env as sim
from dress import nn
from dress.cli import main
from dress.config import desk_config
from dress.controller import advantage, entropy, ppo_clip_term, td_target
from dress.data import FeatureConfig
from dress.dynamics import DynamicModel, DynamicModelConfig
from dress.evaluation import DifferenceRow, bootstrap_se, dominates, kl_divergence, tv_divergence, twis, twis_terms
from dress.experiment import trap_seed
from dress.gradcheck import TOLERANCE, run_checks
from dress.pipeline import ImitationConfig, controller_imitation, session_table
from sanity_problems import train_bandit, train_chain_critic

SEEDS = (0, 1, 2, 3, 4)


def test_gradient_certification(verdict):
    start = time.perf_counter()
    results = run_checks(50)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 120
    verdict(1, ok, f"{len(results)} operations x 50 seeds, worst {worst.name} {worst.max_rel_error:.2e} "
                   f"(< {TOLERANCE:g}), {elapsed:.0f}s")
    assert ok


def test_closed_forms(verdict):
    s = DynamicModel.session_losses(
        nn.Tensor(0.5), nn.Tensor([0.5, 0.5]), nn.Tensor([[1.0, 2.0], [3.0, 4.0]]), 1, [1, 0], np.zeros((2, 2)))
    cases = {
        "ppo_clip_term up": (ppo_clip_term(0.75, 0.5, 1.0, 0.2), 1.2),
        "ppo_clip_term down": (ppo_clip_term(0.25, 0.5, -1.0, 0.2), -0.8),
        "td_target": (td_target(1.0, 2.0, 0.7, False), 2.4),
        "td_target terminal": (td_target(1.0, 2.0, 0.7, True), 1.0),
        "advantage": (advantage(1.0, 2.2, 2.0, 0.7, False), 0.2),
        "cross_entropy y=1": (nn.cross_entropy(np.array(0.5), np.array(1)).item(), math.log(2)),
        "cross_entropy y=0": (nn.cross_entropy(np.array(0.25), np.array(0)).item(), -math.log(0.75)),
        # clicked product 0 has squared error 1 + 4; the unclicked one is masked out
        "conditional squared error": (s["L_Pl"].item(), 2.5),
        "entropy": (float(entropy(np.full(4, 0.25))), math.log(4)),
        "tv": (float(tv_divergence([0.75, 0.25], [0.25, 0.75])), 0.5),
        "kl": (float(kl_divergence([0.5, 0.5], [0.75, 0.25])), 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(2)),
        "twis pi=b": (twis([np.array([1.0, 0, 0, 1, 1]), np.array([0.0, 1])], [np.full(5, 0.3), np.full(2, 0.3)],
                           [np.full(5, 0.3), np.full(2, 0.3)], 2), 3 / 5),
    }
    errors = {k: abs(got - want) for k, (got, want) in cases.items()}
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-10
    verdict(2, ok, f"{len(cases)} closed forms, worst {worst} off by {errors[worst]:.1e}")
    assert ok, errors


def _twis_agreement(env, seed):
    """TWIS of a nearby target policy on logged data vs the simulator's window click rate."""
    b = sim.LoggingPolicy.for_env(env)
    rng = np.random.default_rng(100 + seed)
    pi = sim.LoggingPolicy(b.weights + 0.07 * rng.standard_normal(b.weights.shape), b.temperature)
    lengths = sim.PowerLawLengths(lo=11, hi=30)
    data = sim.gen_logged_dataset(env, b, 2000, lengths, seed=seed, min_len=11, max_len=30)
    R, P, B, kls = [], [], [], []
    for ep in data:
        cand = np.array([s.candidates for s in ep.sessions])
        a = np.array([s.action for s in ep.sessions])
        pb, pp = b.probs(env, None, 0, cand), pi.probs(env, None, 0, cand)
        kls.append(kl_divergence(pb, pp))
        R.append(np.array([s.reward for s in ep.sessions], dtype=float))
        P.append(pp[np.arange(len(a)), a])
        B.append(pb[np.arange(len(a)), a])
    terms = twis_terms(R, P, B, 15)
    oracle, _ = sim.window_click_rate(env, b, pi, 15, lengths, 50_000, seed=1000 + seed)
    return float(np.concatenate(kls).mean()), terms.estimate(), bootstrap_se(terms, 200, seed), oracle


def test_twis_properties(verdict, trap_env):
    rng = np.random.default_rng(0)
    drift, bounded = 0.0, True
    for _ in range(200):
        lens = rng.integers(16, 30, 8)
        r = [rng.integers(0, 2, k).astype(float) for k in lens]
        pi = [rng.uniform(0.05, 1, k) for k in lens]
        b = [rng.uniform(0.05, 1, k) for k in lens]
        base = twis(r, pi, b, 15)
        c = rng.uniform(0.01, 100)
        drift = max(drift, abs(twis(r, pi, [x * c for x in b], 15) - base),
                    abs(twis(r, [x * c for x in pi], b, 15) - base))
        window = np.concatenate([x[-16:] for x in r])
        bounded &= window.min() <= base <= window.max()
    agree = []
    for seed in SEEDS:
        kl, est, se, oracle = _twis_agreement(trap_env, seed)
        agree.append(kl < 0.05 and abs(est - oracle) <= 3 * se)
        print(f"  seed {seed}: KL {kl:.4f}  twis {est:.4f} +- {se:.4f}  oracle {oracle:.4f}")
    ok = drift <= 1e-10 and bounded and all(agree)
    verdict(3, ok, f"rescale drift {drift:.1e}, bounds hold: {bounded}, oracle agreement {sum(agree)}/5 seeds")
    assert ok


def test_imitation_recovery(verdict, trap_env):
    env, policy = trap_env, sim.LoggingPolicy.for_env(trap_env)
    lengths = sim.PowerLawLengths(lo=11, hi=30)
    train = sim.gen_logged_dataset(env, policy, 1000, lengths, seed=5, min_len=11, max_len=30)
    held = sim.gen_logged_dataset(env, policy, 250, lengths, seed=6, min_len=11, max_len=30, first_user_id=5000)
    fc = FeatureConfig(embedding_dim=16, dense_story_dim=13, vocab_size=85, candidate_pool_size=10)
    model = DynamicModel(DynamicModelConfig(features=fc, hidden_dim=16, state_dim=16, core_dim=16), train.catalog,
                         env.profile_dim, seed=0)
    pi0 = controller_imitation(session_table(model, train), model, ImitationConfig(), seed=1)
    table = session_table(model, held)
    assert table.candidates.shape[1] == 10
    kl = float(np.mean(kl_divergence(policy.probs(env, None, 0, table.candidates),
                                     pi0.probs(table.states, table.candidates))))
    ok = kl < 0.05
    verdict(4, ok, f"held-out mean KL(b || pi0) = {kl:.4f} nats on {len(table)} sessions (< 0.05)")
    assert ok


def test_ppo_sanity(verdict):
    prob, updates = train_bandit(seed=0)
    mse = train_chain_critic()
    ok = prob > 0.9 and updates <= 500 and mse < 1e-2
    verdict(5, ok, f"bandit pi(best) {prob:.3f} after {updates} updates; chain critic MSE {mse:.1e}")
    assert ok


@pytest.fixture(scope="module")
def trap_outcomes():
    cfg = desk_config()
    return [trap_seed(cfg, s) for s in SEEDS]


def test_method_ordering(verdict, trap_outcomes):
    gaps = {"dress >= dress-s": 0, "dress-s >= dnnc": 0, "dress > dress-m": 0}
    for o in trap_outcomes:
        r = {m: mean for m, (mean, _) in o.true_return.items()}
        print(f"  seed {o.seed}: " + "  ".join(f"{m} {mean:.3f} +- {se:.3f}" for m, (mean, se) in o.true_return.items()))
        gaps["dress >= dress-s"] += r["dress"] >= r["dress-s"]
        gaps["dress-s >= dnnc"] += r["dress-s"] >= r["dnnc"]
        gaps["dress > dress-m"] += r["dress"] > r["dress-m"]
    ok = all(n >= 4 for n in gaps.values())
    verdict(6, ok, "true-return ordering " + ", ".join(f"{k} in {n}/5" for k, n in gaps.items()))
    assert ok


def test_imagination_helps_long_horizons(verdict, trap_outcomes):
    wins = 0
    for o in trap_outcomes:
        g3 = o.twis_ctr[3]["dress"] - o.twis_ctr[3]["dress-s"]
        g15 = o.twis_ctr[15]["dress"] - o.twis_ctr[15]["dress-s"]
        print(f"  seed {o.seed}: gap H=3 {g3:+.4f}  H=15 {g15:+.4f}")
        wins += g15 > g3
    ok = wins >= 4
    verdict(7, ok, f"(dress - dress-s) TWIS-CTR gap larger at H=15 than H=3 in {wins}/5 seeds")
    assert ok


def test_policy_difference_shape(verdict, trap_outcomes):
    wins = 0
    for o in trap_outcomes:
        rows: dict[str, DifferenceRow] = {r.method: r for r in o.differences}
        unif, full, single = rows["unif"], rows["dress"], rows["dress-s"]
        hold = dominates(unif, full) and dominates(unif, single) and dominates(full, single, strict=False)
        print(f"  seed {o.seed}: " + "  ".join(f"{m} ({abs(r.log_ratio):.3f}, {r.tv:.3f}, {r.kl:.3f})"
                                               for m, r in rows.items()))
        wins += hold
    ok = wins >= 4
    verdict(8, ok, f"unif > dress, dress-s and dress >= dress-s on |log-ratio|, TV and KL in {wins}/5 seeds")
    assert ok


TINY = ["run.n_users=150", "run.critic_warmup=30", "features.embedding_dim=8", "dynamics.hidden_dim=12",
        "dynamics.state_dim=12", "dynamics.core_dim=12", "dynamics.epochs=1", "ppo.hidden_dim=16", "ppo.epochs=1",
        "imitation.hidden_dim=16", "imitation.epochs=2", "imagination.t_img=4", "imagination.n_rollouts=50",
        "imagination.n_iter=2", "dnnc.epochs=2"]


def _run_all(out: Path) -> dict[str, bytes]:
    common = ["--out", str(out), "--seed", "11"] + [x for s in TINY for x in ("--set", s)]
    assert main(["gen-data"] + common) == 0
    for v in ("dress", "dress-s", "dress-m", "dnnc"):
        assert main(["train", "--variant", v] + common) == 0
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_determinism(verdict, tmp_path):
    a, b = _run_all(tmp_path / "a"), _run_all(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differing and any(k.endswith("report.json") for k in a)
    verdict(9, ok, f"{len(a)} files from gen-data and train, {len(differing)} differ between runs")
    assert ok, differing
