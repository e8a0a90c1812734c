"""End-to-end experiments on a simulated world: data, training of every variant, evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import env as sim
from .config import RunConfig
from .data import Dataset, split_folds
from .dynamics import DynamicModel, train_dynamic_model
from .errors import ConfigError, DataError
from .evaluation import EvalReport, FoldEvaluation, compare_folds
from .pipeline import (Actor, PolicyAgent, SessionTable, Variant, controller_imitation,
                       run_dress_pipeline, session_table, stage_seed)

log = logging.getLogger(__name__)


def build_env(cfg: RunConfig) -> sim.EnvParams:
    """The configured scenario, sized to the feature config's dense dimension and candidate pool."""
    fc = cfg.features
    env = sim.make_scenarios(cfg.run.scenario, seed=cfg.run.scenario_seed, dense_dim=fc.dense_story_dim,
                             candidate_pool_size=fc.candidate_pool_size)
    if fc.vocab_size < env.vocab_size:
        raise ConfigError(f"[features] vocab_size = {fc.vocab_size} is too small for scenario "
                          f"{cfg.run.scenario!r}, which needs >= {env.vocab_size}")
    if fc.candidate_pool_size > len(env.stories):
        raise ConfigError(f"[features] candidate_pool_size = {fc.candidate_pool_size} exceeds the "
                          f"{len(env.stories)} stories of scenario {cfg.run.scenario!r}")
    return env


def generate(cfg: RunConfig, seed: int, env: sim.EnvParams | None = None) -> tuple[Dataset, list]:
    """Logged dataset from the scenario's logging policy plus its user folds."""
    env = env or build_env(cfg)
    lengths = sim.PowerLawLengths(lo=cfg.run.min_len, hi=cfg.run.max_len)
    data = sim.gen_logged_dataset(env, sim.LoggingPolicy.for_env(env), cfg.run.n_users, lengths, seed=seed,
                                  min_len=cfg.run.min_len, max_len=cfg.run.max_len)
    return data, split_folds(list(data), cfg.run.folds, seed)


def fold_split(data: Dataset, folds: list, test_fold: int) -> tuple[Dataset, Dataset]:
    if not 0 <= test_fold < len(folds):
        raise DataError(f"fold {test_fold} does not exist; available folds: {list(range(len(folds)))}")
    test_users = {e.user_id for e in folds[test_fold]}
    train = [e for e in data if e.user_id not in test_users]
    test = [e for e in data if e.user_id in test_users]
    return data.subset(train), data.subset(test)


@dataclass
class TrainedVariants:
    model: DynamicModel
    pi0: Actor
    table: SessionTable
    results: dict = field(default_factory=dict)   # variant name -> PipelineResult
    dynamics_curve: list = field(default_factory=list)

    @property
    def actors(self) -> dict:
        return {"pi0": self.pi0, **{k: r.actor for k, r in self.results.items()}}


def train_variants(train: Dataset, cfg: RunConfig, seed: int, variants=None) -> TrainedVariants:
    """Train the dynamic model and imitation policy once, then every requested variant on top."""
    pcfg = cfg.pipeline(seed)
    model, curve = train_dynamic_model(train, pcfg.dynamics)
    table = session_table(model, train)
    pi0 = controller_imitation(table, model, pcfg.imitation, seed=stage_seed(seed, "imitation"))
    out = TrainedVariants(model, pi0, table, dynamics_curve=curve)
    for v in variants or cfg.run.variants:
        out.results[Variant(v).value] = run_dress_pipeline(train, v, pcfg, model=model, pi0=pi0, table=table)
    return out


def fold_evaluation(model: DynamicModel, actors: dict, test: Dataset) -> FoldEvaluation:
    """Test-fold rewards and each actor's candidate probabilities; ``actors`` must include "pi0"."""
    tt = session_table(model, test)
    probs = {name: a.probs(tt.states, tt.candidates) for name, a in actors.items()}
    return FoldEvaluation(tt.episode, tt.actions, tt.rewards, tt.orders, probs, "pi0")


def true_returns(env: sim.EnvParams, model: DynamicModel, actors: dict, test: Dataset, seed: int, horizon: int = 15,
                 gamma: float = 0.7, repeats: int = 8, reward: str = "click") -> dict:
    """Mean discounted simulator return of every trained policy from the test users' start states.

    All policies share the start states and the simulator seed.
    """
    ids = np.repeat([e.user_id for e in test], repeats)
    z0, profiles = sim.user_start(env, ids, seed)
    out = {}
    for name, actor in actors.items():
        r = sim.rollout_agent(env, PolicyAgent(model, actor.probs), z0, profiles, horizon, gamma,
                              seed=stage_seed(seed, "true-return"), reward=reward)
        out[name] = (float(r.mean()), float(r.std(ddof=1) / np.sqrt(len(r))))
    return out


def compare_methods(data: Dataset, folds: list, cfg: RunConfig, seed: int, test_folds=None) -> EvalReport:
    """Train on all-but-one fold and evaluate on the held-out fold, for each requested test fold."""
    evaluations = []
    for k in test_folds if test_folds is not None else range(len(folds)):
        train, test = fold_split(data, folds, k)
        trained = train_variants(train, cfg, seed)
        evaluations.append(fold_evaluation(trained.model, trained.actors, test))
    return compare_folds(evaluations, cfg.eval)


@dataclass
class SeedOutcome:
    """Everything the myopic-trap comparison reports for one seed."""

    seed: int
    true_return: dict          # method -> (mean, standard error)
    twis_ctr: dict             # horizon -> method -> TWIS-CTR
    differences: list          # DifferenceRow per method, against pi0


def trap_seed(cfg: RunConfig, seed: int, horizons=(3, 15), test_fold: int = 0) -> SeedOutcome:
    """Train every variant on all folds but ``test_fold`` and score them on it, by simulator and by TWIS."""
    env = build_env(cfg)
    data, folds = generate(cfg, seed, env)
    train, test = fold_split(data, folds, test_fold)
    trained = train_variants(train, cfg, seed)
    actors = trained.actors
    fe = fold_evaluation(trained.model, actors, test)
    ret = true_returns(env, trained.model, actors, test, seed, cfg.eval.horizon, cfg.ppo.gamma)
    twis_ctr = {H: {m: fe.twis(m, H, "click") for m in actors} for H in horizons}
    report = compare_folds([fe], cfg.eval)
    return SeedOutcome(seed, ret, twis_ctr, report.differences)
