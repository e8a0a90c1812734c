"""Imitation of the logging policy, imagination through the learned model, and the full training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import nn
from .controller import SOURCE_DTYPE, Actor, Critic, PPOConfig, SampleBatch, controller_learning, fit_critic
from .data import Dataset
from .dynamics import DynamicModel, DynamicModelConfig, Packed, pack, train_dynamic_model
from .errors import ContractError, DataError, NumericalError

log = logging.getLogger(__name__)


class Variant(str, Enum):
    DRESS = "dress"
    DRESS_S = "dress-s"
    DRESS_M = "dress-m"
    DNNC = "dnnc"


@dataclass
class ImitationConfig:
    entropy_weight: float = 1e-4
    epochs: int = 10
    batch_size: int = 256
    lr: float = 3e-3
    hidden_dim: int = 64

    def __post_init__(self):
        if self.entropy_weight < 0:
            raise ContractError("imitation entropy weight must be >= 0")


@dataclass
class ImaginationConfig:
    t_img: int = 10
    n_rollouts: int = 1000
    n_iter: int = 10
    reward_mode: str = "sample"
    early_stop_tol: float = 1e-3
    early_stop_window: int = 3

    def __post_init__(self):
        if self.t_img < 1:
            raise ContractError("t_img must be >= 1")
        if self.reward_mode not in ("sample", "expectation"):
            raise ContractError(f"reward_mode must be sample or expectation, got {self.reward_mode!r}")


@dataclass
class DNNCConfig:
    kl_weight: float = 1.0
    epochs: int = 10
    batch_size: int = 256
    lr: float = 3e-3


@dataclass
class PipelineConfig:
    dynamics: DynamicModelConfig = field(default_factory=DynamicModelConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    imitation: ImitationConfig = field(default_factory=ImitationConfig)
    imagination: ImaginationConfig = field(default_factory=ImaginationConfig)
    dnnc: DNNCConfig = field(default_factory=DNNCConfig)
    critic_warmup: int = 500
    seed: int = 0


def stage_seed(seed: int, stage: str) -> int:
    """Independent, reproducible seed for one pipeline stage."""
    return int(np.random.SeedSequence([seed, sum(map(ord, stage)), len(stage)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# logged sessions as flat arrays


@dataclass
class SessionTable:
    """One row per logged session, with model states attached.

    ``h``/``q`` are the model's hidden state and query features before the
    session; ``states`` is their concatenation.
    """

    episode: np.ndarray
    t: np.ndarray
    lengths: np.ndarray
    h: np.ndarray
    q: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    candidates: np.ndarray
    actions: np.ndarray
    products: np.ndarray
    rewards: np.ndarray
    orders: np.ndarray
    story_clicked: np.ndarray
    propensity: np.ndarray

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([self.h, self.q], axis=-1)

    def __len__(self) -> int:
        return len(self.t)

    def take(self, idx) -> "SessionTable":
        kw = {f: getattr(self, f)[idx] for f in self.__dataclass_fields__ if f != "lengths"}
        return SessionTable(lengths=self.lengths, **kw)


def session_table(model: DynamicModel, data: Dataset | Packed, chunk: int = 256) -> SessionTable:
    packed = data if isinstance(data, Packed) else pack(list(data), model.catalog)
    order = np.argsort(packed.lengths, kind="stable")
    parts = []
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        sub = packed.take(idx)
        enc = model.encode(sub)
        ep, t = np.nonzero(sub.mask)
        last = t == sub.lengths[ep] - 1
        t1 = np.minimum(t + 1, sub.mask.shape[1] - 1)
        next_states = np.concatenate([enc["h"][ep, t + 1], enc["q"][ep, t1] * ~last[:, None]], axis=-1)
        parts.append(dict(
            episode=idx[ep], t=t, h=enc["h"][ep, t], q=enc["q"][ep, t], next_states=next_states,
            terminal=last, candidates=sub.candidates[ep, t], actions=sub.action[ep, t],
            products=sub.products[ep, t], rewards=sub.clicked[ep, t].max(axis=-1),
            orders=sub.ordered[ep, t].max(axis=-1), story_clicked=sub.story_clicked[ep, t],
            propensity=sub.propensity[ep, t]))
    cols = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    ordering = np.lexsort((cols["t"], cols["episode"]))
    return SessionTable(lengths=packed.lengths, **{k: v[ordering] for k, v in cols.items()})


def logged_samples(table: SessionTable, fallback: Actor | None = None) -> SampleBatch:
    """Transitions from logged sessions; sessions without a propensity take ``fallback``'s probability."""
    p_old = table.propensity.copy()
    source = np.full(len(table), "logged", dtype=SOURCE_DTYPE)
    missing = np.isnan(p_old)
    if missing.any():
        if fallback is None:
            raise DataError(f"{int(missing.sum())} sessions lack a logged propensity and no fallback policy was given")
        probs = fallback.probs(table.states[missing], table.candidates[missing])
        p_old[missing] = probs[np.arange(len(probs)), table.actions[missing]]
        source[missing] = "imitation"
    return SampleBatch(table.states, table.candidates, table.actions, table.rewards, table.next_states,
                       table.terminal, p_old, source)


# ---------------------------------------------------------------------------
# imitation


def imitation_loss(actor: Actor, states, candidates, actions, entropy_weight: float) -> nn.Tensor:
    """Mean over samples of -log pi(a|s) - w * H(pi(.|s))."""
    logp = actor.log_probs(states, candidates)
    nll = -nn.take_along_last(logp, actions)
    ent = nn.entropy_of(nn.exp(logp), logp)
    return nn.mean(nll - ent * entropy_weight)


def _minibatches(rng: np.random.Generator, n: int, size: int):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def new_actor(model: DynamicModel, hidden_dim: int, seed: int, zero: bool = False) -> Actor:
    state_dim = model.cfg.hidden_dim + model.cfg.features.embedding_dim
    return Actor(state_dim, model.story_features(), hidden_dim, np.random.default_rng(seed), zero=zero)


def controller_imitation(table: SessionTable, model: DynamicModel, cfg: ImitationConfig, seed: int = 0,
                         history: list | None = None, on_epoch: Callable | None = None) -> Actor:
    """Fit the imitation policy to the logged actions; ``history`` collects per-epoch mean loss."""
    if len(table) == 0:
        raise DataError("controller_imitation needs logged sessions")
    rng = np.random.default_rng(seed)
    actor = new_actor(model, cfg.hidden_dim, seed)
    states = table.states
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _minibatches(rng, len(table), cfg.batch_size):
            loss = imitation_loss(actor, states[idx], table.candidates[idx], table.actions[idx], cfg.entropy_weight)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite imitation loss in epoch {epoch}", stage="imitation")
            nn.backward(loss, actor.store)
            nn.adam_step(actor.store, cfg.lr)
            total += loss.item() * len(idx)
            count += len(idx)
        if history is not None:
            history.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, actor)
    return actor


# ---------------------------------------------------------------------------
# imagination


def imagine(model: DynamicModel, actor: Actor, table: SessionTable, cfg: ImaginationConfig,
            seed: int = 0) -> SampleBatch:
    """Roll the actor through the learned model from random logged sessions.

    Each rollout keeps its start session's candidate pool and product
    impressions. Predicted next-query features feed the next state directly.
    """
    if len(table) == 0:
        raise DataError("imagine needs logged sessions to start from")
    rng = np.random.default_rng(seed)
    n = cfg.n_rollouts
    start = rng.integers(0, len(table), size=n)
    h, q = table.h[start], table.q[start]
    cand, prods = table.candidates[start], table.products[start]
    with nn.no_grad():
        story_tab = model.story_table().data
        prod_feats = model.product_table().data[prods]
    cols = {k: [] for k in ("states", "candidates", "actions", "rewards", "next_states", "terminal", "p_old")}
    rows = np.arange(n)
    for step in range(cfg.t_img):
        state = np.concatenate([h, q], axis=-1)
        probs = actor.probs(state, cand)
        a = _sample(rng, probs)
        story = cand[rows, a]
        with nn.no_grad():
            s = model.state_repr(h, q)
            y_d, y_p, _ = model.reward_forward(s, story_tab[story], prod_feats)
        y_d, y_p = y_d.data, y_p.data
        clicked = (rng.random(y_p.shape) < y_p).astype(np.float64)
        story_clicked = (rng.random(n) < y_d).astype(np.float64)
        if cfg.reward_mode == "sample":
            r = clicked.max(axis=-1)
        else:
            r = 1.0 - np.prod(1.0 - y_p, axis=-1)
        with nn.no_grad():
            fb = model.feedback_features(story_clicked, clicked, nn.Tensor(prod_feats))
            h_next, q_hat = model.transition(nn.Tensor(h), nn.Tensor(story_tab[story]), nn.Tensor(q), fb)
        h, q = h_next.data, q_hat.data
        last = step == cfg.t_img - 1
        cols["states"].append(state)
        cols["candidates"].append(cand)
        cols["actions"].append(a)
        cols["rewards"].append(r)
        cols["next_states"].append(np.concatenate([h, q], axis=-1))
        cols["terminal"].append(np.full(n, last))
        cols["p_old"].append(probs[rows, a])
    # rollout-major order: all steps of rollout 0, then rollout 1, ...
    out = {k: np.stack(v, axis=1).reshape((n * cfg.t_img,) + np.asarray(v[0]).shape[1:]) for k, v in cols.items()}
    return SampleBatch(source=np.full(n * cfg.t_img, "imagined"), **out)


def _sample(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    u = rng.random((len(probs), 1))
    return np.minimum((np.cumsum(probs, axis=-1) < u).sum(axis=-1), probs.shape[-1] - 1)


# ---------------------------------------------------------------------------
# click-classifier baseline


def dnnc_train(table: SessionTable, pi0: Actor, kl_weight: float, cfg: DNNCConfig, seed: int = 0,
               history: list | None = None) -> Actor:
    """Story-click classifier whose candidate softmax is pulled toward ``pi0`` by a KL term.

    The logit of a candidate doubles as its click log-odds; the policy is the
    softmax of those logits over the pool. Starts from ``pi0``'s weights.
    """
    if kl_weight < 0:
        raise ContractError("kl_weight must be >= 0")
    rng = np.random.default_rng(seed)
    actor = pi0.copy()
    states = table.states
    ref = pi0.probs(states, table.candidates)
    ref_log = np.log(np.maximum(ref, 1e-300))
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _minibatches(rng, len(table), cfg.batch_size):
            logits = actor.logits(states[idx], table.candidates[idx])
            p_click = nn.sigmoid(nn.take_along_last(logits, table.actions[idx]))
            nll = nn.mean(nn.cross_entropy(p_click, table.story_clicked[idx]))
            logp = nn.log_softmax(logits)
            kl = nn.mean(nn.total((ref_log[idx] - logp) * ref[idx], axis=-1))
            loss = nll + kl * kl_weight
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss in epoch {epoch}", stage="dnnc")
            nn.backward(loss, actor.store)
            nn.adam_step(actor.store, cfg.lr)
            total += loss.item() * len(idx)
            count += len(idx)
        if history is not None:
            history.append(total / count)
    return actor


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class PipelineResult:
    model: DynamicModel
    actor: Actor
    critic: Critic | None
    pi0: Actor
    report: dict
    imagined: list = field(default_factory=list)


def _summarize(metrics: list) -> dict:
    if not metrics:
        return {}
    keys = [k for k in metrics[0] if k != "update"]
    return {"updates": len(metrics), **{k: float(np.mean([m[k] for m in metrics])) for k in keys}}


def run_dress_pipeline(dataset: Dataset, variant: Variant | str, cfg: PipelineConfig,
                       model: DynamicModel | None = None, pi0: Actor | None = None,
                       table: SessionTable | None = None, dynamics_curve: list | None = None) -> PipelineResult:
    """Train one policy variant end to end.

    A trained ``model`` and imitation policy ``pi0`` may be passed in to share
    them across variants; they are then not retrained.
    """
    variant = Variant(variant)
    report: dict = {"variant": variant.value, "seed": cfg.seed}
    if model is None:
        dyn_cfg = replace(cfg.dynamics, seed=stage_seed(cfg.seed, "dynamics"))
        model, dynamics_curve = train_dynamic_model(dataset, dyn_cfg)
    if dynamics_curve is not None:
        report["dynamics_curve"] = [asdict(r) for r in dynamics_curve]
    table = table if table is not None else session_table(model, dataset)
    if pi0 is None:
        hist: list = []
        pi0 = controller_imitation(table, model, cfg.imitation, seed=stage_seed(cfg.seed, "imitation"), history=hist)
        report["imitation_loss"] = hist

    if variant is Variant.DNNC:
        hist = []
        actor = dnnc_train(table, pi0, cfg.dnnc.kl_weight, cfg.dnnc, seed=stage_seed(cfg.seed, "dnnc"), history=hist)
        report["dnnc_loss"] = hist
        return PipelineResult(model, actor, None, pi0, report)

    ppo = replace(cfg.ppo, gamma=0.0) if variant is Variant.DRESS_M else cfg.ppo
    n_iter = 0 if variant is Variant.DRESS_S else cfg.imagination.n_iter
    report["gamma"] = ppo.gamma

    critic = Critic(model.cfg.hidden_dim + model.cfg.features.embedding_dim, ppo.hidden_dim,
                    np.random.default_rng(stage_seed(cfg.seed, "critic")))
    logged = logged_samples(table, fallback=pi0)
    report["logged_p_old_sources"] = {s: int((logged.source == s).sum()) for s in np.unique(logged.source)}
    critic = fit_critic(critic, logged, ppo, cfg.critic_warmup, seed=stage_seed(cfg.seed, "critic-fit"))
    metrics: list = []
    actor, critic = controller_learning(logged, pi0, critic, ppo, seed=stage_seed(cfg.seed, "logged"),
                                        metrics=metrics, stage="controller-logged")
    report["logged_update"] = _summarize(metrics)

    iterations, imagined_batches = [], []
    for it in range(n_iter):
        batch = imagine(model, actor, table, cfg.imagination, seed=stage_seed(cfg.seed, f"imagine-{it}"))
        imagined_batches.append(batch)
        metrics = []
        actor, critic = controller_learning(batch, actor, critic, ppo, seed=stage_seed(cfg.seed, f"ppo-{it}"),
                                            metrics=metrics, stage=f"controller-imagined-{it}")
        ret = float(batch.rewards.mean())
        iterations.append({"iteration": it, "imagined_reward": ret, **_summarize(metrics)})
        w = cfg.imagination.early_stop_window
        if len(iterations) > w:
            before = iterations[-w - 1]["imagined_reward"]
            best = max(r["imagined_reward"] for r in iterations[-w:])
            if best < before * (1.0 + cfg.imagination.early_stop_tol):
                log.info("imagination stopped after %d iterations", it + 1)
                break
    report["imagination"] = iterations
    return PipelineResult(model, actor, critic, pi0, report, imagined_batches)


class PolicyAgent:
    """Runs a trained policy against the simulator, tracking state through the learned model.

    ``policy`` maps (states, candidates) to candidate probabilities. The
    ``greedy`` flag picks the most probable candidate deterministically.
    """

    def __init__(self, model: DynamicModel, policy: Callable, greedy: bool = False):
        self.model, self.policy, self.greedy = model, policy, greedy
        with nn.no_grad():
            self._stories = model.story_table().data
            self._products = model.product_table().data
        self.h = None

    def reset(self, profiles: np.ndarray) -> None:
        with nn.no_grad():
            self.h = self.model.init_hidden(profiles).data

    def _query(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        w = np.full(tokens.shape, 1.0 / tokens.shape[1])
        with nn.no_grad():
            return self.model.query_features(tokens, w).data

    def probs(self, query_tokens, candidates) -> np.ndarray:
        q = self._query(query_tokens)
        p = self.policy(np.concatenate([self.h, q], axis=-1), candidates)
        if self.greedy:
            p = np.eye(p.shape[-1])[np.argmax(p, axis=-1)]
        return p

    def observe(self, query_tokens, story_idx, product_idx, clicked, ordered, story_clicked) -> None:
        q = self._query(query_tokens)
        prods = nn.Tensor(self._products[product_idx])
        with nn.no_grad():
            fb = self.model.feedback_features(np.asarray(story_clicked, float), np.asarray(clicked, float), prods)
            h, _ = self.model.transition(nn.Tensor(self.h), nn.Tensor(self._stories[story_idx]), nn.Tensor(q), fb)
        self.h = h.data
