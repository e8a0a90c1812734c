"""Actor-critic controller trained with a clipped-ratio policy gradient."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import ContractError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    gamma: float = 0.7
    clip_eps: float = 0.2
    entropy_weight: float = 0.01
    batch_size: int = 256
    epochs: int = 4
    lr: float = 1e-3
    critic_lr: float = 1e-3
    normalize_advantages: bool = True
    clip_norm: float = 5.0
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.clip_eps <= 0:
            raise ContractError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.entropy_weight < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ContractError("entropy_weight >= 0, batch_size > 0 and epochs >= 0 required")


# ---------------------------------------------------------------------------
# networks


class Critic:
    """State features -> scalar value through one ReLU hidden layer."""

    def __init__(self, state_dim: int, hidden_dim: int, rng: np.random.Generator, zero: bool = False):
        self.state_dim = state_dim
        self.store = nn.ParamStore()
        self.store.add_dense("v1", state_dim, hidden_dim, rng)
        self.store.add_dense("v2", hidden_dim, 1, rng, zero=zero)

    def value(self, states) -> nn.Tensor:
        states = nn.as_tensor(states)
        if states.shape[-1] != self.state_dim:
            raise ContractError(f"critic expects {self.state_dim} state features, got {states.shape[-1]}")
        st = self.store
        hid = nn.dense_forward(states, st["v1.W"], st["v1.b"], "relu")
        v = nn.dense_forward(hid, st["v2.W"], st["v2.b"])
        return nn.reshape(v, v.shape[:-1])

    def values(self, states) -> np.ndarray:
        with nn.no_grad():
            return self.value(states).data

    def copy(self) -> "Critic":
        other = object.__new__(Critic)
        other.state_dim, other.store = self.state_dim, self.store.copy()
        return other


class Actor:
    """Scores each candidate story from the state and that story's features.

    ``story_features`` is a fixed (n_stories, F) table; candidates are row
    indices into it. The logit of a candidate is a one-hidden-layer MLP over
    the concatenated state and story features.
    """

    def __init__(self, state_dim: int, story_features: np.ndarray, hidden_dim: int,
                 rng: np.random.Generator, zero: bool = False):
        self.state_dim = state_dim
        self.story_features = np.asarray(story_features, dtype=np.float64)
        F = self.story_features.shape[1]
        st = self.store = nn.ParamStore()
        W = nn.glorot(rng, state_dim + F, hidden_dim)
        st.add("a1.W_s", W[:state_dim])
        st.add("a1.W_d", W[state_dim:])
        st.add("a1.b", np.zeros(hidden_dim))
        st.add_dense("a2", hidden_dim, 1, rng, zero=zero)

    def logits(self, states, candidates) -> nn.Tensor:
        states = nn.as_tensor(states)
        cand = np.asarray(candidates, dtype=np.int64)
        if cand.shape[-1] == 0:
            raise ContractError("policy needs at least one candidate")
        if states.shape[-1] != self.state_dim:
            raise ContractError(f"actor expects {self.state_dim} state features, got {states.shape[-1]}")
        st = self.store
        s_part = nn.matmul(states, st["a1.W_s"])
        s_part = nn.reshape(s_part, s_part.shape[:-1] + (1, s_part.shape[-1]))
        d_part = nn.matmul(self.story_features[cand], st["a1.W_d"])
        hid = nn.relu(s_part + d_part + st["a1.b"])
        out = nn.dense_forward(hid, st["a2.W"], st["a2.b"])
        return nn.reshape(out, out.shape[:-1])

    def log_probs(self, states, candidates) -> nn.Tensor:
        return nn.log_softmax(self.logits(states, candidates))

    def probs(self, states, candidates) -> np.ndarray:
        with nn.no_grad():
            return np.exp(self.log_probs(states, candidates).data)

    def greedy(self, states, candidates) -> np.ndarray:
        """Index of the most probable candidate; ties go to the lowest index."""
        return np.argmax(self.probs(states, candidates), axis=-1)

    def copy(self) -> "Actor":
        other = object.__new__(Actor)
        other.state_dim, other.story_features = self.state_dim, self.story_features
        other.store = self.store.copy()
        return other


# ---------------------------------------------------------------------------
# closed-form pieces


def value_forward(h, critic: Critic) -> nn.Tensor:
    return critic.value(h)


def td_target(r, v_next, gamma: float, terminal):
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must be in [0, 1], got {gamma}")
    return np.asarray(r, dtype=np.float64) + gamma * np.where(terminal, 0.0, v_next)


def advantage(r, v_s, v_next, gamma: float, terminal):
    return td_target(r, v_next, gamma, terminal) - np.asarray(v_s, dtype=np.float64)


def ppo_clip_term(p_new, p_old, adv, eps: float):
    p_old = np.asarray(p_old, dtype=np.float64)
    if (p_old <= 0).any():
        raise ContractError("old-policy probability must be positive")
    ratio = np.asarray(p_new, dtype=np.float64) / p_old
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def policy_forward(h, candidates, actor: Actor) -> np.ndarray:
    return actor.probs(h, candidates)


def entropy(dist) -> float | np.ndarray:
    p = np.asarray(dist, dtype=np.float64)
    if (p < 0).any() or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-9:
        raise ContractError("entropy needs a probability vector")
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class TransitionSample:
    state: np.ndarray
    candidates: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool
    p_old: float
    source: str = "logged"


# wide enough for every source tag; a narrower dtype silently truncates on assignment
SOURCE_DTYPE = "<U16"


@dataclass
class SampleBatch:
    """Column-wise transition buffer.

    ``source`` records where ``p_old`` came from: ``logged`` (recorded
    propensities), ``imitation`` (imitation-policy probabilities for sessions
    without one) or ``imagined`` (the acting policy at sampling time).
    """

    states: np.ndarray
    candidates: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    p_old: np.ndarray
    source: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.actions)
        if self.source is None:
            self.source = np.full(n, "logged")
        self.source = np.asarray(self.source, dtype=SOURCE_DTYPE)
        for name in ("states", "candidates", "rewards", "next_states", "terminal", "p_old", "source"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"sample column {name} has {len(getattr(self, name))} rows, expected {n}")
        if n and (self.p_old <= 0).any():
            raise ContractError("every sample needs p_old > 0")

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "SampleBatch":
        return SampleBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def from_samples(cls, samples: Sequence[TransitionSample]) -> "SampleBatch":
        if not samples:
            raise ContractError("no samples")
        return cls(
            np.array([s.state for s in samples], dtype=np.float64),
            np.array([s.candidates for s in samples], dtype=np.int64),
            np.array([s.action for s in samples], dtype=np.int64),
            np.array([s.reward for s in samples], dtype=np.float64),
            np.array([s.next_state for s in samples], dtype=np.float64),
            np.array([s.terminal for s in samples], dtype=bool),
            np.array([s.p_old for s in samples], dtype=np.float64),
            np.array([s.source for s in samples]),
        )

    @classmethod
    def concat(cls, batches: Sequence["SampleBatch"]) -> "SampleBatch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in cls.__dataclass_fields__))


# ---------------------------------------------------------------------------
# losses


def critic_loss(critic: Critic, batch: SampleBatch, gamma: float, target: np.ndarray | None = None) -> nn.Tensor:
    """Mean squared TD error; the bootstrap target carries no gradient."""
    if target is None:
        target = td_target(batch.rewards, critic.values(batch.next_states), gamma, batch.terminal)
    diff = critic.value(batch.states) - target
    return nn.mean(nn.square(diff))


def actor_objective(actor: Actor, batch: SampleBatch, adv: np.ndarray, eps: float,
                    entropy_weight: float) -> tuple[nn.Tensor, dict]:
    """Mean clipped surrogate plus weighted mean entropy (to be maximized)."""
    logp = actor.log_probs(batch.states, batch.candidates)
    logp_a = nn.take_along_last(logp, batch.actions)
    ratio = nn.exp(logp_a - np.log(batch.p_old))
    surrogate = nn.minimum(ratio * adv, nn.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)
    ent = nn.entropy_of(nn.exp(logp), logp)
    objective = nn.mean(surrogate) + nn.mean(ent) * entropy_weight
    r = ratio.data
    stats = {"mean_ratio": float(r.mean()), "clip_fraction": float((np.abs(r - 1.0) > eps).mean()),
             "entropy": float(ent.data.mean())}
    return objective, stats


def fit_critic(critic: Critic, samples: SampleBatch, cfg: PPOConfig, steps: int, seed: int = 0) -> Critic:
    """TD(0) regression of a copy of ``critic`` on ``samples`` for ``steps`` mini-batches."""
    critic = critic.copy()
    rng = np.random.default_rng(seed)
    n = len(samples)
    for _ in range(steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss = critic_loss(critic, samples.take(idx), cfg.gamma)
        _check(loss, "critic-fit", "critic", 0)
        nn.backward(loss, critic.store)
        nn.adam_step(critic.store, cfg.critic_lr, clip_norm=cfg.clip_norm)
    return critic


def _normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def controller_learning(samples: SampleBatch | Sequence[TransitionSample], actor: Actor, critic: Critic,
                        cfg: PPOConfig, seed: int | None = None, metrics: list | None = None,
                        stage: str = "controller") -> tuple[Actor, Critic]:
    """Several epochs of mini-batch critic and actor steps on a fixed sample buffer.

    Returns updated copies; the inputs are left untouched. Advantages use the
    critic as it was on entry. ``metrics`` (if given) receives one dict per update.
    """
    batch = samples if isinstance(samples, SampleBatch) else SampleBatch.from_samples(samples)
    if len(batch) == 0:
        raise ContractError("controller_learning needs samples")
    actor, critic = actor.copy(), critic.copy()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    adv_all = advantage(batch.rewards, critic.values(batch.states), critic.values(batch.next_states),
                        cfg.gamma, batch.terminal)
    n = len(batch)
    update = len(metrics) if metrics is not None else 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            mb = batch.take(idx)
            c_loss = critic_loss(critic, mb, cfg.gamma)
            _check(c_loss, stage, "critic", epoch)
            nn.backward(c_loss, critic.store)
            nn.adam_step(critic.store, cfg.critic_lr, clip_norm=cfg.clip_norm)

            adv = adv_all[idx]
            if cfg.normalize_advantages:
                adv = _normalize(adv)
            objective, stats = actor_objective(actor, mb, adv, cfg.clip_eps, cfg.entropy_weight)
            loss = -objective
            _check(loss, stage, "actor", epoch)
            nn.backward(loss, actor.store)
            nn.adam_step(actor.store, cfg.lr, clip_norm=cfg.clip_norm)
            if metrics is not None:
                metrics.append({"update": update, "value_loss": c_loss.item(), **stats,
                                "actor_loss": loss.item()})
            update += 1
    return actor, critic


def _check(loss: nn.Tensor, stage: str, part: str, epoch: int) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite {part} loss in epoch {epoch}", stage=stage)


METRIC_COLUMNS = ("update", "mean_ratio", "clip_fraction", "entropy", "value_loss", "actor_loss")


def write_metrics_csv(metrics: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([m["update"]] + [repr(float(m[c])) for c in METRIC_COLUMNS[1:]])
