"""Finite-difference certification of every differentiable operation."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .controller import Actor, Critic, SampleBatch, actor_objective, critic_loss, td_target
from .data import Catalog, Episode, Feedback, FeatureConfig, Product, Query, Session, Story
from .dynamics import DynamicModel, DynamicModelConfig, pack
from .pipeline import imitation_loss

TOLERANCE = 1e-4
CORRUPT_ENV = "DRESS_CORRUPT_GRAD"


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_store(loss_fn: Callable[[], nn.Tensor], store: nn.ParamStore, rng: np.random.Generator | None = None,
                max_coords: int | None = None, step: float = 1e-5, corrupt: bool = False) -> float:
    """Max relative error between backprop and central differences.

    With ``max_coords`` only that many random coordinates of each parameter
    are differenced.
    """
    nn.backward(loss_fn(), store)
    worst = 0.0
    for name, p in store.items():
        analytic = p.grad.reshape(-1).copy()
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        numeric = np.empty(len(coords))
        with nn.no_grad():
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2.0 * step)
        worst = max(worst, nn.relative_error(analytic[coords], numeric, floor=1e-6))
    return worst


# --- individual checks: each builds a random instance from ``rng`` -----------


def _dense(rng):
    st = nn.ParamStore()
    st.add_dense("dense", 4, 3, rng)
    st["dense.b"].data = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    act = ["identity", "tanh", "sigmoid", "relu"][rng.integers(4)]
    return st, lambda: nn.total(nn.square(nn.dense_forward(x, st["dense.W"], st["dense.b"], act)))


def _gru(rng):
    st = nn.ParamStore()
    p = st.add_gru("gru", 3, 4, rng)
    for n in ("b_z", "b_r", "b_h"):
        st[f"gru.{n}"].data = rng.normal(scale=0.5, size=4)
    h0 = st.add("gru.h0", rng.uniform(-0.9, 0.9, size=(2, 4)))
    xs = rng.normal(size=(3, 2, 3))
    w = rng.normal(size=4)

    def f():
        h = h0
        for x in xs:
            h = nn.gru_step(x, h, p)
        return nn.total(h * w)
    return st, f


def _cross_entropy(rng):
    st = nn.ParamStore()
    z = st.add("cross_entropy.logit", rng.normal(size=6))
    y = rng.integers(0, 2, size=6)
    return st, lambda: nn.total(nn.cross_entropy(nn.sigmoid(z), y))


def _mse(rng):
    st = nn.ParamStore()
    a = st.add("mse.pred", rng.normal(size=(3, 4)))
    y = rng.normal(size=(3, 4))
    return st, lambda: nn.total(nn.mse(a, y))


def _softmax_entropy(rng):
    st = nn.ParamStore()
    z = st.add("softmax.logits", rng.normal(size=(3, 5)))
    w = rng.normal(size=5)

    def f():
        logp = nn.log_softmax(z)
        return nn.total(nn.entropy_of(nn.exp(logp), logp)) + nn.total(nn.softmax(z) * w)
    return st, f


def _tiny_world(rng, fc: FeatureConfig, n_products: int = 2):
    stories = [Story(i, (1 + i,), (4 + i,), tuple(rng.normal(size=fc.dense_story_dim))) for i in range(3)]
    products = [Product(10 + j, (7 + j % 3,)) for j in range(4)]
    return Catalog(stories, products)


def _tiny_episodes(rng, catalog: Catalog, n_eps: int, length: int):
    eps = []
    for e in range(n_eps):
        sessions = []
        for t in range(length):
            prods = [catalog.products[j] for j in rng.choice(len(catalog.products), 2, replace=False)]
            clicked = tuple(int(x) for x in rng.integers(0, 2, size=2))
            fb = Feedback(int(rng.integers(0, 2)), clicked, (0, 0),
                          tuple(p.product_id for p, c in zip(prods, clicked) if c))
            cands = (0, 1, 2)
            shown = catalog.stories[int(rng.integers(0, 3))]
            sessions.append(Session(t, e, Query(tuple(int(x) for x in rng.integers(1, 10, size=2))), shown,
                                    cands, tuple(prods), fb, 1.0 / 3))
        eps.append(Episode(e, tuple(rng.normal(size=2)), tuple(sessions)))
    return eps


def _dynamic_model(rng, weights=(1.0, 1.0, 1.0, 1.0), length: int = 3, n_eps: int = 2):
    fc = FeatureConfig(embedding_dim=3, dense_story_dim=2, vocab_size=12, candidate_pool_size=3)
    catalog = _tiny_world(rng, fc)
    cfg = DynamicModelConfig(features=fc, hidden_dim=3, state_dim=3, core_dim=3,
                             w_T=weights[0], w_D=weights[1], w_P=weights[2], w_Pl=weights[3])
    model = DynamicModel(cfg, catalog, profile_dim=2, seed=int(rng.integers(1 << 31)))
    # nonzero biases so relu/sigmoid operate away from degenerate points
    for name, p in model.store.items():
        if name.endswith(".b") or name.endswith("b_z") or name.endswith("b_r") or name.endswith("b_h"):
            p.data = rng.normal(scale=0.3, size=p.shape)
    batch = pack(_tiny_episodes(rng, catalog, n_eps, length), catalog)
    return model, batch


def _dynamic_term(term: str):
    def build(rng):
        model, batch = _dynamic_model(rng, length=2, n_eps=1)
        return model.store, lambda: model.batch_losses(batch)[term]
    return build


def _dynamic_full(rng):
    model, batch = _dynamic_model(rng, length=3, n_eps=2)
    return model.store, lambda: model.total_loss(model.batch_losses(batch))


def _samples(rng, n=6, k=3, state_dim=4):
    return SampleBatch(rng.normal(size=(n, state_dim)), rng.integers(0, 5, size=(n, k)), rng.integers(0, k, size=n),
                       rng.integers(0, 2, size=n).astype(float), rng.normal(size=(n, state_dim)),
                       rng.random(n) < 0.3, rng.uniform(0.2, 0.5, size=n))


def _actor(rng):
    actor = Actor(4, rng.normal(size=(5, 3)), 4, rng)
    actor.store["a1.b"].data = rng.normal(scale=0.3, size=4)
    return actor


def _critic_loss(rng):
    critic = Critic(4, 4, rng)
    critic.store["v1.b"].data = rng.normal(scale=0.3, size=4)
    batch = _samples(rng)
    # the bootstrap target is a constant to the loss, so it is frozen before differencing
    target = td_target(batch.rewards, critic.values(batch.next_states), 0.7, batch.terminal)
    return critic.store, lambda: critic_loss(critic, batch, 0.7, target)


def _actor_objective(rng):
    actor = _actor(rng)
    batch = _samples(rng)
    adv = rng.normal(size=len(batch))
    return actor.store, lambda: actor_objective(actor, batch, adv, 0.2, 0.01)[0]


def _imitation(rng):
    actor = _actor(rng)
    b = _samples(rng)
    return actor.store, lambda: imitation_loss(actor, b.states, b.candidates, b.actions, 1e-2)


CHECKS: dict[str, Callable] = {
    "dense": _dense,
    "gru_step": _gru,
    "cross_entropy": _cross_entropy,
    "mse": _mse,
    "softmax_entropy": _softmax_entropy,
    "transition_loss": _dynamic_term("L_T"),
    "story_click_loss": _dynamic_term("L_D"),
    "product_click_loss": _dynamic_term("L_P"),
    "product_repr_loss": _dynamic_term("L_Pl"),
    "dynamic_model_bptt": _dynamic_full,
    "critic_loss": _critic_loss,
    "clipped_actor_objective": _actor_objective,
    "imitation_loss": _imitation,
}


def run_checks(n_seeds: int = 50, names=None, max_coords: int | None = 6) -> list[CheckResult]:
    """Run each named check over ``n_seeds`` random instances.

    Setting the environment variable ``DRESS_CORRUPT_GRAD`` to a check name
    perturbs that check's analytic gradient, to exercise the failure path.
    """
    corrupt = os.environ.get(CORRUPT_ENV)
    results = []
    for name in names or CHECKS:
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng([seed, len(name)])
            store, f = CHECKS[name](rng)
            worst = max(worst, check_store(f, store, rng, max_coords, corrupt=corrupt == name))
        results.append(CheckResult(name, worst, n_seeds))
    return results
