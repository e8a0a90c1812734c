"""Ground-truth synthetic search world.

The user carries a latent intent ``z``. Showing story ``d`` moves it linearly,
``z' = A z + B f(d) + sigma * noise``; organic product clicks, orders, story
clicks and the next query are all emitted from ``z'``. Because the story acts
on ``z`` and ``z`` persists, a story can trade immediate clicks for later ones,
which is the cross-channel, long-horizon structure the learners must find.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import tomli
import tomli_w

from .data import Catalog, Dataset, Episode, Feedback, Product, Query, Session, Story
from .errors import ConfigError, ContractError, DataError

MAX_EXACT_BRANCHES = 10**6
SCENARIOS = ("myopic-trap", "neutral", "noisy")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class EnvParams:
    name: str
    seed: int
    A: np.ndarray                 # (L, L) intent drift
    B: np.ndarray                 # (L, F) story influence
    w_click: np.ndarray           # (L,)
    b_click: float
    w_order: np.ndarray           # (L,)
    b_order: float
    w_story: np.ndarray           # (F,) story-click appeal
    b_story: float
    query_map: np.ndarray         # (n_query_tokens, L) logits of query tokens given z
    query_token_offset: int
    query_length: int
    sigma: float
    stories: tuple
    products: tuple
    product_latent: np.ndarray    # (P, L)
    profile_map: np.ndarray       # (profile_dim, L)
    profile_noise: float
    z0_mean: np.ndarray
    z0_scale: float
    vocab_size: int
    candidate_pool_size: int
    n_products: int
    logging_weights: np.ndarray   # (F,) default logging-policy scores
    logging_temperature: float = 0.5
    story_features: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        L = self.A.shape[0]
        if self.A.shape != (L, L):
            raise ContractError("A must be square")
        if spectral_radius(self.A) >= 1.0:
            raise ContractError(f"intent drift A must have spectral radius < 1, got {spectral_radius(self.A):.4f}")
        if self.sigma < 0:
            raise ContractError("process noise sigma must be >= 0")
        self.story_features = np.array([s.dense_features for s in self.stories], dtype=np.float64)
        F = self.story_features.shape[1]
        if self.B.shape != (L, F):
            raise ContractError(f"B must be {L}x{F}, got {self.B.shape}")
        if self.product_latent.shape != (len(self.products), L):
            raise ContractError("product_latent must have one row per product")
        if not 1 <= self.candidate_pool_size <= len(self.stories):
            raise ContractError("candidate pool size must be in [1, n_stories]")
        if not 1 <= self.n_products <= len(self.products):
            raise ContractError("n_products must be in [1, n_product_catalog]")

    @property
    def latent_dim(self) -> int:
        return self.A.shape[0]

    @property
    def dense_dim(self) -> int:
        return self.story_features.shape[1]

    @property
    def profile_dim(self) -> int:
        return self.profile_map.shape[0]

    @property
    def catalog(self) -> Catalog:
        return Catalog(tuple(self.stories), tuple(self.products))

    # --- vectorized pieces of the world model -------------------------------

    def drift(self, z: np.ndarray, story_idx: np.ndarray) -> np.ndarray:
        return z @ self.A.T + self.story_features[story_idx] @ self.B.T

    def click_probs(self, z: np.ndarray, product_idx: np.ndarray) -> np.ndarray:
        v = self.product_latent[product_idx]                       # (..., n, L)
        return _sigmoid(self.b_click + np.einsum("...l,...nl->...n", z * self.w_click, v))

    def order_probs(self, z: np.ndarray, product_idx: np.ndarray) -> np.ndarray:
        v = self.product_latent[product_idx]
        return _sigmoid(self.b_order + np.einsum("...l,...nl->...n", z * self.w_order, v))

    def story_click_probs(self, story_idx: np.ndarray) -> np.ndarray:
        return _sigmoid(self.b_story + self.story_features[story_idx] @ self.w_story)

    def query_probs(self, z: np.ndarray) -> np.ndarray:
        return _softmax(z @ self.query_map.T)

    def expected_reward(self, z_next: np.ndarray, product_idx: np.ndarray, field: str = "click") -> np.ndarray:
        """P(any click) (or P(any order)) over the impressed products, in closed form."""
        p = self.click_probs(z_next, product_idx)
        if field == "order":
            p = p * self.order_probs(z_next, product_idx)
        elif field != "click":
            raise ContractError(f"unknown reward field {field!r}")
        return 1.0 - np.prod(1.0 - p, axis=-1)


def spectral_radius(A: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(A)).max())


@dataclass
class EnvState:
    z: np.ndarray
    t: int
    rng: np.random.Generator

    def __post_init__(self):
        if not np.isfinite(self.z).all():
            raise ContractError("EnvState latent must be finite")


def initial_state(env: EnvParams, user_id: int, seed: int) -> tuple[EnvState, np.ndarray]:
    """Latent intent and observed profile of a user, from its own RNG stream."""
    rng = np.random.default_rng([seed, user_id])
    z0 = env.z0_mean + env.z0_scale * rng.standard_normal(env.latent_dim)
    profile = env.profile_map @ z0 + env.profile_noise * rng.standard_normal(env.profile_dim)
    return EnvState(z0, 0, rng), profile


def emit_query(env: EnvParams, z: np.ndarray, rng: np.random.Generator) -> Query:
    p = env.query_probs(z[None])[0]
    toks = rng.choice(len(p), size=env.query_length, p=p) + env.query_token_offset
    return Query(tuple(int(x) for x in toks))


def env_step(env: EnvParams, state: EnvState, candidates, action: int,
             products=None) -> tuple[Feedback, Query, EnvState]:
    """Apply the story ``candidates[action]`` and sample the session's feedback.

    ``candidates`` are story catalog indices; ``products`` are product catalog
    indices (sampled from the state's RNG when omitted).
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if not 0 <= action < len(candidates):
        raise ContractError(f"action {action} out of range for {len(candidates)} candidates")
    rng = state.rng
    story = candidates[action]
    z_next = env.drift(state.z[None], np.array([story]))[0]
    if env.sigma > 0:
        z_next = z_next + env.sigma * rng.standard_normal(env.latent_dim)
    if products is None:
        products = rng.choice(len(env.products), size=env.n_products, replace=False)
    products = np.asarray(products, dtype=np.int64)
    p_click = env.click_probs(z_next[None], products[None])[0]
    p_order = env.order_probs(z_next[None], products[None])[0]
    clicked = (rng.random(len(products)) < p_click).astype(int)
    ordered = clicked * (rng.random(len(products)) < p_order).astype(int)
    story_clicked = int(rng.random() < env.story_click_probs(np.array([story]))[0])
    engaged = tuple(env.products[j].product_id for j, c in zip(products, clicked) if c)
    feedback = Feedback(story_clicked, tuple(int(c) for c in clicked), tuple(int(o) for o in ordered), engaged)
    next_query = emit_query(env, z_next, rng)
    return feedback, next_query, EnvState(z_next, state.t + 1, rng)


# ---------------------------------------------------------------------------
# policies acting on the true latent state


class EnvPolicy(Protocol):
    def probs(self, env: EnvParams, z: np.ndarray, t: int, candidates: np.ndarray) -> np.ndarray:
        """(N, L) latents, (N, K) story indices -> (N, K) action probabilities."""


@dataclass
class LoggingPolicy:
    """Softmax over linear story scores; never looks at the user state."""

    weights: np.ndarray
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("logging temperature must be positive")
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @classmethod
    def for_env(cls, env: EnvParams, temperature: float | None = None) -> "LoggingPolicy":
        return cls(env.logging_weights.copy(), env.logging_temperature if temperature is None else temperature)

    def scores(self, env: EnvParams, candidates: np.ndarray) -> np.ndarray:
        return env.story_features[candidates] @ self.weights

    def probs(self, env, z, t, candidates):
        return _softmax(self.scores(env, candidates) / self.temperature)


@dataclass
class UniformPolicy:
    def probs(self, env, z, t, candidates):
        return np.full(candidates.shape, 1.0 / candidates.shape[-1])


@dataclass
class ConstantPolicy:
    """Always show one story; it must be in every candidate pool."""

    story: int

    def probs(self, env, z, t, candidates):
        hit = (candidates == self.story).astype(np.float64)
        if not hit.any(axis=-1).all():
            raise ContractError(f"constant policy story {self.story} missing from a candidate pool")
        return hit / hit.sum(axis=-1, keepdims=True)


@dataclass
class GreedyImmediatePolicy:
    """Pick the candidate with the highest expected immediate reward (ties: lowest index)."""

    products: np.ndarray | None = None

    def probs(self, env, z, t, candidates):
        prods = np.arange(len(env.products)) if self.products is None else np.asarray(self.products)
        N, K = candidates.shape
        z_next = env.drift(np.repeat(z, K, axis=0), candidates.reshape(-1))
        if self.products is None:
            value = env.click_probs(z_next, np.broadcast_to(prods, (N * K, len(prods)))).mean(axis=-1)
        else:
            value = env.expected_reward(z_next, np.broadcast_to(prods, (N * K, len(prods))))
        best = value.reshape(N, K).argmax(axis=-1)
        out = np.zeros((N, K))
        out[np.arange(N), best] = 1.0
        return out


# ---------------------------------------------------------------------------
# oracle


@dataclass
class OracleResult:
    value: float
    stderr: float
    mode: str
    n_branches: int = 0


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    u = rng.random((probs.shape[0], 1))
    idx = (np.cumsum(probs, axis=-1) < u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _sample_subsets(rng: np.random.Generator, n_rows: int, pool: int, k: int) -> np.ndarray:
    return np.argsort(rng.random((n_rows, pool)), axis=-1)[:, :k]


def oracle_policy_value(env: EnvParams, policy, start_z, horizon: int, gamma: float,
                        candidates=None, products=None, mode: str = "exact",
                        n_rollouts: int = 100_000, seed: int = 0, reward: str = "click",
                        start_t: int = 0, max_branches: int = MAX_EXACT_BRANCHES) -> OracleResult:
    """Expected discounted return sum_{tau<H} gamma^tau r_tau of ``policy`` from ``start_z``.

    Exact mode enumerates every action sequence with positive probability and
    sums click outcomes in closed form; it needs sigma == 0, a fixed candidate
    pool and fixed product impressions. Monte Carlo mode samples everything and
    reports the standard error; pools/products are resampled each step when
    not given.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    if not 0.0 <= gamma <= 1.0:
        raise ContractError("gamma must be in [0, 1]")
    z0 = np.asarray(start_z, dtype=np.float64).reshape(1, -1)
    disc = gamma ** np.arange(horizon)
    if mode == "exact":
        if env.sigma > 0:
            raise ContractError("exact oracle needs sigma == 0; use mode='mc'")
        if candidates is None or products is None:
            raise ContractError("exact oracle needs a fixed candidate pool and fixed products")
        cand = np.asarray(candidates, dtype=np.int64)
        prods = np.asarray(products, dtype=np.int64)
        zs, w, value, K = z0, np.ones(1), 0.0, len(cand)
        for tau in range(horizon):
            P = policy.probs(env, zs, start_t + tau, np.broadcast_to(cand, (len(zs), K)))
            rows, acts = np.nonzero(P > 0)
            if len(rows) > max_branches:
                raise ContractError(f"exact oracle branch guard exceeded ({len(rows)} > {max_branches})")
            zs = env.drift(zs[rows], cand[acts])
            w = w[rows] * P[rows, acts]
            er = env.expected_reward(zs, np.broadcast_to(prods, (len(zs), len(prods))), reward)
            value += disc[tau] * float(w @ er)
        return OracleResult(value, 0.0, "exact", len(w))
    if mode != "mc":
        raise ContractError(f"unknown oracle mode {mode!r}")
    rng = np.random.default_rng(seed)
    N = n_rollouts
    z = np.repeat(z0, N, axis=0)
    ret = np.zeros(N)
    for tau in range(horizon):
        cand = (np.broadcast_to(np.asarray(candidates, dtype=np.int64), (N, len(candidates)))
                if candidates is not None else
                _sample_subsets(rng, N, len(env.stories), env.candidate_pool_size))
        a = _sample_categorical(rng, policy.probs(env, z, start_t + tau, cand))
        z = env.drift(z, cand[np.arange(N), a])
        if env.sigma > 0:
            z = z + env.sigma * rng.standard_normal(z.shape)
        prods = (np.broadcast_to(np.asarray(products, dtype=np.int64), (N, len(products)))
                 if products is not None else
                 _sample_subsets(rng, N, len(env.products), env.n_products))
        p = env.click_probs(z, prods)
        clicked = rng.random(p.shape) < p
        if reward == "order":
            clicked &= rng.random(p.shape) < env.order_probs(z, prods)
        ret += disc[tau] * clicked.any(axis=-1)
    return OracleResult(float(ret.mean()), float(ret.std(ddof=1) / math.sqrt(N)), "mc")


# ---------------------------------------------------------------------------
# agents acting on observations (learned policies), Monte Carlo only


class Agent(Protocol):
    def reset(self, profiles: np.ndarray) -> None: ...

    def probs(self, query_tokens: np.ndarray, candidates: np.ndarray) -> np.ndarray: ...

    def observe(self, query_tokens, story_idx, product_idx, clicked, ordered, story_clicked) -> None: ...


def rollout_agent(env: EnvParams, agent: Agent, z0: np.ndarray, profiles: np.ndarray, horizon: int,
                  gamma: float, seed: int, reward: str = "click") -> np.ndarray:
    """Discounted returns of ``agent`` from each start latent (one rollout per row)."""
    rng = np.random.default_rng(seed)
    z = np.array(z0, dtype=np.float64)
    N = len(z)
    agent.reset(np.asarray(profiles, dtype=np.float64))
    q = _sample_queries(env, z, rng)
    ret = np.zeros(N)
    for tau in range(horizon):
        cand = _sample_subsets(rng, N, len(env.stories), env.candidate_pool_size)
        probs = agent.probs(q, cand)
        a = _sample_categorical(rng, probs)
        story = cand[np.arange(N), a]
        z = env.drift(z, story)
        if env.sigma > 0:
            z = z + env.sigma * rng.standard_normal(z.shape)
        prods = _sample_subsets(rng, N, len(env.products), env.n_products)
        clicked = rng.random(prods.shape) < env.click_probs(z, prods)
        ordered = clicked & (rng.random(prods.shape) < env.order_probs(z, prods))
        story_clicked = rng.random(N) < env.story_click_probs(story)
        r = ordered if reward == "order" else clicked
        ret += gamma ** tau * r.any(axis=-1)
        agent.observe(q, story, prods, clicked, ordered, story_clicked)
        q = _sample_queries(env, z, rng)
    return ret


def _sample_queries(env: EnvParams, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = env.query_probs(z)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random((len(z), env.query_length, 1))
    toks = np.minimum((cdf[:, None, :] < u).sum(axis=-1), p.shape[-1] - 1)
    return toks + env.query_token_offset


def window_click_rate(env: EnvParams, prefix_policy, window_policy, horizon: int,
                      length_sampler: Callable, n_episodes: int, seed: int,
                      reward: str = "click") -> tuple[float, float]:
    """Click rate over each episode's last ``horizon + 1`` sessions.

    Sessions before the window follow ``prefix_policy``; window sessions follow
    ``window_policy``. This is the quantity a truncated importance-sampling
    estimate targets when the logs come from ``prefix_policy``. Returns the
    ratio estimate and its delta-method standard error.
    """
    rng = np.random.default_rng(seed)
    lengths = np.array([length_sampler(rng) for _ in range(n_episodes)])
    T = int(lengths.max())
    z = env.z0_mean + env.z0_scale * rng.standard_normal((n_episodes, env.latent_dim))
    num = np.zeros(n_episodes)
    den = np.minimum(lengths, horizon + 1).astype(np.float64)
    start_window = lengths - den
    for t in range(T):
        alive = t < lengths
        in_window = alive & (t >= start_window)
        cand = _sample_subsets(rng, n_episodes, len(env.stories), env.candidate_pool_size)
        p_prefix = prefix_policy.probs(env, z, t, cand)
        p_window = window_policy.probs(env, z, t, cand)
        probs = np.where(in_window[:, None], p_window, p_prefix)
        a = _sample_categorical(rng, probs)
        z = env.drift(z, cand[np.arange(n_episodes), a])
        if env.sigma > 0:
            z = z + env.sigma * rng.standard_normal(z.shape)
        prods = _sample_subsets(rng, n_episodes, len(env.products), env.n_products)
        p = env.click_probs(z, prods)
        hit = rng.random(p.shape) < p
        if reward == "order":
            hit &= rng.random(p.shape) < env.order_probs(z, prods)
        num += in_window * hit.any(axis=-1)
    rate = num.sum() / den.sum()
    resid = num - rate * den
    se = math.sqrt((resid ** 2).sum()) / den.sum()
    return float(rate), float(se)


# ---------------------------------------------------------------------------
# logged data


@dataclass(frozen=True)
class PowerLawLengths:
    """Discrete truncated power law P(n) ~ n^-alpha on [lo, hi]."""

    alpha: float = 2.0
    lo: int = 11
    hi: int = 200

    def __post_init__(self):
        if not 1 <= self.lo <= self.hi:
            raise ContractError("degenerate length sampler: need 1 <= lo <= hi")

    def __call__(self, rng: np.random.Generator) -> int:
        n = np.arange(self.lo, self.hi + 1)
        p = n ** -self.alpha
        return int(rng.choice(n, p=p / p.sum()))


def generate_episode(env: EnvParams, policy, user_id: int, length: int, rng: np.random.Generator,
                     z0: np.ndarray, profile: np.ndarray) -> Episode:
    state = EnvState(np.array(z0, dtype=np.float64), 0, rng)
    query = emit_query(env, state.z, rng)
    clock = int(rng.integers(0, 86_400))
    sessions = []
    K = env.candidate_pool_size
    for _ in range(length):
        cand = rng.choice(len(env.stories), size=K, replace=False)
        probs = policy.probs(env, state.z[None], state.t, cand[None])[0]
        a = int(_sample_categorical(rng, probs[None])[0])
        products = rng.choice(len(env.products), size=env.n_products, replace=False)
        feedback, next_query, state = env_step(env, state, cand, a, products)
        sessions.append(Session(
            t=clock, user_id=user_id, query=query, story_shown=env.stories[cand[a]],
            candidates=tuple(env.stories[i].story_id for i in cand),
            impressed_products=tuple(env.products[j] for j in products),
            feedback=feedback, logged_propensity=float(probs[a])))
        query = next_query
        clock += 1 + int(rng.integers(0, 3_600))
    return Episode(user_id, tuple(float(x) for x in profile), tuple(sessions))


def gen_logged_dataset(env: EnvParams, policy, n_users: int, length_sampler: Callable | None = None,
                       seed: int = 0, min_len: int = 11, max_len: int = 200,
                       first_user_id: int = 0) -> Dataset:
    """Log ``n_users`` episodes under ``policy``; each user owns the RNG stream (seed, user_id)."""
    if n_users < 1:
        raise ContractError("gen_logged_dataset needs n_users >= 1")
    length_sampler = length_sampler or PowerLawLengths(lo=min_len, hi=max_len)
    episodes = []
    for user_id in range(first_user_id, first_user_id + n_users):
        state, profile = initial_state(env, user_id, seed)
        rng = state.rng
        for _ in range(1000):
            length = int(length_sampler(rng))
            if min_len <= length <= max_len:
                break
        else:
            raise DataError(f"degenerate sampler: no episode length in [{min_len}, {max_len}] after 1000 draws")
        episodes.append(generate_episode(env, policy, user_id, length, rng, state.z, profile))
    return Dataset(episodes, env.catalog)


def user_start(env: EnvParams, user_ids, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """True starting latents and profiles of logged users (re-derived from their RNG streams)."""
    pairs = [initial_state(env, u, seed) for u in user_ids]
    return np.array([s.z for s, _ in pairs]), np.array([p for _, p in pairs])


# ---------------------------------------------------------------------------
# scenarios

N_TYPES = 3
BAIT, GUIDE, NEUTRAL = 0, 1, 2


def _build_world(name: str, seed: int, dense_dim: int = 13, stories_per_type: int = 8,
                 n_products: int = 40, latent_dim: int = 3, candidate_pool_size: int = 10,
                 impressions: int = 3) -> dict:
    if dense_dim < N_TYPES + 1:
        raise ConfigError(f"scenario worlds need dense_dim >= {N_TYPES + 1}")
    rng = np.random.default_rng([seed, 7919])
    n_query, per_type_tokens, n_prod_tokens = 30, 10, 24
    q_off = 1
    s_off = q_off + n_query
    p_off = s_off + N_TYPES * per_type_tokens
    vocab = p_off + n_prod_tokens

    product_latent = np.column_stack([
        1.0 + 0.3 * rng.standard_normal(n_products),
        1.0 + 0.3 * rng.standard_normal(n_products),
        rng.standard_normal(n_products),
    ])[:, :latent_dim]
    if latent_dim > 3:
        product_latent = np.column_stack([product_latent, rng.standard_normal((n_products, latent_dim - 3))])
    products = []
    for j in range(n_products):
        v = product_latent[j]
        b0 = int(np.clip((v[0] - 0.4) / 0.3, 0, 3))
        b1 = int(np.clip((v[1] - 0.4) / 0.3, 0, 3))
        toks = (p_off + b0, p_off + 4 + b1, p_off + 8 + int(rng.integers(0, n_prod_tokens - 8)))
        products.append(Product(1000 + j, toks))

    stories = []
    for d in range(N_TYPES * stories_per_type):
        kind = d % N_TYPES
        dense = np.zeros(dense_dim)
        dense[kind] = 1.0
        dense[N_TYPES:] = 0.5 * rng.standard_normal(dense_dim - N_TYPES)
        title = tuple(int(x) for x in s_off + kind * per_type_tokens + rng.choice(per_type_tokens, 3, replace=False))
        ptitle = tuple(int(x) for x in p_off + rng.choice(n_prod_tokens, 3, replace=False))
        stories.append(Story(d, title, ptitle, tuple(float(x) for x in dense)))

    logging_weights = np.zeros(dense_dim)
    logging_weights[[BAIT, GUIDE, NEUTRAL]] = (0.5, 0.0, 1.0)
    logging_weights[N_TYPES:] = 0.3 * rng.standard_normal(dense_dim - N_TYPES)
    w_story = np.zeros(dense_dim)
    w_story[[BAIT, GUIDE, NEUTRAL]] = (0.0, -1.0, 1.0)

    return dict(
        name=name, seed=seed,
        A=np.diag([0.2, 0.85, 0.5, *([0.5] * (latent_dim - 3))][:latent_dim]),
        B=np.zeros((latent_dim, dense_dim)),
        w_click=np.array([1.0, 1.0, 0.0, *([0.0] * (latent_dim - 3))][:latent_dim]),
        b_click=-2.2,
        w_order=np.array([0.0, 1.0, 0.0, *([0.0] * (latent_dim - 3))][:latent_dim]),
        b_order=-1.0,
        w_story=w_story, b_story=-0.5,
        query_map=1.5 * rng.standard_normal((n_query, latent_dim)),
        query_token_offset=q_off, query_length=3, sigma=0.0,
        stories=tuple(stories), products=tuple(products), product_latent=product_latent,
        profile_map=rng.standard_normal((4, latent_dim)), profile_noise=0.1,
        z0_mean=np.zeros(latent_dim), z0_scale=0.5, vocab_size=vocab,
        candidate_pool_size=candidate_pool_size, n_products=impressions,
        logging_weights=logging_weights, logging_temperature=0.5,
    )


def _trap_B(latent_dim: int, dense_dim: int, rng: np.random.Generator) -> np.ndarray:
    B = np.zeros((latent_dim, dense_dim))
    B[:3, BAIT] = (1.2, -0.8, 0.0)
    B[:3, GUIDE] = (-1.0, 1.0, 0.0)
    B[:3, NEUTRAL] = (0.0, 0.0, 0.4)
    B[:, N_TYPES:] = 0.05 * rng.standard_normal((latent_dim, dense_dim - N_TYPES))
    return B


def trap_check(env: EnvParams, horizon: int = 15, gamma: float = 0.7) -> dict:
    """Exact oracle values of the greedy-immediate and every constant policy from the mean user."""
    noiseless = replace(env, sigma=0.0)
    cand = np.arange(len(env.stories))
    prods = np.arange(env.n_products)
    greedy = oracle_policy_value(noiseless, GreedyImmediatePolicy(prods), env.z0_mean, horizon, gamma,
                                 cand, prods).value
    constant = [oracle_policy_value(noiseless, ConstantPolicy(d), env.z0_mean, horizon, gamma, cand, prods).value
                for d in cand]
    best = int(np.argmax(constant))
    return {"greedy": greedy, "best_constant": constant[best], "best_story": best,
            "gap": (constant[best] - greedy) / constant[best]}


def make_scenarios(name: str, seed: int = 0, **overrides) -> EnvParams:
    """Build one of the named worlds: ``myopic-trap``, ``neutral`` or ``noisy``."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    world_keys = {"dense_dim", "stories_per_type", "n_products", "latent_dim", "candidate_pool_size", "impressions"}
    world = _build_world(name, seed, **{k: v for k, v in overrides.items() if k in world_keys})
    rng = np.random.default_rng([seed, 104729])
    L, F = world["A"].shape[0], len(world["logging_weights"])
    if name in ("myopic-trap", "noisy"):
        world["B"] = _trap_B(L, F, rng)
    if name == "noisy":
        world["sigma"] = 1.0
    world.update({k: v for k, v in overrides.items() if k not in world_keys})
    env = EnvParams(**world)
    if name == "myopic-trap":
        check = trap_check(env)
        if not check["gap"] > 0.05:
            raise ConfigError(f"myopic-trap construction failed the oracle check: {check}")
    return env


# ---------------------------------------------------------------------------
# scenario files (TOML)


def save_env_params(env: EnvParams, path) -> None:
    doc = {
        "name": env.name, "seed": env.seed, "sigma": env.sigma,
        "b_click": env.b_click, "b_order": env.b_order, "b_story": env.b_story,
        "query_token_offset": env.query_token_offset, "query_length": env.query_length,
        "profile_noise": env.profile_noise, "z0_scale": env.z0_scale, "vocab_size": env.vocab_size,
        "candidate_pool_size": env.candidate_pool_size, "n_products": env.n_products,
        "logging_temperature": env.logging_temperature,
        "matrices": {k: np.asarray(getattr(env, k)).tolist() for k in
                     ("A", "B", "w_click", "w_order", "w_story", "query_map", "product_latent",
                      "profile_map", "z0_mean", "logging_weights")},
        "stories": [{"story_id": s.story_id, "title_tokens": list(s.title_token_ids),
                     "product_title_tokens": list(s.product_title_token_ids), "dense": list(s.dense_features)}
                    for s in env.stories],
        "products": [{"product_id": p.product_id, "title_tokens": list(p.title_token_ids)} for p in env.products],
    }
    Path(path).write_text(tomli_w.dumps(doc), encoding="utf-8")


def load_env_params(path) -> EnvParams:
    doc = tomli.loads(Path(path).read_text(encoding="utf-8"))
    mats = {k: np.asarray(v, dtype=np.float64) for k, v in doc.pop("matrices").items()}
    stories = tuple(Story(int(s["story_id"]), tuple(s["title_tokens"]), tuple(s["product_title_tokens"]),
                          tuple(float(x) for x in s["dense"])) for s in doc.pop("stories"))
    products = tuple(Product(int(p["product_id"]), tuple(p["title_tokens"])) for p in doc.pop("products"))
    return EnvParams(stories=stories, products=products, **mats, **doc)
