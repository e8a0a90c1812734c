"""Logged search sessions: record types, featurization and the JSONL file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import nn
from .errors import ContractError, DataError

PAD_TOKEN = 0


@dataclass(frozen=True)
class FeatureConfig:
    embedding_dim: int = 200
    dense_story_dim: int = 13
    vocab_size: int = 1000
    candidate_pool_size: int = 20

    def __post_init__(self):
        for name in ("embedding_dim", "dense_story_dim", "vocab_size", "candidate_pool_size"):
            if getattr(self, name) <= 0:
                raise ContractError(f"FeatureConfig.{name} must be positive")

    @property
    def story_dim(self) -> int:
        return 2 * self.embedding_dim + self.dense_story_dim

    @property
    def feedback_dim(self) -> int:
        return 4 + self.embedding_dim

    @property
    def session_input_dim(self) -> int:
        return self.story_dim + self.embedding_dim + self.feedback_dim


@dataclass(frozen=True)
class Query:
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.token_ids:
            raise DataError("query has no tokens (use the padding token 0)")


@dataclass(frozen=True)
class Story:
    story_id: int
    title_token_ids: tuple[int, ...]
    product_title_token_ids: tuple[int, ...]
    dense_features: tuple[float, ...]


@dataclass(frozen=True)
class Product:
    product_id: int
    title_token_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.title_token_ids:
            raise DataError(f"product {self.product_id} has no title tokens")


@dataclass(frozen=True)
class Feedback:
    story_clicked: int
    product_clicked: tuple[int, ...]
    product_ordered: tuple[int, ...]
    engaged_product_ids: tuple[int, ...] = ()

    @property
    def reward(self) -> int:
        return int(any(self.product_clicked))

    @property
    def ordered(self) -> int:
        return int(any(self.product_ordered))


@dataclass(frozen=True)
class Session:
    t: int
    user_id: int
    query: Query
    story_shown: Story
    candidates: tuple[int, ...]
    impressed_products: tuple[Product, ...]
    feedback: Feedback
    logged_propensity: float | None = None

    @property
    def reward(self) -> int:
        return self.feedback.reward

    @property
    def action(self) -> int:
        """Index of the shown story inside the candidate pool."""
        return self.candidates.index(self.story_shown.story_id)


@dataclass(frozen=True)
class Episode:
    user_id: int
    user_profile: tuple[float, ...]
    sessions: tuple[Session, ...]

    def __len__(self) -> int:
        return len(self.sessions)


@dataclass(frozen=True)
class Catalog:
    """Story and product inventories referenced by id from session records."""

    stories: tuple[Story, ...]
    products: tuple[Product, ...] = ()
    story_index: dict = field(default=None, compare=False, repr=False)
    product_index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "story_index", {s.story_id: i for i, s in enumerate(self.stories)})
        object.__setattr__(self, "product_index", {p.product_id: i for i, p in enumerate(self.products)})

    def story(self, story_id: int) -> Story:
        return self.stories[self.story_index[story_id]]


class Dataset(Sequence):
    """A list of episodes plus the catalog their ids refer to."""

    def __init__(self, episodes: Sequence[Episode], catalog: Catalog | None = None):
        self.episodes = list(episodes)
        self.catalog = catalog

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.episodes[i], self.catalog)
        return self.episodes[i]

    def __len__(self) -> int:
        return len(self.episodes)

    def __eq__(self, other) -> bool:
        if isinstance(other, Dataset):
            return self.episodes == other.episodes and self.catalog == other.catalog
        return self.episodes == list(other)

    def subset(self, episodes: Sequence[Episode]) -> "Dataset":
        return Dataset(episodes, self.catalog)

    @property
    def n_sessions(self) -> int:
        return sum(len(e) for e in self.episodes)


# ---------------------------------------------------------------------------
# validation


def validate_session(s: Session, dense_dim: int | None = None) -> None:
    fb = s.feedback
    n = len(s.impressed_products)
    if len(fb.product_clicked) != n or len(fb.product_ordered) != n:
        raise DataError(f"session t={s.t}: feedback flags do not match {n} impressed products")
    flags = set(fb.product_clicked) | set(fb.product_ordered) | {fb.story_clicked}
    if not flags <= {0, 1}:
        raise DataError(f"session t={s.t}: feedback flags must be binary")
    for c, o in zip(fb.product_clicked, fb.product_ordered):
        if o and not c:
            raise DataError(f"session t={s.t}: product ordered without a click")
    clicked = {p.product_id for p, c in zip(s.impressed_products, fb.product_clicked) if c}
    if set(fb.engaged_product_ids) != clicked:
        raise DataError(f"session t={s.t}: engaged products {fb.engaged_product_ids} differ from clicked {sorted(clicked)}")
    if s.story_shown.story_id not in s.candidates:
        raise DataError(f"session t={s.t}: shown story {s.story_shown.story_id} is not a candidate")
    if s.logged_propensity is not None and not 0.0 < s.logged_propensity <= 1.0:
        raise DataError(f"session t={s.t}: propensity {s.logged_propensity} outside (0, 1]")
    if dense_dim is not None and len(s.story_shown.dense_features) != dense_dim:
        raise DataError(f"session t={s.t}: story has {len(s.story_shown.dense_features)} dense features, expected {dense_dim}")


def validate_episode(e: Episode, min_len: int = 1, max_len: int | None = None) -> None:
    n = len(e.sessions)
    if n < min_len or (max_len is not None and n > max_len):
        raise DataError(f"episode of user {e.user_id}: length {n} outside [{min_len}, {max_len}]")
    for prev, cur in zip(e.sessions, e.sessions[1:]):
        if cur.t <= prev.t:
            raise DataError(f"episode of user {e.user_id}: timestamps not strictly increasing ({prev.t} -> {cur.t})")
    for s in e.sessions:
        if s.user_id != e.user_id:
            raise DataError(f"episode of user {e.user_id}: session belongs to user {s.user_id}")
        try:
            validate_session(s)
        except DataError as exc:
            raise DataError(f"episode of user {e.user_id}: {exc}") from None


# ---------------------------------------------------------------------------
# featurization (single records; the batched path lives in dynamics.py)


def _padded(token_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Pad token lists into an id matrix and a row-normalized weight matrix."""
    width = max(1, max((len(t) for t in token_lists), default=1))
    ids = np.zeros((len(token_lists), width), dtype=np.int64)
    w = np.zeros((len(token_lists), width))
    for i, toks in enumerate(token_lists):
        if not toks:
            raise ContractError("cannot aggregate an empty token list (use the padding token 0)")
        ids[i, :len(toks)] = toks
        w[i, :len(toks)] = 1.0 / len(toks)
    return ids, w


def embed_aggregate(token_ids: Sequence[int], table) -> nn.Tensor:
    """Mean of the embedding rows of ``token_ids``."""
    token_ids = list(token_ids)
    if not token_ids:
        raise ContractError("embed_aggregate needs at least one token id (use the padding token 0)")
    table = nn.as_tensor(table)
    if max(token_ids) >= table.shape[0] or min(token_ids) < 0:
        raise ContractError(f"token id out of range for vocabulary of size {table.shape[0]}")
    ids, w = _padded([token_ids])
    return nn.weighted_rows(table, ids, w)[0]


def featurize_query(query: Query, table) -> nn.Tensor:
    return embed_aggregate(query.token_ids, table)


def featurize_product(product: Product, table) -> nn.Tensor:
    return embed_aggregate(product.title_token_ids, table)


def featurize_story(story: Story, table, cfg: FeatureConfig) -> nn.Tensor:
    """[title embedding | embedded-product-title embedding | dense features]."""
    if len(story.dense_features) != cfg.dense_story_dim:
        raise ContractError(
            f"story {story.story_id} has {len(story.dense_features)} dense features, expected {cfg.dense_story_dim}")
    title = embed_aggregate(story.title_token_ids or (PAD_TOKEN,), table)
    ptitle = embed_aggregate(story.product_title_token_ids or (PAD_TOKEN,), table)
    return nn.concat([title, ptitle, nn.Tensor(story.dense_features)])


def featurize_feedback(feedback: Feedback, products: Sequence[Product], table,
                       cfg: FeatureConfig) -> nn.Tensor:
    """[story one-hot (2) | product-engagement one-hot (2) | mean engaged-product embedding]."""
    table = nn.as_tensor(table)
    sc, pc = feedback.story_clicked, feedback.reward
    onehots = nn.Tensor([1.0 - sc, float(sc), 1.0 - pc, float(pc)])
    engaged = [p for p in products if p.product_id in set(feedback.engaged_product_ids)]
    if engaged:
        ids, w = _padded([p.title_token_ids for p in engaged])
        emb = nn.mean(nn.weighted_rows(table, ids, w), axis=0)
    else:
        emb = nn.Tensor(np.zeros(cfg.embedding_dim))
    return nn.concat([onehots, emb])


# ---------------------------------------------------------------------------
# file format


def _story_json(s: Story) -> dict:
    return {"story_id": s.story_id, "title_tokens": list(s.title_token_ids),
            "product_title_tokens": list(s.product_title_token_ids), "dense": list(s.dense_features)}


def _product_json(p: Product) -> dict:
    return {"product_id": p.product_id, "title_tokens": list(p.title_token_ids)}


def _story_from(d: dict) -> Story:
    return Story(int(d["story_id"]), tuple(d["title_tokens"]), tuple(d["product_title_tokens"]),
                 tuple(float(x) for x in d["dense"]))


def _product_from(d: dict) -> Product:
    return Product(int(d["product_id"]), tuple(d["title_tokens"]))


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def save_dataset(episodes, path) -> None:
    """Write episodes (and the catalog, if any) as UTF-8 line-delimited JSON."""
    catalog = getattr(episodes, "catalog", None)
    lines = []
    if catalog is not None:
        lines.append(_dump({"catalog": {"stories": [_story_json(s) for s in catalog.stories],
                                        "products": [_product_json(p) for p in catalog.products]}}))
    for e in episodes:
        lines.append(_dump({"user_id": e.user_id, "profile": list(e.user_profile), "n_sessions": len(e)}))
        for s in e.sessions:
            fb = s.feedback
            lines.append(_dump({
                "t": s.t,
                "query_tokens": list(s.query.token_ids),
                "story": _story_json(s.story_shown),
                "candidates": list(s.candidates),
                "products": [_product_json(p) for p in s.impressed_products],
                "feedback": {"story_clicked": fb.story_clicked, "product_clicked": list(fb.product_clicked),
                             "product_ordered": list(fb.product_ordered),
                             "engaged_product_ids": list(fb.engaged_product_ids), "reward": fb.reward},
                "propensity": s.logged_propensity,
            }))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _iter_records(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def load_dataset(path, min_len: int = 1, max_len: int | None = None) -> Dataset:
    """Parse a JSONL log; every invariant is checked and violations name the episode."""
    catalog = None
    episodes: list[Episode] = []
    header, sessions, header_line = None, [], 0

    def close():
        if header is None:
            return
        if len(sessions) != header["n_sessions"]:
            raise DataError(f"{path}:{header_line}: episode of user {header['user_id']} declares "
                            f"{header['n_sessions']} sessions but has {len(sessions)}")
        ep = Episode(int(header["user_id"]), tuple(float(x) for x in header["profile"]), tuple(sessions))
        validate_episode(ep, min_len, max_len)
        episodes.append(ep)

    for lineno, rec in _iter_records(path):
        try:
            if "catalog" in rec:
                if episodes or header is not None:
                    raise DataError("catalog record must precede all episodes")
                catalog = Catalog(tuple(_story_from(s) for s in rec["catalog"]["stories"]),
                                  tuple(_product_from(p) for p in rec["catalog"]["products"]))
            elif "n_sessions" in rec:
                close()
                header, sessions, header_line = rec, [], lineno
            else:
                if header is None:
                    raise DataError("session record before any episode header")
                fb = rec["feedback"]
                feedback = Feedback(int(fb["story_clicked"]), tuple(fb["product_clicked"]),
                                    tuple(fb["product_ordered"]), tuple(fb["engaged_product_ids"]))
                if "reward" in fb and int(fb["reward"]) != feedback.reward:
                    raise DataError(f"episode of user {header['user_id']}: stored reward {fb['reward']} "
                                    f"is not the OR of product clicks")
                prop = rec.get("propensity")
                sessions.append(Session(
                    t=int(rec["t"]), user_id=int(header["user_id"]),
                    query=Query(tuple(rec["query_tokens"])), story_shown=_story_from(rec["story"]),
                    candidates=tuple(rec["candidates"]),
                    impressed_products=tuple(_product_from(p) for p in rec["products"]),
                    feedback=feedback, logged_propensity=None if prop is None else float(prop)))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc!r})") from None
    close()
    return Dataset(episodes, catalog)


# ---------------------------------------------------------------------------
# splitting and filtering


def split_folds(episodes, k: int, seed: int) -> list:
    """Partition episodes into ``k`` folds by user; fold user counts differ by at most one."""
    if k < 2:
        raise ContractError("split_folds needs k >= 2")
    users = sorted({e.user_id for e in episodes})
    if k > len(users):
        raise ContractError(f"cannot split {len(users)} users into {k} folds")
    order = np.random.default_rng(seed).permutation(len(users))
    fold_of = {users[j]: rank % k for rank, j in enumerate(order)}
    folds = [[] for _ in range(k)]
    for e in episodes:
        folds[fold_of[e.user_id]].append(e)
    if isinstance(episodes, Dataset):
        return [episodes.subset(f) for f in folds]
    return folds


def filter_episodes(episodes, min_len: int = 11, max_len: float = 200):
    if min_len > max_len:
        raise ContractError("filter_episodes: min_len > max_len")
    kept = [e for e in episodes if min_len <= len(e.sessions) <= max_len]
    return episodes.subset(kept) if isinstance(episodes, Dataset) else kept
