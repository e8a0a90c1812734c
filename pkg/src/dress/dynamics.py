"""Learned environment: recurrent transition model plus click/reward model.

Both halves share one embedding table. Training unrolls whole episodes
(batched, padded at the tail) and minimizes the weighted sum of the query
regression loss, the story/product click cross entropies and the
click-conditional product-representation loss.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import Catalog, Dataset, Episode, FeatureConfig, Product, Session, Story
from .errors import ContractError, DataError, NumericalError

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_T", "L_D", "L_P", "L_Pl")


@dataclass
class DynamicModelConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    hidden_dim: int = 64
    state_dim: int = 64
    core_dim: int = 64
    w_T: float = 1.0
    w_D: float = 1.0
    w_P: float = 1.0
    w_Pl: float = 1.0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float = 5.0
    bptt_window: int | None = None
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.w_T, self.w_D, self.w_P, self.w_Pl) < 0:
            raise ContractError("loss weights must be >= 0")
        if min(self.hidden_dim, self.state_dim, self.core_dim, self.batch_size) <= 0:
            raise ContractError("dimensions and batch size must be positive")

    @property
    def weights(self) -> dict:
        return {"L_T": self.w_T, "L_D": self.w_D, "L_P": self.w_P, "L_Pl": self.w_Pl}


def _token_matrix(token_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max((len(t) for t in token_lists), default=1))
    ids = np.zeros((len(token_lists), width), dtype=np.int64)
    w = np.zeros((len(token_lists), width))
    for i, toks in enumerate(token_lists):
        toks = list(toks) or [0]
        ids[i, :len(toks)] = toks
        w[i, :len(toks)] = 1.0 / len(toks)
    return ids, w


@dataclass
class Packed:
    """Episodes as padded arrays of shape (n_episodes, max_len, ...)."""

    lengths: np.ndarray
    mask: np.ndarray
    profiles: np.ndarray
    query_ids: np.ndarray
    query_w: np.ndarray
    story: np.ndarray
    candidates: np.ndarray
    action: np.ndarray
    products: np.ndarray
    story_clicked: np.ndarray
    clicked: np.ndarray
    ordered: np.ndarray
    propensity: np.ndarray
    user_ids: np.ndarray

    @property
    def reward(self) -> np.ndarray:
        return self.clicked.max(axis=-1) * self.mask

    @property
    def order_reward(self) -> np.ndarray:
        return self.ordered.max(axis=-1) * self.mask

    def __len__(self) -> int:
        return len(self.lengths)

    def take(self, idx) -> "Packed":
        idx = np.asarray(idx)
        T = int(self.lengths[idx].max()) if len(idx) else 0
        kw = {}
        for name in self.__dataclass_fields__:
            arr = getattr(self, name)
            kw[name] = arr[idx] if arr.ndim == 1 or name == "profiles" else arr[idx, :T]
        return Packed(**kw)


def pack(episodes: Sequence[Episode], catalog: Catalog) -> Packed:
    """Convert episodes to padded index arrays against ``catalog``."""
    if not episodes:
        raise DataError("cannot pack an empty dataset")
    E, T = len(episodes), max(len(e) for e in episodes)
    first = episodes[0].sessions[0]
    K, n = len(first.candidates), len(first.impressed_products)
    Lq = max(len(s.query.token_ids) for e in episodes for s in e.sessions)
    out = dict(
        lengths=np.array([len(e) for e in episodes]), mask=np.zeros((E, T)),
        profiles=np.array([e.user_profile for e in episodes], dtype=np.float64),
        query_ids=np.zeros((E, T, Lq), dtype=np.int64), query_w=np.zeros((E, T, Lq)),
        story=np.zeros((E, T), dtype=np.int64), candidates=np.zeros((E, T, K), dtype=np.int64),
        action=np.zeros((E, T), dtype=np.int64), products=np.zeros((E, T, n), dtype=np.int64),
        story_clicked=np.zeros((E, T)), clicked=np.zeros((E, T, n)), ordered=np.zeros((E, T, n)),
        propensity=np.full((E, T), np.nan), user_ids=np.array([e.user_id for e in episodes]),
    )
    sidx, pidx = catalog.story_index, catalog.product_index
    for i, e in enumerate(episodes):
        for t, s in enumerate(e.sessions):
            if len(s.candidates) != K or len(s.impressed_products) != n:
                raise DataError(f"episode of user {e.user_id}: every session needs {K} candidates and {n} products")
            try:
                out["candidates"][i, t] = [sidx[c] for c in s.candidates]
                out["products"][i, t] = [pidx[p.product_id] for p in s.impressed_products]
            except KeyError as exc:
                raise DataError(f"episode of user {e.user_id}: id {exc} missing from the catalog") from None
            out["story"][i, t] = sidx[s.story_shown.story_id]
            out["action"][i, t] = s.candidates.index(s.story_shown.story_id)
            q = s.query.token_ids
            out["query_ids"][i, t, :len(q)] = q
            out["query_w"][i, t, :len(q)] = 1.0 / len(q)
            out["story_clicked"][i, t] = s.feedback.story_clicked
            out["clicked"][i, t] = s.feedback.product_clicked
            out["ordered"][i, t] = s.feedback.product_ordered
            if s.logged_propensity is not None:
                out["propensity"][i, t] = s.logged_propensity
            out["mask"][i, t] = 1.0
    return Packed(**out)


class DynamicModel:
    """Parameters and forward passes of the transition and reward models."""

    def __init__(self, cfg: DynamicModelConfig, catalog: Catalog, profile_dim: int, seed: int | None = None):
        self.cfg = cfg
        self.catalog = catalog
        self.profile_dim = profile_dim
        fc = cfg.features
        E, H, S, C = fc.embedding_dim, cfg.hidden_dim, cfg.state_dim, cfg.core_dim
        self.story_title_ids, self.story_title_w = _token_matrix([s.title_token_ids for s in catalog.stories])
        self.story_ptitle_ids, self.story_ptitle_w = _token_matrix([s.product_title_token_ids for s in catalog.stories])
        self.story_dense = np.array([s.dense_features for s in catalog.stories], dtype=np.float64)
        if self.story_dense.shape[1] != fc.dense_story_dim:
            raise ContractError(f"catalog stories have {self.story_dense.shape[1]} dense features, "
                                f"config says {fc.dense_story_dim}")
        self.product_ids, self.product_w = _token_matrix([p.title_token_ids for p in catalog.products])
        max_tok = max(int(self.story_title_ids.max()), int(self.story_ptitle_ids.max()),
                      int(self.product_ids.max()) if len(catalog.products) else 0)
        if max_tok >= fc.vocab_size:
            raise ContractError(f"token id {max_tok} outside vocabulary of size {fc.vocab_size}")

        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        st = self.store = nn.ParamStore()
        st.add("emb", rng.uniform(-np.sqrt(6.0 / (fc.vocab_size + E)), np.sqrt(6.0 / (fc.vocab_size + E)),
                                  size=(fc.vocab_size, E)))
        st.add_dense("init", profile_dim, H, rng)
        self.gru = st.add_gru("gru", fc.session_input_dim, H, rng)
        st.add_dense("qhead", H, E, rng)
        st.add_dense("state", H + E, S, rng)
        st.add("core.W_s", nn.glorot(rng, S + fc.story_dim + E, C)[:S])
        st.add("core.W_d", nn.glorot(rng, S + fc.story_dim + E, C)[:fc.story_dim])
        st.add("core.W_p", nn.glorot(rng, S + fc.story_dim + E, C)[:E])
        st.add("core.b", np.zeros(C))
        st.add_dense("head_d", C, 1, rng)
        st.add_dense("head_p", C, 1, rng)
        st.add_dense("head_rp", C, E, rng)

    # --- featurization over the whole catalog -------------------------------

    @property
    def emb(self) -> nn.Tensor:
        return self.store["emb"]

    def story_table(self) -> nn.Tensor:
        """(n_stories, 2E + dense) story features for every catalog story."""
        title = nn.weighted_rows(self.emb, self.story_title_ids, self.story_title_w)
        ptitle = nn.weighted_rows(self.emb, self.story_ptitle_ids, self.story_ptitle_w)
        return nn.concat([title, ptitle, nn.Tensor(self.story_dense)])

    def product_table(self) -> nn.Tensor:
        return nn.weighted_rows(self.emb, self.product_ids, self.product_w)

    def query_features(self, ids: np.ndarray, weights: np.ndarray) -> nn.Tensor:
        return nn.weighted_rows(self.emb, ids, weights)

    # --- model pieces ----------------------------------------------------------

    def init_hidden(self, profiles) -> nn.Tensor:
        profiles = nn.as_tensor(profiles)
        if profiles.shape[-1] != self.profile_dim:
            raise ContractError(f"profile has {profiles.shape[-1]} entries, model expects {self.profile_dim}")
        return nn.dense_forward(profiles, self.store["init.W"], self.store["init.b"], "tanh")

    def feedback_features(self, story_clicked, clicked, prod_feats: nn.Tensor) -> nn.Tensor:
        sc = np.asarray(story_clicked, dtype=np.float64)
        c = np.asarray(clicked, dtype=np.float64)
        anyc = c.max(axis=-1)
        onehot = nn.Tensor(np.stack([1.0 - sc, sc, 1.0 - anyc, anyc], axis=-1))
        w = c / np.maximum(c.sum(axis=-1, keepdims=True), 1.0)
        engaged = nn.total(prod_feats * w[..., None], axis=-2)
        return nn.concat([onehot, engaged])

    def transition(self, h: nn.Tensor, story_feats, query_feats, feedback_feats) -> tuple[nn.Tensor, nn.Tensor]:
        x = nn.concat([story_feats, query_feats, feedback_feats])
        if x.shape[-1] != self.cfg.features.session_input_dim:
            raise ContractError(f"session input has {x.shape[-1]} features, expected "
                                f"{self.cfg.features.session_input_dim}")
        h_next = nn.gru_step(x, h, self.gru)
        q_hat = nn.dense_forward(h_next, self.store["qhead.W"], self.store["qhead.b"])
        return h_next, q_hat

    def state_repr(self, h, q) -> nn.Tensor:
        h, q = nn.as_tensor(h), nn.as_tensor(q)
        if h.shape[-1] != self.cfg.hidden_dim or q.shape[-1] != self.cfg.features.embedding_dim:
            raise ContractError(f"state_repr dims: h{h.shape}, q{q.shape}")
        return nn.dense_forward(nn.concat([h, q]), self.store["state.W"], self.store["state.b"], "tanh")

    def reward_forward(self, s, story_feats, prod_feats) -> tuple[nn.Tensor, nn.Tensor, nn.Tensor]:
        """Story-click prob (B,), per-product click probs (B, n), product representations (B, n, E)."""
        s, story_feats, prod_feats = nn.as_tensor(s), nn.as_tensor(story_feats), nn.as_tensor(prod_feats)
        if prod_feats.shape[-2] == 0:
            raise ContractError("reward_forward needs at least one product")
        st = self.store
        session = nn.matmul(s, st["core.W_s"]) + nn.matmul(story_feats, st["core.W_d"])
        lead = session.shape[:-1]
        session = nn.reshape(session, lead + (1, session.shape[-1]))
        hidden = nn.relu(session + nn.matmul(prod_feats, st["core.W_p"]) + st["core.b"])
        y_p = nn.sigmoid(nn.dense_forward(hidden, st["head_p.W"], st["head_p.b"]))
        y_p = nn.reshape(y_p, y_p.shape[:-1])
        y_rp = nn.dense_forward(hidden, st["head_rp.W"], st["head_rp.b"])
        pooled = nn.mean(hidden, axis=-2)
        y_d = nn.sigmoid(nn.dense_forward(pooled, st["head_d.W"], st["head_d.b"]))
        return nn.reshape(y_d, y_d.shape[:-1]), y_p, y_rp

    # --- losses ---------------------------------------------------------------

    @staticmethod
    def session_losses(y_d, y_p, y_rp, story_clicked, clicked, prod_feats, q_hat=None, next_query=None) -> dict:
        """Per-session loss terms; ``L_T`` only when the next query is known."""
        c = np.asarray(clicked, dtype=np.float64)
        out = {
            "L_D": nn.cross_entropy(y_d, story_clicked),
            "L_P": nn.mean(nn.cross_entropy(y_p, c), axis=-1),
            "L_Pl": nn.mean(nn.mse(y_rp, prod_feats) * c, axis=-1),
        }
        if q_hat is not None and next_query is not None:
            out["L_T"] = nn.mse(q_hat, next_query)
        return out

    def batch_losses(self, batch: Packed) -> dict:
        """Mean per-session losses over a packed batch, unrolling every episode."""
        B, T = batch.mask.shape
        stories = self.story_table()
        prods = self.product_table()
        h = self.init_hidden(batch.profiles)
        n_sess = batch.mask.sum()
        n_next = batch.mask[:, 1:].sum()
        sums = {k: [] for k in LOSS_NAMES}
        q = self.query_features(batch.query_ids[:, 0], batch.query_w[:, 0])
        window = self.cfg.bptt_window
        for t in range(T):
            m = batch.mask[:, t]
            story_t = nn.take_rows(stories, batch.story[:, t])
            prod_t = nn.take_rows(prods, batch.products[:, t])
            s = self.state_repr(h, q)
            y_d, y_p, y_rp = self.reward_forward(s, story_t, prod_t)
            fb = self.feedback_features(batch.story_clicked[:, t], batch.clicked[:, t], prod_t)
            h, q_hat = self.transition(h, story_t, q, fb)
            terms = self.session_losses(y_d, y_p, y_rp, batch.story_clicked[:, t], batch.clicked[:, t], prod_t)
            for k in ("L_D", "L_P", "L_Pl"):
                sums[k].append(nn.total(terms[k] * m))
            if t + 1 < T:
                q = self.query_features(batch.query_ids[:, t + 1], batch.query_w[:, t + 1])
                m_next = batch.mask[:, t + 1]
                if m_next.any():
                    sums["L_T"].append(nn.total(nn.mse(q_hat, q) * m_next))
            if window and (t + 1) % window == 0:
                h = nn.Tensor(h.data)
        out = {}
        for k in LOSS_NAMES:
            denom = n_next if k == "L_T" else n_sess
            out[k] = _sum_list(sums[k]) * (1.0 / max(denom, 1.0))
        return out

    def total_loss(self, losses: dict) -> nn.Tensor:
        w = self.cfg.weights
        return _sum_list([losses[k] * w[k] for k in LOSS_NAMES])

    # --- inference -------------------------------------------------------------

    def encode(self, data: Packed) -> dict:
        """Replay logged episodes: hidden state and query features before every session.

        Returns arrays ``h`` (E, T+1, H) and ``q`` (E, T, emb); ``h[:, t]`` is the
        state before session ``t``.
        """
        with nn.no_grad():
            stories = self.story_table()
            prods = self.product_table()
            E, T = data.mask.shape
            hs = np.zeros((E, T + 1, self.cfg.hidden_dim))
            qs = np.zeros((E, T, self.cfg.features.embedding_dim))
            h = self.init_hidden(data.profiles)
            hs[:, 0] = h.data
            for t in range(T):
                q = self.query_features(data.query_ids[:, t], data.query_w[:, t])
                qs[:, t] = q.data
                story_t = nn.take_rows(stories, data.story[:, t])
                prod_t = nn.take_rows(prods, data.products[:, t])
                fb = self.feedback_features(data.story_clicked[:, t], data.clicked[:, t], prod_t)
                h, _ = self.transition(h, story_t, q, fb)
                hs[:, t + 1] = h.data
        return {"h": hs, "q": qs}

    def story_features(self) -> np.ndarray:
        with nn.no_grad():
            return self.story_table().data

    def product_features(self) -> np.ndarray:
        with nn.no_grad():
            return self.product_table().data


def _sum_list(xs: list) -> nn.Tensor:
    if not xs:
        return nn.mul(nn.Tensor(0.0), 1.0)
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out


# ---------------------------------------------------------------------------
# single-record API


def init_hidden(model: DynamicModel, user_profile) -> nn.Tensor:
    return model.init_hidden(nn.as_tensor(user_profile))


def _story_row(model: DynamicModel, story: Story) -> nn.Tensor:
    return nn.take_rows(model.story_table(), model.catalog.story_index[story.story_id])


def _product_rows(model: DynamicModel, products: Sequence[Product]) -> nn.Tensor:
    return nn.take_rows(model.product_table(), [model.catalog.product_index[p.product_id] for p in products])


def _query_row(model: DynamicModel, token_ids) -> nn.Tensor:
    ids, w = _token_matrix([token_ids])
    return model.query_features(ids, w)[0]


def transition_step(model: DynamicModel, h, session: Session) -> tuple[nn.Tensor, nn.Tensor]:
    """Advance the hidden state over one logged session and predict the next query."""
    prods = _product_rows(model, session.impressed_products)
    fb = model.feedback_features(session.feedback.story_clicked, session.feedback.product_clicked, prods)
    return model.transition(nn.as_tensor(h), _story_row(model, session.story_shown),
                            _query_row(model, session.query.token_ids), fb)


def state_repr(model: DynamicModel, h, q) -> nn.Tensor:
    return model.state_repr(h, q)


def reward_forward(model: DynamicModel, s, story: Story, products: Sequence[Product]):
    if not products:
        raise ContractError("reward_forward needs at least one product")
    return model.reward_forward(s, _story_row(model, story), _product_rows(model, products))


def session_losses(model: DynamicModel, h, session: Session, next_query=None) -> dict:
    """All four loss terms of one session starting from hidden state ``h``."""
    q = _query_row(model, session.query.token_ids)
    prods = _product_rows(model, session.impressed_products)
    s = model.state_repr(h, q)
    y_d, y_p, y_rp = model.reward_forward(s, _story_row(model, session.story_shown), prods)
    _, q_hat = transition_step(model, h, session)
    nq = None if next_query is None else _query_row(model, next_query.token_ids)
    return model.session_losses(y_d, y_p, y_rp, session.feedback.story_clicked,
                                session.feedback.product_clicked, prods, q_hat, nq)


# ---------------------------------------------------------------------------
# training


@dataclass
class CurveRow:
    epoch: int
    L_T: float
    L_D: float
    L_P: float
    L_Pl: float
    total: float
    train_total: float


def evaluate_losses(model: DynamicModel, data: Packed, batch_size: int = 256) -> dict:
    """Session-weighted mean of each loss term over ``data`` (no gradients)."""
    acc = {k: 0.0 for k in LOSS_NAMES}
    n_sess = n_next = 0.0
    with nn.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data.take(np.arange(start, min(start + batch_size, len(data))))
            losses = model.batch_losses(batch)
            ns, nn_ = batch.mask.sum(), batch.mask[:, 1:].sum()
            for k in LOSS_NAMES:
                acc[k] += losses[k].item() * (nn_ if k == "L_T" else ns)
            n_sess += ns
            n_next += nn_
    out = {k: float(acc[k] / max(n_next if k == "L_T" else n_sess, 1.0)) for k in LOSS_NAMES}
    out["total"] = sum(model.cfg.weights[k] * out[k] for k in LOSS_NAMES)
    return out


def _length_batches(lengths: np.ndarray, batch_size: int) -> list:
    order = np.argsort(lengths, kind="stable")
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train_dynamic_model(dataset: Dataset, cfg: DynamicModelConfig, validation: Dataset | None = None,
                        catalog: Catalog | None = None) -> tuple[DynamicModel, list]:
    """Fit the dynamic model; returns the model and one ``CurveRow`` per epoch (epoch 0 = init)."""
    if len(dataset) == 0:
        raise DataError("train_dynamic_model needs a non-empty dataset")
    catalog = catalog or dataset.catalog
    if catalog is None:
        raise DataError("dataset has no catalog")
    rng = np.random.default_rng(cfg.seed)
    episodes = list(dataset)
    if validation is None:
        n_val = int(round(cfg.validation_fraction * len(episodes)))
        perm = rng.permutation(len(episodes))
        val_eps = [episodes[i] for i in sorted(perm[:n_val])]
        episodes = [episodes[i] for i in sorted(perm[n_val:])]
    else:
        val_eps = list(validation)
    train = pack(episodes, catalog)
    valid = pack(val_eps, catalog) if val_eps else None
    model = DynamicModel(cfg, catalog, train.profiles.shape[1])

    def snapshot(epoch, train_total):
        v = evaluate_losses(model, valid if valid is not None else train)
        return CurveRow(epoch, v["L_T"], v["L_D"], v["L_P"], v["L_Pl"], v["total"], train_total)

    curve = [snapshot(0, evaluate_losses(model, train)["total"])]
    batches = _length_batches(train.lengths, cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        running, count = 0.0, 0.0
        for bi in rng.permutation(len(batches)):
            batch = train.take(batches[bi])
            losses = model.batch_losses(batch)
            loss = model.total_loss(losses)
            if not np.isfinite(loss.data).all():
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}: " + ", ".join(f"{k}={losses[k].item():.4g}" for k in LOSS_NAMES),
                    stage="dynamic-model")
            nn.backward(loss, model.store)
            nn.adam_step(model.store, cfg.lr, clip_norm=cfg.clip_norm)
            n = batch.mask.sum()
            running += loss.item() * n
            count += n
        curve.append(snapshot(epoch, float(running / count)))
        log.info("dynamic model epoch %d: train %.4f valid %.4f", epoch, curve[-1].train_total, curve[-1].total)
    return model, curve


def write_curve_csv(curve: Sequence[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_T", "L_D", "L_P", "L_Pl", "total", "train_total"])
        for r in curve:
            w.writerow([r.epoch, repr(r.L_T), repr(r.L_D), repr(r.L_P), repr(r.L_Pl), repr(r.total), repr(r.train_total)])
