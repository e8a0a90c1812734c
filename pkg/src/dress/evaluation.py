"""Offline evaluation: click/order rates, truncated weighted importance sampling, policy divergences."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from .data import Session
from .errors import ContractError, DataError


@dataclass
class EvalConfig:
    horizon: int = 15
    reward: str = "click"
    n_boot: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        if self.reward not in ("click", "order"):
            raise ContractError(f"reward must be click or order, got {self.reward!r}")


# ---------------------------------------------------------------------------
# rates


def ctr(sessions: Sequence[Session]) -> float:
    if not sessions:
        raise DataError("ctr of an empty session list")
    return sum(s.feedback.reward for s in sessions) / len(sessions)


def cvr(sessions: Sequence[Session]) -> float:
    if not sessions:
        raise DataError("cvr of an empty session list")
    return sum(s.feedback.ordered for s in sessions) / len(sessions)


# ---------------------------------------------------------------------------
# truncated weighted importance sampling


@dataclass
class TwisTerms:
    """Per-episode log weights and reward sums over each truncated window."""

    log_w: np.ndarray
    reward_sum: np.ndarray
    count: np.ndarray

    def estimate(self, idx=None) -> float:
        lw, rs, n = (self.log_w, self.reward_sum, self.count) if idx is None else \
            (self.log_w[idx], self.reward_sum[idx], self.count[idx])
        w = np.exp(lw - lw.max())
        return float((w * rs).sum() / (w * n).sum())


def twis_terms(rewards: Sequence, pi: Sequence, b: Sequence, horizon: int) -> TwisTerms:
    """Window = the last ``horizon + 1`` sessions of each episode (all of it if shorter).

    ``rewards``, ``pi`` and ``b`` hold one array per episode: the reward and the
    target/logging probability of the taken action at every session.
    Rescaling ``pi`` or ``b`` by a constant leaves the estimate unchanged only
    when every window has the same length.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    if not len(rewards):
        raise DataError("twis needs at least one episode")
    log_w, rs, cnt = [], [], []
    for e, (r, p, q) in enumerate(zip(rewards, pi, b)):
        r, p, q = (np.asarray(x, dtype=np.float64) for x in (r, p, q))
        if not (len(r) == len(p) == len(q)) or len(r) == 0:
            raise DataError(f"episode {e}: reward/probability lengths differ or are empty")
        start = max(0, len(r) - horizon - 1)
        bad = np.nonzero(q[start:] <= 0)[0]
        if len(bad):
            raise DataError(f"episode {e}, session {start + bad[0]}: logging probability is zero")
        if (p[start:] < 0).any():
            raise DataError(f"episode {e}: negative target probability")
        with np.errstate(divide="ignore"):
            log_w.append(float(np.sum(np.log(p[start:]) - np.log(q[start:]))))
        rs.append(float(r[start:].sum()))
        cnt.append(len(r) - start)
    log_w = np.array(log_w)
    if not np.isfinite(log_w).any():
        raise DataError("every episode has zero importance weight")
    return TwisTerms(log_w, np.array(rs), np.array(cnt, dtype=np.float64))


def twis(rewards: Sequence, pi: Sequence, b: Sequence, horizon: int) -> float:
    return twis_terms(rewards, pi, b, horizon).estimate()


def bootstrap_se(terms: TwisTerms, n_boot: int = 200, seed: int = 0) -> float:
    """Standard error of the TWIS estimate under resampling of whole episodes."""
    rng = np.random.default_rng(seed)
    n = len(terms.log_w)
    ests = [terms.estimate(rng.integers(0, n, size=n)) for _ in range(n_boot)]
    return float(np.std(ests, ddof=1))


def split_by_episode(episode: np.ndarray, *columns: np.ndarray) -> list[list[np.ndarray]]:
    """Group row-aligned columns by episode id (rows must be sorted by episode then time)."""
    bounds = np.flatnonzero(np.diff(episode)) + 1
    return [np.split(c, bounds) for c in columns]


# ---------------------------------------------------------------------------
# policy differences


def _check_pair(b: np.ndarray, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, pi = np.asarray(b, dtype=np.float64), np.asarray(pi, dtype=np.float64)
    if b.shape != pi.shape:
        raise ContractError(f"distributions over different supports: {b.shape} vs {pi.shape}")
    return b, pi


def tv_divergence(b, pi) -> float | np.ndarray:
    b, pi = _check_pair(b, pi)
    return 0.5 * np.abs(pi - b).sum(axis=-1)


def kl_divergence(b, pi) -> float | np.ndarray:
    """KL(b || pi) with 0 log 0 = 0."""
    b, pi = _check_pair(b, pi)
    if ((b > 0) & (pi <= 0)).any():
        raise ContractError("pi has zero probability where b is positive")
    pos = b > 0
    terms = np.where(pos, b * (np.log(np.where(pos, b, 1.0)) - np.log(np.where(pos, pi, 1.0))), 0.0)
    return terms.sum(axis=-1)


def log_ratio(pi_taken, b_taken) -> float:
    """Mean of log(pi/b) over sessions, from the probabilities of the taken actions."""
    p, q = np.asarray(pi_taken, dtype=np.float64), np.asarray(b_taken, dtype=np.float64)
    if (p <= 0).any() or (q <= 0).any():
        raise ContractError("log_ratio needs positive probabilities")
    return float(np.mean(np.log(p) - np.log(q)))


@dataclass
class DifferenceRow:
    method: str
    log_ratio: float
    tv: float
    kl: float


def policy_difference_report(policies: Mapping[str, np.ndarray], reference: np.ndarray,
                             actions: np.ndarray, include_uniform: bool = True) -> list[DifferenceRow]:
    """Mean divergence of each policy from ``reference`` over sessions.

    Every probability array is (n_sessions, K) over the same candidate pools;
    ``actions`` are the logged choices used for the log-ratio column.
    """
    reference = np.asarray(reference, dtype=np.float64)
    rows_ = np.arange(len(reference))
    named = dict(policies)
    if include_uniform:
        named["unif"] = np.full_like(reference, 1.0 / reference.shape[-1])
    out = []
    for name, probs in named.items():
        probs = np.asarray(probs, dtype=np.float64)
        out.append(DifferenceRow(
            name,
            log_ratio(probs[rows_, actions], reference[rows_, actions]),
            float(np.mean(tv_divergence(reference, probs))),
            float(np.mean(kl_divergence(reference, probs))),
        ))
    return out


def dominates(a: DifferenceRow, b: DifferenceRow, strict: bool = True) -> bool:
    """Whether ``a`` is at least as far from the reference as ``b`` on all three measures.

    The log-ratio column is signed, so distance is compared by magnitude.
    """
    pairs = [(abs(a.log_ratio), abs(b.log_ratio)), (a.tv, b.tv), (a.kl, b.kl)]
    return all(x > y if strict else x >= y for x, y in pairs)


# ---------------------------------------------------------------------------
# method comparison


def sign_test(diffs: Sequence[float]) -> float:
    """Two-sided sign-test p-value; zero differences are dropped."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    if len(d) == 0:
        return 1.0
    return float(binomtest(int((d > 0).sum()), len(d), 0.5).pvalue)


def improvement(est: float, baseline: float) -> float:
    return 100.0 * (est / baseline - 1.0)


@dataclass
class EvalReport:
    """Per-fold raw TWIS values per method and metric, plus derived summaries."""

    baseline: str
    horizon: int
    per_fold: dict = field(default_factory=dict)     # metric -> method -> [value per fold]
    differences: list = field(default_factory=list)  # DifferenceRow per method (first fold)

    def summary(self) -> list[dict]:
        rows = []
        for metric, methods in self.per_fold.items():
            base = np.asarray(methods[self.baseline])
            for method, values in methods.items():
                v = np.asarray(values)
                imp = [improvement(x, y) for x, y in zip(v, base)]
                rows.append({
                    "method": method, "metric": metric, "mean": float(v.mean()),
                    "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                    "improvement": float(np.mean(imp)),
                    "p_value": sign_test(v - base),
                    "significance": "*" if sign_test(v - base) < 0.05 else "",
                })
        return rows

    def to_json(self) -> str:
        payload = {"baseline": self.baseline, "horizon": self.horizon, "per_fold": self.per_fold,
                   "summary": self.summary(),
                   "differences": [r.__dict__ for r in self.differences]}
        return json.dumps(payload, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "metric", "mean", "std", "significance"])
            for r in self.summary():
                w.writerow([r["method"], r["metric"], repr(r["mean"]), repr(r["std"]), r["significance"]])

    def write_differences_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "log_ratio", "tv", "kl"])
            for r in self.differences:
                w.writerow([r.method, repr(r.log_ratio), repr(r.tv), repr(r.kl)])


@dataclass
class FoldEvaluation:
    """What TWIS needs from one test fold: per-session rewards and policy probabilities.

    ``probs`` maps method name to (n_sessions, K) candidate probabilities; the
    logging policy used for weights is ``probs[baseline]``. Rows are sorted by
    episode, then time.
    """

    episode: np.ndarray
    actions: np.ndarray
    clicks: np.ndarray
    orders: np.ndarray
    probs: dict
    baseline: str

    def taken(self, method: str) -> np.ndarray:
        return self.probs[method][np.arange(len(self.actions)), self.actions]

    def twis_terms(self, method: str, horizon: int, reward: str = "click") -> TwisTerms:
        r = self.clicks if reward == "click" else self.orders
        rs, ps, bs = split_by_episode(self.episode, r, self.taken(method), self.taken(self.baseline))
        return twis_terms(rs, ps, bs, horizon)

    def twis(self, method: str, horizon: int, reward: str = "click") -> float:
        return self.twis_terms(method, horizon, reward).estimate()


def compare_folds(folds: Sequence[FoldEvaluation], cfg: EvalConfig) -> EvalReport:
    """TWIS-CTR and TWIS-CVR of every method on every fold, relative to the baseline policy."""
    if len(folds) < 1:
        raise ContractError("compare needs at least one fold")
    report = EvalReport(folds[0].baseline, cfg.horizon)
    for metric, field_ in (("ctr", "click"), ("cvr", "order")):
        report.per_fold[metric] = {
            m: [f.twis(m, cfg.horizon, field_) for f in folds] for m in folds[0].probs}
    f0 = folds[0]
    others = {m: p for m, p in f0.probs.items()}
    report.differences = policy_difference_report(others, f0.probs[f0.baseline], f0.actions)
    return report


def horizon_sweep(folds: Sequence[FoldEvaluation], horizons: Sequence[int] = tuple(range(1, 16)),
                  reward: str = "click") -> list[dict]:
    """TWIS improvement over the baseline for each method and horizon (mean/std across folds)."""
    rows = []
    for H in horizons:
        for method in folds[0].probs:
            vals = [improvement(f.twis(method, H, reward), f.twis(f.baseline, H, reward)) for f in folds]
            rows.append({"H": H, "method": method, "mean": float(np.mean(vals)),
                         "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0})
    return rows


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["H", "method", "mean", "std"])
        for r in rows:
            w.writerow([r["H"], r["method"], repr(r["mean"]), repr(r["std"])])
