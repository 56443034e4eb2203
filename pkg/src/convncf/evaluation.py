"""Ranked top-k evaluation over fixed sampled negatives, plus ItemPop.

For every eligible user the target item is scored against that user's fixed
negative candidates; the rank is one plus the number of candidates scoring
strictly higher, so ties resolve optimistically and any strictly increasing
transform of the scores leaves every metric unchanged.

HR@k is 1 when the rank is within k. NDCG@k uses the one-relevant-item
reduction, 1/log2(rank+1) inside the cutoff and 0 outside, whose ideal value
is exactly 1.

Scoring the validation split uses train-only history; scoring the test split
uses train plus validation. The test item never enters any history.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from convncf.data import Dataset, SplitSet
from convncf.embeddings import EmbeddingTables, Variant
from convncf.model import IdentityHead, MergeKind, ModelSpec, predict_batch

DEFAULT_KS = (5, 10, 20)


class EvaluationError(RuntimeError):
    """Scoring failed for a specific user; the message names the user."""


@dataclass
class EvalResult:
    hr: dict[int, float]
    ndcg: dict[int, float]
    users_evaluated: int
    ranks: dict[int, int] = field(default_factory=dict, repr=False)


def rank_of_target(scores: np.ndarray, target_index: int) -> int:
    """1 + the number of candidates scoring strictly above the target."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= target_index < scores.shape[0]:
        raise IndexError(f"target index {target_index} out of range [0, {scores.shape[0]})")
    return 1 + int(np.sum(scores > scores[target_index]))


def hr_at_k(rank: int, k: int) -> int:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def evaluate(
    spec: ModelSpec,
    tables: EmbeddingTables,
    splits: SplitSet,
    which: str = "test",
    ks: Sequence[int] = DEFAULT_KS,
    threads: int = 1,
) -> EvalResult:
    """Average HR@k / NDCG@k over every user carrying a held-out item.

    The candidate list is the target plus the user's fixed negatives; the
    negatives never intersect any split of the user's interactions, so the
    same list serves validation and test. Results are reduced per user id,
    making the outcome independent of evaluation order.
    """
    if which not in ("test", "val"):
        raise ValueError(f"unknown evaluation split {which!r}")
    ds = splits.train
    users = sorted(splits.test)

    def score_one(u: int) -> tuple[int, int]:
        held = splits.test[u] if which == "test" else splits.validation[u]
        negatives = splits.eval_negatives[u]
        history = splits.history_items(u, include_validation=(which == "test"))
        candidates = np.concatenate([np.array([held.item], dtype=np.int64), negatives])
        try:
            scores = predict_batch(spec, tables, u, candidates, history)
        except Exception as exc:
            raise EvaluationError(
                f"scoring failed for user {ds.user_ids[u]!r} (index {u}): {exc}"
            ) from exc
        return u, rank_of_target(scores, 0)

    if threads > 1 and len(users) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranks = dict(pool.map(score_one, users))
    else:
        ranks = dict(score_one(u) for u in users)

    n = len(users)
    hr = {k: sum(hr_at_k(ranks[u], k) for u in users) / n if n else 0.0 for k in ks}
    ndcg = {k: sum(ndcg_at_k(ranks[u], k) for u in users) / n if n else 0.0 for k in ks}
    return EvalResult(hr=hr, ndcg=ndcg, users_evaluated=n, ranks=ranks)


def itempop_scores(train: Dataset) -> np.ndarray:
    """Score of item i is its train interaction count."""
    counts = np.zeros(train.N, dtype=np.float64)
    for rows in train.per_user:
        for x in rows:
            counts[x.item] += 1.0
    return counts


def make_itempop(train: Dataset) -> tuple[ModelSpec, EmbeddingTables]:
    """ItemPop as a width-1 inner-product model: user side all ones, item
    side the interaction counts. Checkpointing, evaluation, and
    recommendation then work unchanged."""
    tables = EmbeddingTables(
        P=np.ones((train.M, 1)),
        Q=itempop_scores(train).reshape(train.N, 1),
        Qp=None,
        K=1,
    )
    spec = ModelSpec(variant=Variant.MF, merge=MergeKind.INNER, head=IdentityHead(), K=1)
    return spec, tables


def rolling_last10(history: Sequence[EvalResult]) -> EvalResult:
    """Arithmetic mean of the final min(10, len) entries, per metric."""
    if not history:
        raise ValueError("cannot average an empty history")
    window = history[-10:]
    ks = list(window[-1].hr)
    hr = {k: sum(r.hr[k] for r in window) / len(window) for k in ks}
    ndcg = {k: sum(r.ndcg[k] for r in window) / len(window) for k in ks}
    return EvalResult(hr=hr, ndcg=ndcg, users_evaluated=window[-1].users_evaluated)


def write_per_user_ranks(result: EvalResult, ds: Dataset, path: str) -> None:
    """Debug TSV: one `user<TAB>rank` line per evaluated user, dense order."""
    with open(path, "w", encoding="utf-8") as fh:
        for u in sorted(result.ranks):
            fh.write(f"{ds.user_ids[u]}\t{result.ranks[u]}\n")
