"""Acquisition strategies over the unlabeled pool."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from learnloss.lossnet import ModelSet
from learnloss.models import CLASSIFICATION, TargetModel
from learnloss.nncore import gap, log_softmax

RANDOM = "random"
ENTROPY = "entropy"
CORESET = "coreset"
LEARNED_LOSS = "learned_loss"
LEARNED_LOSS_MSE = "learned_loss_mse"
STRATEGIES = (RANDOM, ENTROPY, CORESET, LEARNED_LOSS, LEARNED_LOSS_MSE)

SCORE_CHUNK = 1024
CENTER_CHUNK = 64


class UnsupportedStrategyError(ValueError):
    pass


@dataclass(frozen=True)
class Strategy:
    kind: str
    coreset_tap: int = -1

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")

    @property
    def learns_loss(self) -> bool:
        return self.kind in (LEARNED_LOSS, LEARNED_LOSS_MSE)

    def check_task(self, task: str) -> None:
        if self.kind == ENTROPY and task != CLASSIFICATION:
            raise UnsupportedStrategyError("entropy sampling needs a classification target")


@dataclass(frozen=True)
class ScoredPool:
    ids: np.ndarray
    scores: np.ndarray
    snapshot: str = ""

    def __post_init__(self):
        if self.ids.shape != self.scores.shape:
            raise ValueError("one score per id required")

    def __len__(self) -> int:
        return len(self.ids)


def snapshot_id(model_set: ModelSet) -> str:
    h = hashlib.blake2b(digest_size=8)
    for p in model_set.params():
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def sample_subset(ids: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of min(m, len(ids)) distinct ids, returned sorted."""
    if m <= 0:
        raise ValueError("subset size must be positive")
    ids = np.asarray(ids)
    if m >= len(ids):
        return np.sort(ids)
    return np.sort(rng.choice(ids, size=m, replace=False))


def _chunks(n: int):
    for start in range(0, n, SCORE_CHUNK):
        yield slice(start, min(start + SCORE_CHUNK, n))


def predict_losses(model_set: ModelSet, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    for s in _chunks(len(x)):
        _, feats = model_set.target.forward(x[s])
        out[s] = model_set.predictor.forward(feats)
    return out


def entropy_from_probs(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(np.where(p > 0, p * np.log(safe), 0.0)).sum(axis=-1)


def softmax_entropy(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    p = np.exp(logp)
    return -(np.where(p > 0, p * logp, 0.0)).sum(axis=1)


def predict_entropy(target: TargetModel, x: np.ndarray) -> np.ndarray:
    if target.task != CLASSIFICATION:
        raise UnsupportedStrategyError("entropy sampling needs a classification target")
    out = np.empty(len(x))
    for s in _chunks(len(x)):
        logits, _ = target.forward(x[s])
        out[s] = softmax_entropy(logits)
    return out


def tap_features(target: TargetModel, x: np.ndarray, tap: int = -1) -> np.ndarray:
    parts = []
    for s in _chunks(len(x)):
        _, feats = target.forward(x[s])
        parts.append(gap(feats[tap]))
    if not parts:
        return np.empty((0, target.tap_dims[tap]))
    return np.concatenate(parts)


def score_learned_loss(model_set: ModelSet, x: np.ndarray, ids: np.ndarray) -> ScoredPool:
    """Scores are predicted losses of ``x[ids]``; no labels are consulted."""
    ids = np.asarray(ids)
    return ScoredPool(ids, predict_losses(model_set, x[ids]), snapshot_id(model_set))


def score_entropy(model_set: ModelSet, x: np.ndarray, ids: np.ndarray) -> ScoredPool:
    ids = np.asarray(ids)
    return ScoredPool(ids, predict_entropy(model_set.target, x[ids]), snapshot_id(model_set))


def select_top_k(scored: ScoredPool, k: int) -> np.ndarray:
    """Ids of the k largest scores; equal scores go to the smaller id."""
    if k < 0 or k > len(scored):
        raise ValueError(f"cannot select {k} of {len(scored)} scored ids")
    order = np.lexsort((scored.ids, -scored.scores))
    return scored.ids[order[:k]]


def _min_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    out = np.full(len(points), np.inf)
    for start in range(0, len(centers), CENTER_CHUNK):
        diff = points[:, None, :] - centers[None, start : start + CENTER_CHUNK, :]
        d = np.sqrt((diff * diff).sum(axis=2))
        out = np.minimum(out, d.min(axis=1))
    return out


def coreset_select(
    labeled_feats: np.ndarray, pool_feats: np.ndarray, pool_ids: np.ndarray, k: int
) -> np.ndarray:
    """K-center greedy: repeatedly take the pool point farthest from all centers.

    Centers start as the labeled features. Equal distances resolve to the
    smallest id. Returns ids in pick order.
    """
    pool_ids = np.asarray(pool_ids)
    n = len(pool_ids)
    if k > n:
        raise ValueError(f"cannot select {k} of {n} pool points")
    by_id = np.argsort(pool_ids, kind="stable")
    feats = np.asarray(pool_feats)[by_id]
    ids = pool_ids[by_id]
    if len(labeled_feats):
        dist = _min_dist(feats, np.asarray(labeled_feats))
    else:
        dist = np.full(n, np.inf)
    picked = []
    for _ in range(k):
        # argmax returns the first maximum, i.e. the smallest id
        j = int(np.argmax(dist))
        picked.append(j)
        diff = feats - feats[j]
        dist = np.minimum(dist, np.sqrt((diff * diff).sum(axis=1)))
        dist[j] = -1.0
    return ids[picked]


def covering_radius(points: np.ndarray, centers: np.ndarray) -> float:
    if len(centers) == 0:
        return float("inf")
    return float(_min_dist(np.asarray(points), np.asarray(centers)).max(initial=0.0))


def select(
    strategy: Strategy,
    model_set: ModelSet,
    x: np.ndarray,
    labeled: np.ndarray,
    unlabeled: np.ndarray,
    k: int,
    m: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pick k ids from ``unlabeled`` according to ``strategy``."""
    unlabeled = np.asarray(unlabeled)
    if k > len(unlabeled):
        raise ValueError(f"cannot select {k} of {len(unlabeled)} unlabeled ids")
    strategy.check_task(model_set.target.task)
    if strategy.kind == RANDOM:
        return rng.choice(unlabeled, size=k, replace=False)
    subset = sample_subset(unlabeled, m, rng)
    if k > len(subset):
        raise ValueError(f"subset of {len(subset)} cannot supply {k} picks; raise M")
    if strategy.kind == CORESET:
        lab = tap_features(model_set.target, x[np.asarray(labeled, dtype=np.intp)], strategy.coreset_tap)
        pool = tap_features(model_set.target, x[subset], strategy.coreset_tap)
        return coreset_select(lab, pool, subset, k)
    if strategy.kind == ENTROPY:
        scored = score_entropy(model_set, x, subset)
    else:
        scored = score_learned_loss(model_set, x, subset)
    return select_top_k(scored, k)
