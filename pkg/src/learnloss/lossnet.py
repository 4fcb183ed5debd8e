"""Loss-prediction module and joint training with the target model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from learnloss.models import TargetModel, target_loss_and_grad
from learnloss.nncore import (
    Linear,
    OptimConfig,
    ParamBlock,
    gap,
    gap_backward,
    param_count,
    relu,
    relu_backward,
    sgd_step,
    zero_grads,
)

RANKING = "ranking"
MSE = "mse"


class LossPredictor:
    """Per-tap GAP -> linear -> ReLU branches, concatenated into a linear scalar head."""

    def __init__(
        self,
        tap_dims: Sequence[int],
        rng: np.random.Generator,
        hidden: int = 128,
        dtype=np.float64,
    ):
        if len(tap_dims) < 1:
            raise ValueError("loss predictor needs at least one tap")
        self.hidden = hidden
        self.branches = [Linear(d, hidden, rng, dtype) for d in tap_dims]
        self.fusion = Linear(hidden * len(tap_dims), 1, rng, dtype)
        self._shapes: list[tuple[int, ...]] = []
        self._pre: list[np.ndarray] = []

    @property
    def tap_count(self) -> int:
        return len(self.branches)

    @property
    def tap_dims(self) -> list[int]:
        return [b.in_dim for b in self.branches]

    def params(self) -> list[ParamBlock]:
        out = []
        for layer in [*self.branches, self.fusion]:
            out.extend(layer.params())
        return out

    def forward(self, features: Sequence[np.ndarray]) -> np.ndarray:
        if len(features) != self.tap_count:
            raise ValueError(
                f"expected {self.tap_count} feature maps, got {len(features)}"
            )
        self._shapes = [f.shape for f in features]
        self._pre = []
        pooled = []
        for f, branch in zip(features, self.branches):
            v = gap(f)
            if v.shape[1] != branch.in_dim:
                raise ValueError(f"tap width {v.shape[1]} != branch input {branch.in_dim}")
            z = branch.forward(v)
            self._pre.append(z)
            pooled.append(relu(z))
        return self.fusion.forward(np.concatenate(pooled, axis=1))[:, 0]

    def backward(self, grad_pred: np.ndarray) -> list[np.ndarray]:
        """Accumulate parameter gradients; return gradients on each feature map."""
        g = self.fusion.backward(grad_pred[:, None])
        out = []
        for i, branch in enumerate(self.branches):
            gi = g[:, i * self.hidden : (i + 1) * self.hidden]
            gi = branch.backward(relu_backward(gi, self._pre[i]))
            out.append(gap_backward(gi, self._shapes[i]))
        return out


@dataclass
class ModelSet:
    target: TargetModel
    predictor: LossPredictor

    def __post_init__(self):
        if self.predictor.tap_dims != self.target.tap_dims:
            raise ValueError(
                f"predictor taps {self.predictor.tap_dims} do not match "
                f"target taps {self.target.tap_dims}"
            )
        n_pred = param_count(self.predictor.params())
        n_tgt = param_count(self.target.params())
        if n_pred >= n_tgt:
            raise ValueError(
                f"loss predictor ({n_pred} params) must be smaller than the "
                f"target model ({n_tgt} params)"
            )

    def params(self) -> list[ParamBlock]:
        return self.target.params() + self.predictor.params()


def build_model_set(target: TargetModel, rng: np.random.Generator, hidden: int = 128) -> ModelSet:
    return ModelSet(target, LossPredictor(target.tap_dims, rng, hidden, target.dtype))


def lpm_forward(predictor: LossPredictor, features: Sequence[np.ndarray]) -> np.ndarray:
    return predictor.forward(features)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 128
    lr_drop_epoch: int | None = 160
    lr_drop_factor: float = 0.1
    grad_stop_fraction: float = 0.6
    lam: float = 1.0
    margin: float = 1.0
    optim: OptimConfig = field(default_factory=OptimConfig)
    predictor_loss: str = RANKING

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even number")
        if not self.lr_drop_factor > 0:
            raise ValueError("lr_drop_factor must be positive")
        if not 0.0 <= self.grad_stop_fraction <= 1.0:
            raise ValueError("grad_stop_fraction must lie in [0, 1]")
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.predictor_loss not in (RANKING, MSE):
            raise ValueError(f"unknown predictor loss {self.predictor_loss!r}")

    @property
    def grad_stop_epoch(self) -> int:
        return math.floor(self.grad_stop_fraction * self.epochs)

    def learning_rate(self, epoch: int) -> float:
        lr = self.optim.learning_rate
        if self.lr_drop_epoch is not None and epoch >= self.lr_drop_epoch:
            lr *= self.lr_drop_factor
        return lr


def pair_batch(indices: Sequence[int]) -> np.ndarray:
    """Pair consecutive positions: (0, 1), (2, 3), ... as a (B/2, 2) array."""
    indices = np.asarray(indices)
    if indices.ndim != 1 or len(indices) % 2:
        raise ValueError("pairing needs an even-sized 1-D batch")
    return indices.reshape(-1, 2)


def ranking_loss_pairs(pred_i, pred_j, loss_i, loss_j, margin: float):
    """Vectorized margin ranking loss over pairs, returning (value, d/dpred_i, d/dpred_j).

    The sign is +1 when loss_i > loss_j and -1 otherwise (ties included).
    Real losses enter only through that sign.
    """
    if not margin > 0:
        raise ValueError("margin must be positive")
    sign = np.where(np.asarray(loss_i) > np.asarray(loss_j), 1.0, -1.0)
    z = -sign * (np.asarray(pred_i) - np.asarray(pred_j)) + margin
    active = z > 0.0
    value = np.where(active, z, 0.0)
    return value, np.where(active, -sign, 0.0), np.where(active, sign, 0.0)


def ranking_loss(pred_i: float, pred_j: float, loss_i: float, loss_j: float, margin: float = 1.0):
    value, gi, gj = ranking_loss_pairs(pred_i, pred_j, loss_i, loss_j, margin)
    return float(value), float(gi), float(gj)


def mse_ablation_loss(pred, loss):
    """Squared error between predicted and real loss; the real loss is a constant."""
    diff = np.asarray(pred) - np.asarray(loss)
    return diff * diff, 2.0 * diff


class JointLoss(NamedTuple):
    total: float
    mean_target: float
    mean_predictor: float
    target_losses: np.ndarray
    predicted: np.ndarray


def joint_batch_loss(
    model_set: ModelSet,
    x: np.ndarray,
    y: np.ndarray,
    schedule: TrainSchedule,
    stop_grad: bool = False,
) -> JointLoss:
    """Forward and backward of the joint objective on one shuffled mini-batch.

    total = mean(target losses) + lam * mean(predictor loss), where the
    ranking variant averages over the B/2 consecutive pairs. Gradients are
    accumulated into every parameter; with ``stop_grad`` the predictor term
    does not reach the target model.
    """
    b = len(x)
    if b == 0 or b % 2:
        raise ValueError(f"joint loss needs an even batch, got {b}")
    target, predictor = model_set.target, model_set.predictor
    pred, feats = target.forward(x)
    losses, grad_pred = target_loss_and_grad(pred, y, target.task)
    lhat = predictor.forward(feats)
    lam = schedule.lam

    if schedule.predictor_loss == RANKING:
        pairs = pair_batch(np.arange(b))
        i, j = pairs[:, 0], pairs[:, 1]
        value, gi, gj = ranking_loss_pairs(lhat[i], lhat[j], losses[i], losses[j], schedule.margin)
        mean_pred = float(value.sum()) * 2.0 / b
        grad_lhat = np.zeros(b, dtype=lhat.dtype)
        grad_lhat[i] = gi * (2.0 / b)
        grad_lhat[j] = gj * (2.0 / b)
    else:
        value, grad = mse_ablation_loss(lhat, losses)
        mean_pred = float(value.sum()) / b
        grad_lhat = grad / b
    mean_target = float(losses.sum()) / b

    feature_grads = None
    if lam != 0.0:
        feature_grads = predictor.backward(lam * grad_lhat)
        if stop_grad:
            feature_grads = None
    target.backward(grad_pred / b, feature_grads)
    return JointLoss(mean_target + lam * mean_pred, mean_target, mean_pred, losses, lhat)


def target_only_batch_loss(model_set: ModelSet, x: np.ndarray, y: np.ndarray) -> float:
    """Target term alone, for leftover batches too small or odd to pair."""
    target = model_set.target
    pred, _ = target.forward(x)
    losses, grad_pred = target_loss_and_grad(pred, y, target.task)
    target.backward(grad_pred / len(x))
    return float(losses.sum()) / len(x)


@dataclass
class EpochLog:
    epoch: int
    mean_target_loss: float
    mean_ranking_loss: float
    learning_rate: float
    barrier_active: int


LOG_FIELDS = ["epoch", "mean_target_loss", "mean_ranking_loss", "learning_rate", "barrier_active"]


def append_epoch_log(path: str | Path, rows: Sequence[EpochLog]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow(
                [r.epoch, repr(r.mean_target_loss), repr(r.mean_ranking_loss),
                 repr(r.learning_rate), r.barrier_active]
            )


def effective_batch_size(n: int, batch_size: int) -> int:
    if n >= batch_size:
        return batch_size
    return max(n - n % 2, 1)


def train_model_set(
    model_set: ModelSet,
    x: np.ndarray,
    y: np.ndarray,
    schedule: TrainSchedule,
    rng: np.random.Generator,
    log_path: str | Path | None = None,
) -> tuple[ModelSet, list[EpochLog]]:
    """Shuffled mini-batch SGD on the joint objective.

    Momentum buffers are reset on entry so every call starts a fresh
    schedule from the current (warm) parameters.
    """
    n = len(x)
    if n == 0:
        raise ValueError("cannot train on an empty labeled set")
    params = model_set.params()
    zero_grads(params)
    for p in params:
        p.reset_velocity()
    bsz = effective_batch_size(n, schedule.batch_size)
    stop_epoch = schedule.grad_stop_epoch
    log = []
    for epoch in range(schedule.epochs):
        lr = schedule.learning_rate(epoch)
        cfg = OptimConfig(lr, schedule.optim.momentum, schedule.optim.weight_decay)
        barrier = epoch >= stop_epoch
        order = rng.permutation(n)
        tgt_sum, pred_sum, n_pairs = 0.0, 0.0, 0
        for start in range(0, n, bsz):
            idx = order[start : start + bsz]
            if len(idx) % 2:
                tgt_sum += target_only_batch_loss(model_set, x[idx], y[idx]) * len(idx)
            else:
                res = joint_batch_loss(model_set, x[idx], y[idx], schedule, stop_grad=barrier)
                tgt_sum += res.mean_target * len(idx)
                if schedule.predictor_loss == RANKING:
                    pred_sum += res.mean_predictor * len(idx) / 2
                    n_pairs += len(idx) // 2
                else:
                    pred_sum += res.mean_predictor * len(idx)
                    n_pairs += len(idx)
            sgd_step(params, cfg)
        log.append(
            EpochLog(epoch, tgt_sum / n, pred_sum / n_pairs if n_pairs else 0.0, lr, int(barrier))
        )
    if log_path is not None and log:
        append_epoch_log(log_path, log)
    return model_set, log
