"""Perceptron target models that expose mid-level features for loss prediction."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from learnloss.nncore import (
    Linear,
    ParamBlock,
    mse,
    relu,
    relu_backward,
    softmax_xent,
)

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)


class TargetModel:
    """Stack of (linear -> relu) blocks plus a linear head.

    A feature tap sits after the ReLU of every hidden block, so the returned
    feature list runs shallow to deep and has one entry per block.
    """

    def __init__(
        self,
        task: str,
        input_dim: int,
        hidden_dims: Sequence[int],
        output_dim: int,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if len(hidden_dims) < 2:
            raise ValueError("a target model needs at least 2 hidden blocks")
        if input_dim < 1 or output_dim < 1 or min(hidden_dims) < 1:
            raise ValueError("layer widths must be positive")
        self.task = task
        self.dtype = dtype
        dims = [input_dim, *hidden_dims]
        self.blocks = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.head = Linear(dims[-1], output_dim, rng, dtype)
        self._pre: list[np.ndarray] = []

    @property
    def input_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.head.out_dim

    @property
    def tap_count(self) -> int:
        return len(self.blocks)

    @property
    def tap_dims(self) -> list[int]:
        return [b.out_dim for b in self.blocks]

    def params(self) -> list[ParamBlock]:
        out = []
        for layer in [*self.blocks, self.head]:
            out.extend(layer.params())
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected input of shape (batch, {self.input_dim}), got {x.shape}"
            )
        self._pre = []
        features = []
        h = x
        for block in self.blocks:
            z = block.forward(h)
            self._pre.append(z)
            h = relu(z)
            features.append(h)
        return self.head.forward(h), features

    def backward(
        self, grad_out: np.ndarray, feature_grads: Sequence[np.ndarray] | None = None
    ) -> None:
        """Backpropagate the head gradient plus optional gradients on each tap."""
        if not self._pre:
            raise RuntimeError("backward called before forward")
        if feature_grads is not None and len(feature_grads) != self.tap_count:
            raise ValueError("need one feature gradient per tap")
        g = self.head.backward(grad_out)
        for i in reversed(range(self.tap_count)):
            if feature_grads is not None:
                g = g + feature_grads[i]
            g = relu_backward(g, self._pre[i])
            g = self.blocks[i].backward(g)


def build_mlp_classifier(
    input_dim: int, hidden_dims: Sequence[int], num_classes: int, rng, dtype=np.float64
) -> TargetModel:
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    return TargetModel(CLASSIFICATION, input_dim, hidden_dims, num_classes, rng, dtype)


def build_mlp_regressor(
    input_dim: int, hidden_dims: Sequence[int], output_dim: int, rng, dtype=np.float64
) -> TargetModel:
    return TargetModel(REGRESSION, input_dim, hidden_dims, output_dim, rng, dtype)


def target_forward(model: TargetModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    return model.forward(x)


def target_loss_and_grad(
    pred: np.ndarray, y: np.ndarray, task: str
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample target losses and d loss_i / d pred_i."""
    y = np.asarray(y)
    if task == CLASSIFICATION:
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise ValueError("classification targets must be a 1-D array of class indices")
        return softmax_xent(pred, y)
    if task == REGRESSION:
        if y.ndim == 1:
            y = y[:, None]
        if not np.issubdtype(y.dtype, np.floating):
            raise ValueError("regression targets must be real-valued")
        return mse(pred, y)
    raise ValueError(f"unknown task {task!r}")


def target_loss(pred: np.ndarray, y: np.ndarray, task: str) -> np.ndarray:
    return target_loss_and_grad(pred, y, task)[0]


# Checkpoint layout (all little-endian):
#   b"LRNK", u32 version, u64 tensor count,
#   per tensor: u32 rank, u64 * rank extents, f64 * prod(extents) values
MAGIC = b"LRNK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path: str | Path, params: Sequence[ParamBlock]) -> None:
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(params))]
    for p in params:
        shape = p.value.shape
        chunks.append(struct.pack("<I", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}Q", *shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic, not an LRNK checkpoint")
    try:
        version, count = struct.unpack_from("<IQ", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 16
        tensors = []
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if off + 8 * n > len(buf):
                raise CheckpointError("truncated checkpoint")
            tensors.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape))
            off += 8 * n
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if off != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def load_params(path: str | Path, params: Sequence[ParamBlock]) -> None:
    tensors = read_checkpoint(path)
    if len(tensors) != len(params):
        raise CheckpointError(
            f"checkpoint has {len(tensors)} tensors, model expects {len(params)}"
        )
    for p, t in zip(params, tensors):
        if t.shape != p.value.shape:
            raise CheckpointError(f"tensor shape {t.shape} != parameter shape {p.value.shape}")
    for p, t in zip(params, tensors):
        p.value[...] = t
