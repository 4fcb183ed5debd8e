"""Synthetic pools, the CIFAR-10 binary reader and feature normalization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from learnloss.models import CLASSIFICATION, REGRESSION

POOL = "train-pool"
TEST = "test"

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    task: str
    split: str = POOL
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.x))

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    @property
    def output_dim(self) -> int:
        return 1 if self.y.ndim == 1 else self.y.shape[1]


@dataclass(frozen=True)
class SynthConfig:
    """Parameters for the synthetic generators.

    ``hetero_scale`` > 0 turns on heteroscedastic noise for the sine task:
    noise std is ``noise * (1 + hetero_scale * |x| / x_max)``.
    """

    kind: str = "gaussian_mixture"
    num_classes: int = 4
    output_dim: int = 1
    pool_size: int = 2000
    test_size: int = 1000
    noise: float = 1.0
    radius: float = 2.0
    dim: int = 2
    x_max: float = 3.0
    frequency: float = 1.0
    hetero_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_mixture", "sine_regression"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.pool_size < 1 or self.test_size < 1:
            raise ValueError("pool_size and test_size must be positive")
        if not self.noise >= 0:
            raise ValueError("noise must be nonnegative")
        if self.kind == "gaussian_mixture" and (self.num_classes < 2 or self.dim < 2):
            raise ValueError("gaussian_mixture needs num_classes >= 2 and dim >= 2")
        if self.kind == "sine_regression" and (self.output_dim < 1 or self.x_max <= 0):
            raise ValueError("sine_regression needs output_dim >= 1 and x_max > 0")
        if self.hetero_scale < 0:
            raise ValueError("hetero_scale must be nonnegative")


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def gen_gaussian_mixture(cfg: SynthConfig, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussians centred on a circle of radius ``cfg.radius``.

    For ``dim > 2`` the circle is embedded in the first two axes and then
    rotated by a random orthogonal matrix.
    """
    c = cfg.num_classes
    angles = 2.0 * np.pi * np.arange(c) / c
    means = np.zeros((c, cfg.dim))
    means[:, 0] = cfg.radius * np.cos(angles)
    means[:, 1] = cfg.radius * np.sin(angles)
    if cfg.dim > 2:
        q, r = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.dim)))
        means = means @ (q * np.sign(np.diag(r)))

    def draw(n: int, split: str) -> Dataset:
        y = _balanced_labels(n, c, rng)
        x = means[y] + cfg.noise * rng.standard_normal((n, cfg.dim))
        return Dataset(x, y.astype(np.int64), CLASSIFICATION, split)

    return draw(cfg.pool_size, POOL), draw(cfg.test_size, TEST)


def sine_noise_std(x: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    return cfg.noise * (1.0 + cfg.hetero_scale * np.abs(x) / cfg.x_max)


def gen_sine_regression(cfg: SynthConfig, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """y_d = sin(frequency * x + d * pi / D) + noise, x ~ U(-x_max, x_max)."""
    d = cfg.output_dim
    phase = np.pi * np.arange(d) / d

    def draw(n: int, split: str) -> Dataset:
        x = rng.uniform(-cfg.x_max, cfg.x_max, size=(n, 1))
        clean = np.sin(cfg.frequency * x + phase)
        y = clean + sine_noise_std(x, cfg) * rng.standard_normal((n, d))
        return Dataset(x, y, REGRESSION, split)

    return draw(cfg.pool_size, POOL), draw(cfg.test_size, TEST)


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "gaussian_mixture":
        return gen_gaussian_mixture(cfg, rng)
    return gen_sine_regression(cfg, rng)


class CifarFormatError(ValueError):
    pass


def parse_cifar10(buf: bytes, split: str = POOL) -> Dataset:
    """Decode 3073-byte records: label byte, then R, G, B planes of 32x32."""
    if len(buf) % CIFAR_RECORD:
        raise CifarFormatError(
            f"file size {len(buf)} is not a multiple of {CIFAR_RECORD} bytes"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise CifarFormatError(f"label byte {labels.max()} exceeds 9")
    x = raw[:, 1:].astype(np.float64) / 255.0
    return Dataset(x, labels, CLASSIFICATION, split)


def load_cifar10(paths: str | Path | Sequence[str | Path], split: str = POOL) -> Dataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = [parse_cifar10(Path(p).read_bytes(), split) for p in paths]
    return Dataset(
        np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
        CLASSIFICATION, split,
    )


def cifar10_bytes(ds: Dataset) -> bytes:
    """Inverse of ``parse_cifar10`` for unnormalized [0, 1] pixel data."""
    if ds.x.shape[1] != CIFAR_PIXELS:
        raise CifarFormatError("dataset rows are not 3072-pixel CIFAR images")
    pixels = np.rint(ds.x * 255.0)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise CifarFormatError("pixel values outside [0, 1]")
    out = np.empty((len(ds), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = ds.y
    out[:, 1:] = pixels.astype(np.uint8)
    return out.tobytes()


def load_cifar10_dir(
    root: str | Path, pool_size: int, test_size: int, rng: np.random.Generator
) -> tuple[Dataset, Dataset]:
    """Load the standard batch files and subsample pool and test splits."""
    root = Path(root)
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {root}")
    pool = load_cifar10(train_files, POOL)
    test = load_cifar10(test_file, TEST)

    def sub(ds: Dataset, n: int) -> Dataset:
        if n >= len(ds):
            return ds
        keep = np.sort(rng.choice(len(ds), size=n, replace=False))
        return Dataset(ds.x[keep], ds.y[keep], ds.task, ds.split)

    return sub(pool, pool_size), sub(test, test_size)


def normalize(pool: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Standardize every dataset with per-dimension stats from ``pool``.

    Constant pool dimensions are centred but not scaled.
    """
    mean = pool.x.mean(axis=0)
    std = pool.x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return tuple(
        replace(ds, x=(ds.x - mean) / scale, mean=mean, std=std) for ds in (pool, *others)
    )


def export_csv(ds: Dataset, path: str | Path) -> None:
    y = ds.y if ds.y.ndim == 2 else ds.y[:, None]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", *(f"x{i}" for i in range(ds.x.shape[1])), *(f"y{i}" for i in range(y.shape[1]))]
        )
        for i in range(len(ds)):
            writer.writerow([i, *map(repr, ds.x[i].tolist()), *map(repr, y[i].tolist())])
