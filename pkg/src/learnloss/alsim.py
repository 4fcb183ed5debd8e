"""Active-learning simulator: pool bookkeeping, cycle loop, trials and metrics."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from learnloss.acquisition import (
    Strategy,
    predict_entropy,
    predict_losses,
    select,
)
from learnloss.config import ExperimentConfig
from learnloss.data import Dataset, generate, load_cifar10_dir, normalize
from learnloss.lossnet import ModelSet, TrainSchedule, build_model_set, train_model_set
from learnloss.models import (
    CLASSIFICATION,
    build_mlp_classifier,
    build_mlp_regressor,
    target_loss,
)

RANKING_CAP = 2000

# independent RNG streams per trial; every strategy of a trial re-derives the
# same streams, which is what pairs the strategies
STREAM_INIT, STREAM_MODEL, STREAM_TRAIN, STREAM_SELECT, STREAM_EVAL = range(5)


def trial_rng(master_seed: int, trial: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, trial, stream, *extra]))


class PoolExhaustedError(RuntimeError):
    pass


@dataclass
class PoolState:
    size: int
    labeled: np.ndarray
    unlabeled: np.ndarray
    stage: int = 0

    def check(self) -> None:
        both = np.concatenate([self.labeled, self.unlabeled])
        if len(both) != self.size or not np.array_equal(np.sort(both), np.arange(self.size)):
            raise AssertionError("labeled and unlabeled ids do not partition the dataset")

    def moved(self, ids: np.ndarray) -> "PoolState":
        ids = np.asarray(ids, dtype=np.int64)
        keep = ~np.isin(self.unlabeled, ids)
        if keep.sum() != len(self.unlabeled) - len(ids):
            raise ValueError("selected ids must be distinct members of the unlabeled pool")
        return PoolState(
            self.size, np.concatenate([self.labeled, ids]), self.unlabeled[keep], self.stage + 1
        )


class Oracle:
    """Simulated annotator that reveals held-out labels, each at most once."""

    def __init__(self, labels: np.ndarray):
        self._labels = labels
        self._revealed = np.zeros(len(labels), dtype=bool)
        self.count = 0

    def reveal(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids) or self._revealed[ids].any():
            raise ValueError("label already revealed")
        self._revealed[ids] = True
        self.count += len(ids)
        return self._labels[ids]

    def labels(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if not self._revealed[ids].all():
            raise ValueError("label requested for an unannotated sample")
        return self._labels[ids]


def init_labeled(size: int, k: int, rng: np.random.Generator) -> PoolState:
    if not 0 < k <= size:
        raise ValueError(f"cannot label {k} of {size} samples")
    labeled = rng.choice(size, size=k, replace=False).astype(np.int64)
    mask = np.ones(size, dtype=bool)
    mask[labeled] = False
    return PoolState(size, labeled, np.flatnonzero(mask).astype(np.int64), 0)


def ranking_accuracy(predicted: Sequence[float], real: Sequence[float]) -> float:
    """Fraction of pairs with distinct real losses whose predicted order agrees.

    Pairs tied in predicted loss count as wrong.
    """
    p = np.asarray(predicted, dtype=np.float64)
    r = np.asarray(real, dtype=np.float64)
    if p.shape != r.shape or p.ndim != 1:
        raise ValueError("predicted and real losses must be equal-length vectors")
    if len(p) < 2:
        raise ValueError("ranking accuracy needs at least 2 samples")
    iu = np.triu_indices(len(p), k=1)
    sr = np.sign(r[:, None] - r[None, :])[iu]
    sp = np.sign(p[:, None] - p[None, :])[iu]
    valid = sr != 0
    if not valid.any():
        raise ValueError("all real losses are equal; ranking accuracy undefined")
    return float((sp[valid] == sr[valid]).sum() / valid.sum())


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for constant input")
    return float(np.clip((dx * dy).sum() / math.sqrt(sxx * syy), -1.0, 1.0))


def test_losses(model_set: ModelSet, test: Dataset) -> np.ndarray:
    out = np.empty(len(test))
    for start in range(0, len(test), 1024):
        s = slice(start, start + 1024)
        pred, _ = model_set.target.forward(test.x[s])
        out[s] = target_loss(pred, test.y[s], model_set.target.task)
    return out


def test_metric(model_set: ModelSet, test: Dataset) -> float:
    """Accuracy (argmax, ties to the lowest class) or mean per-sample MSE."""
    if len(test) == 0:
        raise ValueError("empty test set")
    if model_set.target.task == CLASSIFICATION:
        correct = 0
        for start in range(0, len(test), 1024):
            s = slice(start, start + 1024)
            logits, _ = model_set.target.forward(test.x[s])
            correct += int((logits.argmax(axis=1) == test.y[s]).sum())
        return correct / len(test)
    return float(test_losses(model_set, test).mean())


# keep pytest from collecting these when tests import them
test_losses.__test__ = False
test_metric.__test__ = False


@dataclass
class Evaluation:
    metric: float
    ranking_accuracy: float
    pearson: float
    pearson_entropy: float
    predicted: np.ndarray
    real: np.ndarray
    entropy: np.ndarray | None


def _or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except ValueError:
        return float("nan")


def evaluate(model_set: ModelSet, test: Dataset, rng: np.random.Generator) -> Evaluation:
    real = test_losses(model_set, test)
    predicted = predict_losses(model_set, test.x)
    entropy = None
    if model_set.target.task == CLASSIFICATION:
        entropy = predict_entropy(model_set.target, test.x)
    sub = np.arange(len(test))
    if len(test) > RANKING_CAP:
        sub = np.sort(rng.choice(len(test), size=RANKING_CAP, replace=False))
    return Evaluation(
        metric=test_metric(model_set, test),
        ranking_accuracy=_or_nan(ranking_accuracy, predicted[sub], real[sub]),
        pearson=_or_nan(pearson, predicted, real),
        pearson_entropy=_or_nan(pearson, entropy, real) if entropy is not None else float("nan"),
        predicted=predicted,
        real=real,
        entropy=entropy,
    )


@dataclass
class CycleRecord:
    stage: int
    labeled_size: int
    test_metric: float
    ranking_accuracy: float
    pearson: float
    pearson_entropy: float
    selected_ids: list[int] = field(default_factory=list)
    seconds: float = 0.0


def _train_eval(state, model_set, oracle, pool, test, schedule, train_rng, eval_rng):
    labeled = state.labeled
    train_model_set(model_set, pool.x[labeled], oracle.labels(labeled), schedule, train_rng)
    return evaluate(model_set, test, eval_rng)


def run_cycle(
    state: PoolState,
    model_set: ModelSet,
    strategy: Strategy,
    schedule: TrainSchedule,
    k: int,
    m: int,
    rngs: dict[str, np.random.Generator],
    oracle: Oracle,
    pool: Dataset,
    test: Dataset,
) -> tuple[PoolState, ModelSet, CycleRecord, Evaluation]:
    """Train on L (warm start), evaluate, then move the next batch of picks into L."""
    if len(state.unlabeled) == 0:
        raise PoolExhaustedError("unlabeled pool is empty")
    t0 = time.perf_counter()
    ev = _train_eval(state, model_set, oracle, pool, test, schedule, rngs["train"], rngs["eval"])
    k = min(k, len(state.unlabeled))
    picked = select(strategy, model_set, pool.x, state.labeled, state.unlabeled, k, m, rngs["select"])
    oracle.reveal(picked)
    new_state = state.moved(picked)
    record = CycleRecord(
        state.stage, len(state.labeled), ev.metric, ev.ranking_accuracy, ev.pearson,
        ev.pearson_entropy, [int(i) for i in picked], time.perf_counter() - t0,
    )
    return new_state, model_set, record, ev


def final_stage(state, model_set, schedule, rngs, oracle, pool, test):
    """Last stage of a run: train and evaluate without selecting."""
    t0 = time.perf_counter()
    ev = _train_eval(state, model_set, oracle, pool, test, schedule, rngs["train"], rngs["eval"])
    record = CycleRecord(
        state.stage, len(state.labeled), ev.metric, ev.ranking_accuracy, ev.pearson,
        ev.pearson_entropy, [], time.perf_counter() - t0,
    )
    return record, ev


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "cifar10":
        pool, test = load_cifar10_dir(ds.path, ds.pool_size, ds.test_size,
                                      np.random.default_rng(ds.seed))
    else:
        pool, test = generate(ds.synth())
    if ds.normalize:
        pool, test = normalize(pool, test)
    if cfg.model.precision == "float32":
        pool = Dataset(pool.x.astype(np.float32), pool.y, pool.task, pool.split, pool.mean, pool.std)
        test = Dataset(test.x.astype(np.float32), test.y, test.task, test.split, test.mean, test.std)
    return pool, test


def build_for(cfg: ExperimentConfig, rng: np.random.Generator) -> ModelSet:
    ds, md = cfg.dataset, cfg.model
    dtype = np.float32 if md.precision == "float32" else np.float64
    if ds.task == CLASSIFICATION:
        target = build_mlp_classifier(ds.input_dim, md.hidden_dims, ds.target_dim, rng, dtype)
    else:
        target = build_mlp_regressor(ds.input_dim, md.hidden_dims, ds.target_dim, rng, dtype)
    return build_model_set(target, rng, md.loss_dim)


@dataclass
class TrialResult:
    strategy: str
    trial: int
    records: list[CycleRecord]
    final: Evaluation
    initial_labeled: np.ndarray
    labels_revealed: int


def run_trial(cfg: ExperimentConfig, strategy_name: str, trial: int,
              data: tuple[Dataset, Dataset] | None = None) -> TrialResult:
    pool, test = data if data is not None else load_data(cfg)
    seed, ac = cfg.seed, cfg.active
    strategy = Strategy(strategy_name)
    strategy.check_task(pool.task)
    schedule = cfg.schedule.for_strategy(strategy_name)
    rngs = {
        "train": trial_rng(seed, trial, STREAM_TRAIN),
        "select": trial_rng(seed, trial, STREAM_SELECT),
        "eval": trial_rng(seed, trial, STREAM_EVAL),
    }
    state = init_labeled(len(pool), min(ac.k, len(pool)), trial_rng(seed, trial, STREAM_INIT))
    initial = state.labeled.copy()
    oracle = Oracle(pool.y)
    oracle.reveal(state.labeled)
    model_set = build_for(cfg, trial_rng(seed, trial, STREAM_MODEL))
    records = []
    for _ in range(ac.cycles):
        if len(state.unlabeled) == 0:
            break
        state, model_set, rec, _ = run_cycle(
            state, model_set, strategy, schedule, ac.k, ac.subset_size, rngs, oracle, pool, test
        )
        records.append(rec)
    rec, ev = final_stage(state, model_set, schedule, rngs, oracle, pool, test)
    records.append(rec)
    return TrialResult(strategy_name, trial, records, ev, initial, oracle.count)


@dataclass
class ExperimentResult:
    strategies: list[str]
    trials: dict[str, list[TrialResult]]

    def summary(self) -> list[dict]:
        return summarize({s: [t.records for t in self.trials[s]] for s in self.strategies})


SUMMARY_METRICS = ("test_metric", "ranking_accuracy", "pearson")


def summarize(records: dict[str, list[list[CycleRecord]]]) -> list[dict]:
    """Per strategy, stage and metric: mean and population std across trials."""
    rows = []
    for strategy, trials in records.items():
        counts = {len(t) for t in trials}
        if len(counts) != 1:
            raise ValueError(f"trials of {strategy} have unequal cycle counts")
        for stage in range(counts.pop()):
            sizes = {t[stage].labeled_size for t in trials}
            for metric in SUMMARY_METRICS:
                vals = np.array([getattr(t[stage], metric) for t in trials], dtype=np.float64)
                rows.append(dict(
                    strategy=strategy, stage=stage, labeled_size=min(sizes), metric=metric,
                    mean=float(vals.mean()), std=float(vals.std()),
                ))
    return rows


def _trial_job(args):
    cfg, strategy, trial, data = args
    return run_trial(cfg, strategy, trial, data)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Every strategy x trial; trials share seeds across strategies."""
    data = load_data(cfg)
    tasks = [(cfg, s, t, data) for s in cfg.strategies for t in range(cfg.active.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_trial_job, tasks))
    else:
        results = [_trial_job(a) for a in tasks]
    by_strategy: dict[str, list[TrialResult]] = {s: [] for s in cfg.strategies}
    for r in results:
        by_strategy[r.strategy].append(r)
    return ExperimentResult(list(cfg.strategies), by_strategy)


# ---- run-record files -------------------------------------------------------

TRIAL_FIELDS = ["stage", "labeled_size", "test_metric", "ranking_accuracy", "pearson",
                "pearson_entropy", "selected_ids"]
SUMMARY_FIELDS = ["strategy", "stage", "labeled_size", "metric", "mean", "std"]
LOSS_FIELDS = ["id", "predicted_loss", "real_loss", "entropy"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trial_csv(path: str | Path, records: Sequence[CycleRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_FIELDS)
        for r in records:
            w.writerow([r.stage, r.labeled_size, _fmt(r.test_metric), _fmt(r.ranking_accuracy),
                        _fmt(r.pearson), _fmt(r.pearson_entropy),
                        ";".join(str(i) for i in r.selected_ids)])


def read_trial_csv(path: str | Path) -> list[CycleRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            ids = row["selected_ids"]
            out.append(CycleRecord(
                int(row["stage"]), int(row["labeled_size"]), float(row["test_metric"]),
                float(row["ranking_accuracy"]), float(row["pearson"]),
                float(row["pearson_entropy"]), [int(i) for i in ids.split(";")] if ids else [],
            ))
    return out


def write_summary_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([r["strategy"], r["stage"], r["labeled_size"], r["metric"],
                        _fmt(r["mean"]), _fmt(r["std"])])


def read_summary_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [
            dict(strategy=r["strategy"], stage=int(r["stage"]), labeled_size=int(r["labeled_size"]),
                 metric=r["metric"], mean=float(r["mean"]), std=float(r["std"]))
            for r in csv.DictReader(fh)
        ]


def write_losses_csv(path: str | Path, ev: Evaluation) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_FIELDS)
        for i in range(len(ev.real)):
            ent = _fmt(ev.entropy[i]) if ev.entropy is not None else ""
            w.writerow([i, _fmt(ev.predicted[i]), _fmt(ev.real[i]), ent])


def read_losses_csv(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {
        "predicted": np.array([float(r["predicted_loss"]) for r in rows]),
        "real": np.array([float(r["real_loss"]) for r in rows]),
    }
    if rows and rows[0]["entropy"]:
        out["entropy"] = np.array([float(r["entropy"]) for r in rows])
    return out


def trial_path(run_dir: str | Path, strategy: str, trial: int) -> Path:
    return Path(run_dir) / strategy / f"trial{trial}.csv"


def losses_path(run_dir: str | Path, strategy: str, trial: int) -> Path:
    return Path(run_dir) / strategy / f"trial{trial}_final_losses.csv"


def write_result(run_dir: str | Path, result: ExperimentResult) -> dict[str, list[str]]:
    """Write per-trial records, final-stage losses and the summary; return paths."""
    run_dir = Path(run_dir)
    paths: dict[str, list[str]] = {}
    for s in result.strategies:
        (run_dir / s).mkdir(parents=True, exist_ok=True)
        paths[s] = []
        for tr in result.trials[s]:
            p = trial_path(run_dir, s, tr.trial)
            write_trial_csv(p, tr.records)
            write_losses_csv(losses_path(run_dir, s, tr.trial), tr.final)
            paths[s].append(str(p.relative_to(run_dir)))
    write_summary_csv(run_dir / "summary.csv", result.summary())
    return paths
