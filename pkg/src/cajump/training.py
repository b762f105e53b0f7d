"""Training loop, metrics and experiment drivers."""
from __future__ import annotations

import hashlib
import logging
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from cajump.dataset import NUM_CLASSES, DatasetFile, split
from cajump.nn import checkpoint
from cajump.nn.functional import sparse_ce_loss
from cajump.nn.model import BatchNorm, Model, ModelConfig
from cajump.nn.optim import AdamState, NonFiniteError, adam_step
from cajump.rng import make_rng, mix_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    # recompute batch-norm population statistics on the training set after every epoch
    recalibrate: bool = True
    precision: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batch normalisation, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class Metrics:
    top1: float
    top3: float
    confusion: np.ndarray
    loss: float = float("nan")

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def per_class_recall(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        diag = np.diag(self.confusion).astype(np.float64)
        return np.divide(diag, rows, out=np.zeros(len(rows)), where=rows > 0)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_top1: float


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    history: list[EpochRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def save(self, path) -> None:
        checkpoint.save(path, self.model, self.metadata, self.adam)


def as_input(samples) -> np.ndarray:
    """Stack equally sized grids into an (N, 1, H, W) float64 batch."""
    return np.stack([s.grid for s in samples]).astype(np.float64)[:, None]


def make_batches(dataset: DatasetFile, batch_size: int, seed: int, shuffle: bool = True) -> list[np.ndarray]:
    """Index batches that never mix resolutions.

    Each resolution group is shuffled and cut into batches (the last one may be
    short); the batches of all groups are then shuffled together.
    """
    rng = make_rng(seed)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        groups.setdefault(s.grid.shape, []).append(i)
    batches = []
    for shape in sorted(groups):
        idx = np.array(groups[shape], dtype=np.int64)
        if shuffle:
            idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[a : a + batch_size] for a in range(0, len(idx), batch_size))
    if shuffle:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def topk_accuracy(probs, labels, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` largest entries (lower index wins ties)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if k < 1 or k > probs.shape[1]:
        raise ValueError(f"k must lie in 1..{probs.shape[1]}, got {k}")
    if len(labels) == 0:
        return 0.0
    ranked = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float((ranked == labels[:, None]).any(axis=1).mean())


def metrics_from_probs(probs, labels, num_classes: int = NUM_CLASSES) -> Metrics:
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argsort(-probs, axis=1, kind="stable")[:, 0]
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    loss = sparse_ce_loss(probs, labels)[0]
    return Metrics(topk_accuracy(probs, labels, 1), topk_accuracy(probs, labels, 3), confusion, loss)


def predict(model: Model, dataset: DatasetFile, batch_size: int = 128) -> np.ndarray:
    """Inference-mode class probabilities, rows aligned with ``dataset``."""
    out = np.zeros((len(dataset), model.config.num_classes))
    for idx in make_batches(dataset, batch_size, seed=0, shuffle=False):
        out[idx] = model.forward(as_input([dataset.samples[i] for i in idx]))
    return out


def evaluate(model: Model, dataset: DatasetFile) -> Metrics:
    return metrics_from_probs(predict(model, dataset), dataset.labels, model.config.num_classes)


def recalibrate_batchnorm(model: Model, dataset: DatasetFile, batch_size: int = 64) -> None:
    """Set batch-norm running statistics to the exact population moments over ``dataset``.

    Layers are visited in order, each seeing inputs produced in inference mode
    with the already recalibrated layers before it. Weights are untouched.
    Exponential running averages lag the weights during training; these do not.
    """
    if not model.buffers or len(dataset) == 0:
        return
    batches = make_batches(dataset, batch_size, seed=0, shuffle=False)
    for i, spec in enumerate(model.config.layers):
        if not isinstance(spec, BatchNorm):
            continue
        count, s1, s2 = 0, 0.0, 0.0
        for idx in batches:
            x = model.forward(as_input([dataset.samples[j] for j in idx]), upto=i)
            axes = (0, 2, 3) if x.ndim == 4 else (0,)
            count += x.size // x.shape[1]
            s1 = s1 + x.sum(axis=axes, dtype=np.float64)
            s2 = s2 + np.square(x, dtype=np.float64).sum(axis=axes)
        mean = s1 / count
        model.buffers[f"{i}.running_mean"] = mean.astype(model.dtype)
        model.buffers[f"{i}.running_var"] = np.maximum(s2 / count - mean * mean, 0.0).astype(model.dtype)


def train(
    model: Model,
    train_set: DatasetFile,
    val_set: DatasetFile | None,
    config: TrainConfig,
    on_epoch=None,
) -> TrainResult:
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    model.astype(config.precision)
    adam = AdamState(lr=config.lr)
    result = TrainResult(model, adam, metadata={"seed": config.seed, "lr": config.lr, "precision": config.precision})
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(train_set, config.batch_size, mix_seed(config.seed, epoch), config.shuffle)
        total, seen = 0.0, 0
        for b, idx in enumerate(batches):
            if len(idx) < 2:
                log.debug("epoch %d: skipping single-sample batch %d", epoch, b)
                continue
            x = as_input([train_set.samples[i] for i in idx])
            y = train_set.labels[idx]
            probs = model.forward(x, train=True)
            loss, dlogits = sparse_ce_loss(probs, y)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss in epoch {epoch}, batch {b}")
            adam_step(model.params, model.backward(dlogits), adam)
            total += loss * len(idx)
            seen += len(idx)
        if config.recalibrate:
            recalibrate_batchnorm(model, train_set, config.batch_size)
        val_top1 = evaluate(model, val_set).top1 if val_set is not None and len(val_set) else float("nan")
        rec = EpochRecord(epoch, total / max(seen, 1), val_top1)
        result.history.append(rec)
        log.info("epoch %d/%d  train_loss %.4f  val_top1 %.4f", epoch, config.epochs, rec.train_loss, val_top1)
        if on_epoch is not None:
            on_epoch(rec)
    result.metadata["epoch"] = config.epochs
    return result


def dataset_hash(dataset: DatasetFile) -> str:
    return hashlib.sha256(dataset.to_bytes()).hexdigest()[:16]


def fit(dataset_train, dataset_val, config: TrainConfig, model_config: ModelConfig | None = None) -> TrainResult:
    """Build a freshly seeded model and train it."""
    model = Model(model_config or ModelConfig.default(), seed=mix_seed(config.seed, 0xC0DE))
    result = train(model, dataset_train, dataset_val, config)
    result.metadata["dataset"] = dataset_hash(dataset_train)
    return result


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} / {platform.system()}"


def measure_inference(model: Model, dataset: DatasetFile, batch_size: int = 128) -> dict:
    start = time.perf_counter()
    if len(dataset):
        predict(model, dataset, batch_size)
    seconds = time.perf_counter() - start
    n = len(dataset)
    return {
        "samples": n,
        "seconds": seconds,
        "samples_per_sec": n / seconds if n and seconds > 0 else 0.0,
        "seconds_per_sample": seconds / n if n else 0.0,
        "hardware": hardware_descriptor(),
    }


@dataclass
class ConditionResult:
    condition: str
    metrics: Metrics
    history: list[EpochRecord]
    n: int | None = None
    iterations: int | None = None


def run_experiment(
    datasets: dict[str, DatasetFile],
    config: TrainConfig,
    combined: bool = True,
    fractions=(0.8, 0.1, 0.1),
    model_config: ModelConfig | None = None,
) -> list[ConditionResult]:
    """Train and test one model per named dataset, plus one on their union.

    Each condition is split with the same seed; the combined model trains on
    the union of the training parts and is tested on the union of test parts.
    """
    parts = {name: split(ds, fractions, seed=config.seed) for name, ds in datasets.items()}
    results = []
    for name, (tr, va, te) in parts.items():
        log.info("condition %s: %d train / %d val / %d test", name, len(tr), len(va), len(te))
        res = fit(tr, va, config, model_config)
        first = tr.samples[0]
        results.append(ConditionResult(name, evaluate(res.model, te), res.history, first.n, first.iterations))
    if combined and len(datasets) > 1:
        merged = [DatasetFile([s for p in parts.values() for s in p[k].samples]) for k in range(3)]
        res = fit(merged[0], merged[1], config, model_config)
        results.append(ConditionResult("combined", evaluate(res.model, merged[2]), res.history))
    return results


def trend_flags(results: list[ConditionResult]) -> dict[str, bool]:
    """Monotone accuracy in domain size; flattening (<= 5 points) between the two largest iteration counts."""
    flags = {}
    by_n = {}
    by_t = {}
    for r in results:
        if r.n is not None:
            by_n.setdefault(r.iterations, {})[r.n] = r.metrics.top1
            by_t.setdefault(r.n, {})[r.iterations] = r.metrics.top1
    for t, row in by_n.items():
        if len(row) > 1:
            vals = [row[n] for n in sorted(row)]
            flags[f"monotone_in_n@t{t}"] = all(a <= b for a, b in zip(vals, vals[1:]))
    for n, row in by_t.items():
        if len(row) > 2:
            ts = sorted(row)
            flags[f"flattening_in_t@n{n}"] = abs(row[ts[-1]] - row[ts[-2]]) <= 0.05
    return flags
