"""Delimited reports and figures for training runs and experiments."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from cajump.training import ConditionResult, EpochRecord, Metrics


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(rows: Sequence[tuple[str, Metrics]], path) -> None:
    """One row per condition: top-1, top-3, sample count and per-class recall."""
    ncls = rows[0][1].confusion.shape[0] if rows else 10
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "top1", "top3", "samples", *[f"recall_{k}" for k in range(ncls)]])
        for name, m in rows:
            w.writerow([name, _fmt(m.top1), _fmt(m.top3), m.total, *map(_fmt, m.per_class_recall)])


def write_confusion_csv(metrics: Metrics, path) -> None:
    """Rows are true classes, columns predicted classes."""
    ncls = metrics.confusion.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *range(ncls)])
        for k, row in enumerate(metrics.confusion):
            w.writerow([k, *row.tolist()])


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_top1"])
        for rec in history:
            w.writerow([rec.epoch, _fmt(rec.train_loss), _fmt(rec.val_top1)])


def read_history_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_top1"])) for r in csv.DictReader(fh)]


def metrics_table(rows: Sequence[tuple[str, Metrics]]) -> str:
    width = max([len("condition"), *(len(n) for n, _ in rows)])
    lines = [f"{'condition':<{width}}  {'top1':>7}  {'top3':>7}  {'n':>6}"]
    for name, m in rows:
        lines.append(f"{name:<{width}}  {100 * m.top1:7.2f}  {100 * m.top3:7.2f}  {m.total:6d}")
    return "\n".join(lines)


def confusion_table(metrics: Metrics) -> str:
    c = metrics.confusion
    cell = max(3, len(str(c.max())))
    head = " " * 6 + "".join(f"{k:>{cell + 1}}" for k in range(c.shape[1]))
    body = [f"{k:>4} |" + "".join(f"{v:>{cell + 1}}" for v in row) for k, row in enumerate(c)]
    return "\n".join(["true \\ predicted", head, *body])


def write_experiment(results: Sequence[ConditionResult], out_dir, figures: bool = False) -> list[Path]:
    """Write metrics, per-condition confusion and history CSVs (plus PNGs if asked)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(r.condition, r.metrics) for r in results]
    written = [out / "metrics.csv"]
    write_metrics_csv(rows, written[0])
    for r in results:
        p = out / f"confusion_{r.condition}.csv"
        write_confusion_csv(r.metrics, p)
        h = out / f"history_{r.condition}.csv"
        write_history_csv(r.history, h)
        written += [p, h]
    if figures:
        written.append(plot_accuracy(rows, out / "accuracy.png"))
        for r in results:
            written.append(plot_confusion(r.metrics, out / f"confusion_{r.condition}.png", title=r.condition))
            written.append(plot_history(r.history, out / f"history_{r.condition}.png", title=r.condition))
    return written


# figures -------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_confusion(metrics: Metrics, path, title: str | None = None) -> Path:
    plt = _pyplot()
    c = metrics.confusion
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    im = ax.imshow(c, cmap="Blues")
    for (i, j), v in np.ndenumerate(c):
        if v:
            ax.text(j, i, str(v), ha="center", va="center", fontsize=7, color="white" if v > c.max() / 2 else "black")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_xticks(range(c.shape[1]))
    ax.set_yticks(range(c.shape[0]))
    ax.set_title(title or f"top-1 {100 * metrics.top1:.1f}%")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_accuracy(rows: Sequence[tuple[str, Metrics]], path) -> Path:
    plt = _pyplot()
    names = [n for n, _ in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows) + 1.5), 3.6))
    ax.bar(x - 0.2, [100 * m.top1 for _, m in rows], 0.4, label="top-1")
    ax.bar(x + 0.2, [100 * m.top3 for _, m in rows], 0.4, label="top-3")
    ax.axhline(10, color="0.5", lw=0.8, ls="--")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_history(history: Sequence[EpochRecord], path, title: str | None = None) -> Path:
    plt = _pyplot()
    ep = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    ax.plot(ep, [h.train_loss for h in history], "o-", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [100 * h.val_top1 for h in history], "s-", ms=3, color="C1", label="val top-1")
    ax2.set_ylabel("val top-1 (%)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_lattice(grid, path, title: str | None = None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.asarray(grid), cmap="gray_r", vmin=0, vmax=1, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
