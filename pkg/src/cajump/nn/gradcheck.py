"""Central-difference verification of back-propagated parameter gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cajump.nn.functional import sparse_ce_loss
from cajump.nn.model import Model

# gradients smaller than this are compared absolutely; central-difference
# rounding noise at h=1e-5 is ~1e-11, far below it
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    checked: int
    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max relative error {self.max_rel_error:.3e} ({self.worst_param}) "
            f"over {self.checked} entries, tolerance {self.tolerance:g}"
        )


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), GRAD_FLOOR)


def loss_and_grads(model: Model, x, labels):
    probs = model.forward(x, train=True, update_stats=False)
    loss, dlogits = sparse_ce_loss(probs, labels)
    return loss, model.backward(dlogits)


def _loss(model, x, labels):
    return sparse_ce_loss(model.forward(x, train=True, update_stats=False), labels)[0]


def gradient_check(
    model: Model, x, labels, h: float = 1e-5, tolerance: float = 1e-4, max_entries=None, directions=0, seed=0
):
    """Compare backprop against central differences of the batch loss.

    Batch-norm layers use batch statistics without touching running stats.
    ``max_entries`` caps the entries checked per parameter tensor (random
    subset); ``None`` checks every entry. ``directions`` adds that many
    random-direction probes perturbing all parameters at once, so entries
    skipped by the subset still take part in the comparison.
    """
    _, grads = loss_and_grads(model, x, labels)
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    per_param = {}
    for name in sorted(model.params):
        p = model.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for k, j in enumerate(idx):
            old = flat[j]
            flat[j] = old + h
            up = _loss(model, x, labels)
            flat[j] = old - h
            down = _loss(model, x, labels)
            flat[j] = old
            numeric[k] = (up - down) / (2 * h)
        err = float(relative_error(grads[name].reshape(-1)[idx], numeric).max()) if idx.size else 0.0
        per_param[name] = err
        checked += idx.size
        if err >= worst:
            worst, worst_name = err, name
    names = sorted(model.params)
    for k in range(directions):
        vec = {n: rng.standard_normal(model.params[n].shape) for n in names}
        norm = np.sqrt(sum(float((v * v).sum()) for v in vec.values()))
        analytic = sum(float((grads[n] * vec[n]).sum()) for n in names) / norm
        saved = {n: model.params[n].copy() for n in names}
        for n in names:
            model.params[n] += h * vec[n] / norm
        up = _loss(model, x, labels)
        for n in names:
            model.params[n] = saved[n] - h * vec[n] / norm
        down = _loss(model, x, labels)
        for n in names:
            model.params[n] = saved[n]
        err = float(relative_error(analytic, (up - down) / (2 * h)))
        per_param[f"direction{k}"] = err
        checked += 1
        if err >= worst:
            worst, worst_name = err, f"direction{k}"
    return GradCheckReport(worst, worst_name, checked, tolerance, per_param)
