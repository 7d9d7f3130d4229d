"""Per-group evaluation, checkpoint selection, uncertainty KDE and
per-group training curves."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import ModelParams, per_sample_losses, predict
from .data import Dataset
from .training import TrainLog

KDE_GRID_POINTS = 256
KDE_MIN_BANDWIDTH = 0.01


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    per_group_acc: list
    avg_acc: float
    worst_acc: float
    worst_group: int
    n_per_group: list
    group_mean_acc: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(**d)


def report_from_predictions(preds: np.ndarray, labels: np.ndarray, groups: np.ndarray,
                            n_groups: int | None = None) -> EvalReport:
    n_groups = int(groups.max()) + 1 if n_groups is None else n_groups
    counts = np.bincount(groups, minlength=n_groups)
    if np.any(counts == 0):
        raise EvalError(f"groups {np.flatnonzero(counts == 0).tolist()} have no samples")
    correct = (preds == labels).astype(np.float64)
    per_group = np.bincount(groups, weights=correct, minlength=n_groups) / counts
    worst = int(np.argmin(per_group))
    return EvalReport(per_group.tolist(), float(correct.mean()), float(per_group[worst]), worst,
                      counts.tolist(), float(per_group.mean()))


def evaluate(model: ModelParams, dataset: Dataset) -> EvalReport:
    if dataset.groups is None:
        raise EvalError("evaluation needs group labels")
    return report_from_predictions(predict(model, dataset.features), dataset.labels,
                                   dataset.groups, dataset.n_groups)


def average_accuracy(model: ModelParams, dataset: Dataset) -> float:
    return float(np.mean(predict(model, dataset.features) == dataset.labels))


def select_checkpoint(checkpoints, val: Dataset, criterion: str = "worst_group"):
    """Return ``(index, checkpoint, scores)`` maximising the criterion on ``val``.

    Ties go to the earliest epoch.
    """
    if not checkpoints:
        raise EvalError("no checkpoints to select from")
    if criterion == "worst_group":
        if val.groups is None:
            raise EvalError("worst_group selection needs validation group labels; "
                            "use criterion='average' for group-free validation")
        scores = [evaluate(c, val).worst_acc for c in checkpoints]
    elif criterion == "average":
        scores = [average_accuracy(c, val) for c in checkpoints]
    else:
        raise EvalError(f"unknown selection criterion {criterion!r}")
    best = int(np.argmax(scores))
    return best, checkpoints[best], scores


# --------------------------------------------------------------------------
# KDE
# --------------------------------------------------------------------------

@dataclass
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray          # (G, M)
    bandwidth: np.ndarray        # (G,)
    group_mean_u: np.ndarray     # (G,)
    group_sizes: np.ndarray      # (G,)
    reflect: bool = True

    def mass(self) -> np.ndarray:
        return np.trapezoid(self.density, self.grid, axis=1)

    def density_mean(self) -> np.ndarray:
        return np.trapezoid(self.density * self.grid, self.grid, axis=1) / self.mass()

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist(), "density": self.density.tolist(),
                "bandwidth": self.bandwidth.tolist(), "group_mean_u": self.group_mean_u.tolist(),
                "group_sizes": self.group_sizes.tolist(), "reflect": self.reflect}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid"] + [f"density_g{g}" for g in range(len(self.density))])
            for m, x in enumerate(self.grid):
                w.writerow([repr(float(x))] + [repr(float(v)) for v in self.density[:, m]])


def silverman_bandwidth(values: np.ndarray) -> float:
    sd = float(np.std(values, ddof=1))
    return max(1.06 * sd * len(values) ** (-0.2), KDE_MIN_BANDWIDTH)


def gaussian_kde(values: np.ndarray, grid: np.ndarray, bandwidth: float, reflect: bool) -> np.ndarray:
    pts = values
    if reflect:
        pts = np.concatenate([values, -values, 2.0 - values])
    z = (grid[None, :] - pts[:, None]) / bandwidth
    dens = np.exp(-0.5 * z * z).sum(axis=0) / (len(values) * bandwidth * np.sqrt(2 * np.pi))
    return dens


def kde_report(u, groups: np.ndarray, n_groups: int | None = None, reflect: bool = True) -> KdeCurve:
    """Per-group Gaussian KDE of uncertainty scores on a uniform grid over [0, 1].

    With ``reflect`` the kernel mass that would leak past 0 or 1 is folded
    back, so each curve integrates to one over the grid.
    """
    u = np.asarray(getattr(u, "u", u), dtype=np.float64)
    groups = np.asarray(groups)
    n_groups = int(groups.max()) + 1 if n_groups is None else n_groups
    grid = np.linspace(0.0, 1.0, KDE_GRID_POINTS)
    dens, bws, means, sizes = [], [], [], []
    for g in range(n_groups):
        vals = u[groups == g]
        if len(vals) < 2:
            raise EvalError(f"group {g} has {len(vals)} sample(s); KDE needs at least 2")
        bw = silverman_bandwidth(vals)
        dens.append(gaussian_kde(vals, grid, bw, reflect))
        bws.append(bw)
        means.append(vals.mean())
        sizes.append(len(vals))
    return KdeCurve(grid, np.array(dens), np.array(bws), np.array(means), np.array(sizes), reflect)


def ordering_inverse_to_size(curve: KdeCurve, use_density: bool = False) -> bool:
    """True when every strictly smaller group has a strictly larger mean u."""
    means = curve.density_mean() if use_density else curve.group_mean_u
    sizes = curve.group_sizes
    for a in range(len(sizes)):
        for b in range(len(sizes)):
            if sizes[a] < sizes[b] and not means[a] > means[b]:
                return False
    return True


# --------------------------------------------------------------------------
# training curves and generalization gap
# --------------------------------------------------------------------------

def group_curves(log: TrainLog) -> np.ndarray:
    """(G, epochs) matrix of per-group training accuracy."""
    if not log.rows or "acc_g0" not in log.rows[0]:
        raise EvalError("training log was recorded without group labels")
    g = 0
    series = []
    while f"acc_g{g}" in log.rows[0]:
        series.append(log.column(f"acc_g{g}"))
        g += 1
    return np.array(series, dtype=np.float64)


def write_group_curves(log: TrainLog, path) -> None:
    curves = group_curves(log)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"acc_g{g}" for g in range(len(curves))])
        for e in range(curves.shape[1]):
            w.writerow([e] + [repr(float(v)) for v in curves[:, e]])


def epochs_to_reach(curves: np.ndarray, threshold: float) -> np.ndarray:
    """First epoch at which each group's accuracy reaches ``threshold`` (inf if never)."""
    out = np.full(len(curves), np.inf)
    for g, s in enumerate(curves):
        hit = np.flatnonzero(s >= threshold)
        if hit.size:
            out[g] = hit[0]
    return out


def _sample_weights(weight_fn, ds: Dataset) -> np.ndarray:
    if weight_fn is None:
        return np.ones(len(ds))
    if callable(weight_fn):
        return np.asarray(weight_fn(ds), dtype=np.float64)
    w = np.asarray(weight_fn, dtype=np.float64)
    if ds.groups is None:
        raise EvalError("group-level weights need group labels")
    return w[ds.groups]


def estimate_gerror(model: ModelParams, weight_fn, train: Dataset, test: Dataset) -> float:
    """mean_test[w * loss] - mean_train[w * loss]; ``weight_fn`` is a per-group
    weight vector, a callable ``dataset -> per-sample weights`` or None."""
    lt = per_sample_losses(model, test.features, test.labels)
    lr = per_sample_losses(model, train.features, train.labels)
    return float(np.mean(_sample_weights(weight_fn, test) * lt)
                 - np.mean(_sample_weights(weight_fn, train) * lr))
