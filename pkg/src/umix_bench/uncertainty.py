"""Trajectory-based training uncertainty and the importance weights built from it.

An ERM run records the predicted class of every training sample after each
epoch.  A sample's uncertainty is the fraction of epochs in the window
``[T_s, T_s + T)`` (0-based, exactly ``T`` epochs) in which it was
misclassified, and its weight is ``eta * u + c``.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import predict
from .data import Dataset
from .training import (ConfigError, TrainConfig, config_hash, run_training,
                       weighted_ce_objective)


class FingerprintMismatch(ValueError):
    pass


class WindowError(ValueError):
    pass


@dataclass
class PredictionTrace:
    preds: np.ndarray          # (E, n) predicted classes
    epoch_ids: np.ndarray      # (E,) strictly increasing
    dataset_fingerprint: str
    seed: int | None = None
    config_hash: str | None = None

    def __post_init__(self):
        self.preds = np.asarray(self.preds, dtype=np.int32)
        if self.preds.ndim != 2:
            raise ValueError("trace must be an epochs x samples matrix")
        self.epoch_ids = np.asarray(self.epoch_ids, dtype=np.int64)
        if self.epoch_ids.shape != (self.preds.shape[0],):
            raise ValueError("one epoch id per trace row required")
        if np.any(np.diff(self.epoch_ids) <= 0):
            raise ValueError("epoch ids must be strictly increasing")
        if self.preds.size and self.preds.min() < 0:
            raise ValueError("negative class index in trace")

    @property
    def shape(self):
        return self.preds.shape

    def save(self, path) -> None:
        """``<path>.npy`` holds the matrix, ``<path>.json`` the sidecar."""
        path = Path(path)
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, self.preds)
        os.replace(tmp, path.with_suffix(".npy"))
        side = {"epoch_ids": self.epoch_ids.tolist(), "dataset_fingerprint": self.dataset_fingerprint,
                "seed": self.seed, "config_hash": self.config_hash}
        _atomic_text(path.with_suffix(".json"), json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PredictionTrace":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        return cls(np.load(path.with_suffix(".npy")), side["epoch_ids"],
                   side["dataset_fingerprint"], side.get("seed"), side.get("config_hash"))


@dataclass
class UncertaintyScores:
    u: np.ndarray
    window: tuple
    dataset_fingerprint: str | None = None


@dataclass
class ImportanceWeights:
    w: np.ndarray
    eta: float
    c: float
    u: np.ndarray | None = None
    window: tuple | None = None
    dataset_fingerprint: str | None = None

    def __len__(self):
        return len(self.w)

    def check_dataset(self, dataset: Dataset) -> None:
        if len(self.w) != len(dataset):
            raise FingerprintMismatch(f"{len(self.w)} weights for {len(dataset)} samples")
        if self.dataset_fingerprint is not None and self.dataset_fingerprint != dataset.fingerprint():
            raise FingerprintMismatch(
                f"weights were computed for dataset {self.dataset_fingerprint}, "
                f"not {dataset.fingerprint()}")

    def save(self, path) -> None:
        """CSV ``index,u,w`` plus a JSON sidecar."""
        path = Path(path)
        tmp = path.with_suffix(".tmp.csv")
        u = self.u if self.u is not None else np.full(len(self.w), np.nan)
        with open(tmp, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "u", "w"])
            for i, (ui, wi) in enumerate(zip(u, self.w)):
                wr.writerow([i, repr(float(ui)), repr(float(wi))])
        os.replace(tmp, path.with_suffix(".csv"))
        side = {"eta": self.eta, "c": self.c,
                "T_s": None if self.window is None else self.window[0],
                "T": None if self.window is None else self.window[1],
                "dataset_fingerprint": self.dataset_fingerprint}
        _atomic_text(path.with_suffix(".json"), json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ImportanceWeights":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        us, ws = [], []
        with open(path.with_suffix(".csv"), newline="") as fh:
            rd = csv.reader(fh)
            next(rd)
            for row in rd:
                us.append(float(row[1]))
                ws.append(float(row[2]))
        window = None if side["T_s"] is None else (side["T_s"], side["T"])
        return cls(np.array(ws), side["eta"], side["c"], np.array(us), window,
                   side["dataset_fingerprint"])


def _atomic_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def check_window(cfg: TrainConfig) -> None:
    if cfg.epochs < cfg.T_s + cfg.T:
        raise ConfigError(f"epochs={cfg.epochs} < T_s + T = {cfg.T_s + cfg.T}; "
                          "the uncertainty window would run past the end of training")


def train_erm_with_trace(dataset: Dataset, cfg: TrainConfig):
    """Unweighted ERM that records full-train-set predictions after every epoch.

    Returns ``(params, trace)``.
    """
    check_window(cfg)
    res = run_training(dataset, cfg, weighted_ce_objective(), record_trace=True)
    trace = PredictionTrace(res.trace, np.arange(res.trace.shape[0]), dataset.fingerprint(),
                            cfg.seed, config_hash(cfg))
    return res.params, trace


def compute_uncertainty(trace: PredictionTrace, labels, T_s: int, T: int) -> UncertaintyScores:
    labels = np.asarray(labels)
    if T < 1 or T_s < 0:
        raise WindowError(f"need T >= 1 and T_s >= 0, got T_s={T_s}, T={T}")
    if labels.shape != (trace.preds.shape[1],):
        raise ValueError(f"{labels.shape[0]} labels for a trace over {trace.preds.shape[1]} samples")
    pos = np.searchsorted(trace.epoch_ids, np.arange(T_s, T_s + T))
    ok = (pos < len(trace.epoch_ids)) & (trace.epoch_ids[np.minimum(pos, len(trace.epoch_ids) - 1)]
                                         == np.arange(T_s, T_s + T))
    if not ok.all():
        raise WindowError(f"window needs epochs {T_s}..{T_s + T - 1}, trace has "
                          f"{len(trace.epoch_ids)} epochs "
                          f"({trace.epoch_ids[0] if len(trace.epoch_ids) else '-'}"
                          f"..{trace.epoch_ids[-1] if len(trace.epoch_ids) else '-'})")
    wrong = trace.preds[pos] != labels[None, :]
    u = wrong.sum(axis=0) / T
    return UncertaintyScores(u, (T_s, T), trace.dataset_fingerprint)


def compute_weights(scores: UncertaintyScores, eta: float, c: float = 1.0) -> ImportanceWeights:
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if not c > 0:
        raise ValueError(f"c must be positive so every weight stays positive, got {c}")
    u = np.asarray(scores.u, dtype=np.float64)
    return ImportanceWeights(eta * u + c, float(eta), float(c), u, scores.window,
                             scores.dataset_fingerprint)


def compute_uncertainty_ensemble(dataset: Dataset, cfg: TrainConfig, T: int) -> UncertaintyScores:
    """Fraction of ``T`` independently seeded ERM models that misclassify each sample."""
    if T < 1:
        raise ValueError("T must be >= 1")
    wrong = np.zeros(len(dataset), dtype=np.int64)
    for t in range(T):
        res = run_training(dataset, cfg.replace(seed=cfg.seed + t), weighted_ce_objective())
        wrong += predict(res.params, dataset.features) != dataset.labels
    return UncertaintyScores(wrong / T, (0, T), dataset.fingerprint())


def weights_pipeline(dataset: Dataset, cfg: TrainConfig) -> tuple:
    """Algorithm-2 end to end: ERM trace -> uncertainty -> weights."""
    _, trace = train_erm_with_trace(dataset, cfg)
    scores = compute_uncertainty(trace, dataset.labels, cfg.T_s, cfg.T)
    return compute_weights(scores, cfg.eta, cfg.c), trace
