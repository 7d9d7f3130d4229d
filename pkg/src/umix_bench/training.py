"""Shared minibatch SGD loop used by every trainer.

A trainer supplies a *batch objective*: given the current parameters and a
batch of indices it returns the model inputs and a target-coefficient matrix
``T`` such that the batch loss is ``sum_k sum_c T[k, c] * CE(f(x_k), c)``.
Weighted CE, mixup, focal, CVaR and GroupDRO all fit this form, which is what
makes the reductions between them bitwise exact.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import (ModelParams, OptimizerState, RngStream, gradient_targets, init_model,
                   predict, sgd_step)
from .data import Dataset

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    model: str = "mlp"
    hidden: tuple = (64, 64)
    # UMIX / uncertainty
    alpha: float = 0.5
    sigma: float = 0.5
    T_s: int = 3
    T: int = 10
    eta: float = 80.0
    c: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.model not in ("mlp", "glm"):
            raise ConfigError(f"unknown model {self.model!r}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not 0 <= self.sigma <= 1:
            raise ConfigError("sigma must lie in [0, 1]")
        if self.T_s < 0 or self.T < 1:
            raise ConfigError("need T_s >= 0 and T >= 1")
        if self.eta < 0 or not self.c > 0:
            raise ConfigError("need eta >= 0 and c > 0")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class UmixConfig:
    alpha: float
    sigma: float
    base: TrainConfig

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not 0 <= self.sigma <= 1:
            raise ConfigError("sigma must lie in [0, 1]")

    @classmethod
    def from_train(cls, cfg: TrainConfig) -> "UmixConfig":
        return cls(cfg.alpha, cfg.sigma, cfg)


def config_hash(obj) -> str:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainLog:
    n_groups: int = 0
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def to_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("empty log")
        keys = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)


@dataclass
class TrainResult:
    params: ModelParams
    checkpoints: list
    log: TrainLog
    trace: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``params, checkpoints, log = train_x(...)``
        return iter((self.params, self.checkpoints, self.log))


def new_model(dataset: Dataset, cfg: TrainConfig, rng: RngStream) -> ModelParams:
    return init_model(cfg.model, dataset.d, dataset.n_classes, rng.stream("init"), cfg.hidden)


def weighted_ce_objective(weights: np.ndarray | None = None):
    """Batch mean of w_i * CE(f(x_i), y_i)."""

    def objective(params, ds, idx, rng):
        w = np.ones(len(idx)) if weights is None else weights[idx]
        targets = np.zeros((len(idx), ds.n_classes))
        targets[np.arange(len(idx)), ds.labels[idx]] = w / len(idx)
        return ds.features[idx], targets

    return objective


def run_training(dataset: Dataset, cfg: TrainConfig, objective, *, record_trace: bool = False,
                 init: ModelParams | None = None, epochs: int | None = None,
                 on_batch=None) -> TrainResult:
    """Run ``epochs`` passes of minibatch SGD; checkpoint and log after each."""
    rng = RngStream(cfg.seed)
    params = init.copy() if init is not None else new_model(dataset, cfg, rng)
    opt = OptimizerState(cfg.lr, cfg.weight_decay)
    shuffle = rng.stream("data-shuffle")
    n = len(dataset)
    epochs = cfg.epochs if epochs is None else epochs
    log = TrainLog(dataset.n_groups or 0)
    checkpoints, trace = [], []
    for epoch in range(epochs):
        order = shuffle.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xin, targets = objective(params, dataset, idx, rng)
            grads, loss = gradient_targets(params, xin, targets)
            params = sgd_step(params, grads, opt)
            total += loss
            batches += 1
            if on_batch is not None:
                on_batch(epoch, idx, xin, targets)
        preds = predict(params, dataset.features)
        correct = preds == dataset.labels
        row = {"epoch": epoch, "loss": total / max(batches, 1), "acc": float(correct.mean())}
        if dataset.groups is not None:
            for g in range(dataset.n_groups):
                m = dataset.groups == g
                row[f"acc_g{g}"] = float(correct[m].mean()) if m.any() else float("nan")
        log.append(**row)
        checkpoints.append(params.copy())
        if record_trace:
            trace.append(preds.astype(np.int32))
    tr = np.array(trace, dtype=np.int32).reshape(len(trace), n) if record_trace else None
    return TrainResult(params, checkpoints, log, tr)


# --------------------------------------------------------------------------
# checkpoint persistence
# --------------------------------------------------------------------------

def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoints(directory, checkpoints, cfg: TrainConfig, metrics=None) -> Path:
    """One ``epoch_XXXX.npz`` per checkpoint plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for e, params in enumerate(checkpoints):
        arrays = {"kind": np.array(params.kind)}
        for k, (w, b) in enumerate(params.layers):
            arrays[f"W{k}"] = w
            arrays[f"b{k}"] = b
        fname = f"epoch_{e:04d}.npz"
        tmp = directory / (fname + ".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, directory / fname)
        entry = {"epoch": e, "file": fname}
        if metrics is not None:
            entry["metrics"] = metrics[e]
        entries.append(entry)
    manifest = {"version": CHECKPOINT_VERSION, "config_hash": config_hash(cfg),
                "config": cfg.to_dict(), "checkpoints": entries}
    path = directory / "manifest.json"
    _atomic_write_bytes(path, json.dumps(manifest, indent=2, sort_keys=True).encode())
    return path


def load_checkpoints(directory) -> list:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    out = []
    for entry in manifest["checkpoints"]:
        with np.load(directory / entry["file"]) as z:
            k, layers = 0, []
            while f"W{k}" in z:
                layers.append((z[f"W{k}"], z[f"b{k}"]))
                k += 1
            out.append(ModelParams(str(z["kind"]), layers))
    return out
