"""Experiment runner: JSON configs, the two-phase UMIX pipeline, baseline
sweeps, multi-seed aggregation and report emission.

Usage::

    umix-bench <subcommand> --config <path> [--out <dir>] [--seeds a,b,c]

Exit codes: 0 success, 1 configuration error, 2 runtime error.  The worker
count for parallel seeds / sweep cells comes from ``UMIX_BENCH_WORKERS``.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, FourMoonsSpec, SpuriousSpec, generate_four_moons, generate_spurious,
                   load_csv, make_blobs, save_csv)
from .eval import EvalReport, evaluate, select_checkpoint
from .theory import check_mixup_regularizer, covariance_rank, random_glm_problem
from .trainers import (train_cvar_dro, train_erm, train_focal, train_group_dro,
                       train_ingroup_mixup, train_jtt, train_static_reweight, train_umix,
                       train_vanilla_mixup)
from .training import ConfigError, TrainConfig, config_hash, load_checkpoints, save_checkpoints
from .uncertainty import (ImportanceWeights, check_window, compute_uncertainty, compute_weights,
                          train_erm_with_trace)

WORKERS_ENV = "UMIX_BENCH_WORKERS"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# method -> {param name: type}
METHOD_SCHEMAS = {
    "erm": {},
    "umix": {},
    "vanilla_mixup": {},
    "ingroup_mixup": {},
    "focal": {"gamma": float},
    "cvar_dro": {"alpha_cvar": float},
    "jtt": {"t_id": int, "lambda_up": float},
    "static_reweight": {},
    "group_dro": {"eta_q": float},
}
DATASETS = {
    "spurious": SpuriousSpec,
    "four_moons": FourMoonsSpec,
    "blobs": None,
    "csv": None,
}
BLOBS_KEYS = {"n", "d", "separation"}
CSV_KEYS = {"train", "val", "test"}
SELECTION = ("worst_group", "average")
THEORY_DEFAULTS = {"alphas": [4, 8, 16, 32], "mc_samples": 200_000, "d": 5, "n": 200,
                   "theta_norm": 0.5, "seed": 0}
FOUR_MOONS_EVAL_PER_GROUP = 250


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def _reject_unknown(d: dict, known, where: str):
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}; allowed: {sorted(known)}")


def _spec_fields(cls) -> set:
    return set(cls.__dataclass_fields__)


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"name": "spurious", "params": {}})
    method: str = "umix"
    method_params: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: str = "worst_group"
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str | None = None
    methods: list = field(default_factory=list)   # sweep: methods to compare
    grid: dict = field(default_factory=dict)      # sweep: train key -> list of values
    theory: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ds = self.dataset
        if not isinstance(ds, dict) or "name" not in ds:
            raise ConfigError("dataset must be an object with a 'name'")
        _reject_unknown(ds, {"name", "params"}, "dataset")
        name, params = ds["name"], ds.get("params", {})
        if name not in DATASETS:
            raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
        if name == "csv":
            _reject_unknown(params, CSV_KEYS, "dataset.params")
            if set(params) != CSV_KEYS:
                raise ConfigError("csv dataset needs train, val and test paths")
        elif name == "blobs":
            _reject_unknown(params, BLOBS_KEYS, "dataset.params")
        else:
            _reject_unknown(params, _spec_fields(DATASETS[name]) - {"seed"}, "dataset.params")
        for m in [self.method, *self.methods]:
            if m not in METHOD_SCHEMAS:
                raise ConfigError(f"unknown method {m!r}; available methods: {sorted(METHOD_SCHEMAS)}")
        schema = METHOD_SCHEMAS[self.method]
        _reject_unknown(self.method_params, schema, f"method_params for {self.method}")
        for k, typ in schema.items():
            v = self.method_params.get(k)
            ok = isinstance(v, int) if typ is int else isinstance(v, (int, float))
            if v is not None and (not ok or isinstance(v, bool)):
                raise ConfigError(f"method param {k} must be of type {typ.__name__}")
        if self.selection not in SELECTION:
            raise ConfigError(f"selection must be one of {SELECTION}")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of nonnegative integers")
        train_keys = set(TrainConfig.__dataclass_fields__) - {"seed"}
        _reject_unknown(self.grid, train_keys, "grid")
        for k, vals in self.grid.items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"grid.{k} must be a nonempty list")
            for v in vals:
                self.train.replace(**{k: v})
        _reject_unknown(self.theory, THEORY_DEFAULTS, "theory")
        if "umix" in (self.method, *self.methods):
            check_window(self.train)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "method": self.method, "method_params": self.method_params,
                "train": self.train.to_dict(), "selection": self.selection, "seeds": list(self.seeds),
                "out_dir": self.out_dir, "methods": list(self.methods), "grid": self.grid,
                "theory": self.theory}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        _reject_unknown(d, known, "config")
        d = dict(d)
        if "train" in d:
            if not isinstance(d["train"], dict):
                raise ConfigError("train must be an object")
            d["train"] = TrainConfig.from_dict(d["train"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_json(text)

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        if isinstance(d["train"], TrainConfig):
            d["train"] = d["train"].to_dict()
        return ExperimentConfig.from_dict(d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return config_hash(d)


# --------------------------------------------------------------------------
# data and methods
# --------------------------------------------------------------------------

def build_splits(config: ExperimentConfig, seed: int):
    """(train, val, test) for one seed."""
    name, params = config.dataset["name"], dict(config.dataset.get("params", {}))
    if name == "spurious":
        return generate_spurious(SpuriousSpec(seed=seed, **params))
    if name == "four_moons":
        spec = FourMoonsSpec(seed=seed, **params)
        bal = (FOUR_MOONS_EVAL_PER_GROUP,) * 4
        # val / test seeds are offset so that the three splits never share noise
        val = generate_four_moons(FourMoonsSpec(bal, spec.noise_std, seed + 1_000_003), "val")
        test = generate_four_moons(FourMoonsSpec(bal, spec.noise_std, seed + 2_000_003), "test")
        return generate_four_moons(spec), val, test
    if name == "blobs":
        out = []
        for k, split in enumerate(("train", "val", "test")):
            ds = make_blobs(seed=seed * 3 + k, **{"n": 400, **params})
            out.append(Dataset(ds.features, ds.labels, ds.groups, split, "blobs", 2, 2))
        return tuple(out)
    return tuple(load_csv(params[s], split=s) for s in ("train", "val", "test"))


def _persist_weights(weights: ImportanceWeights, seed_dir: Path | None, train: Dataset):
    """Write weights, then reload and verify them before phase B starts."""
    if seed_dir is None:
        return weights
    path = seed_dir / "weights"
    weights.save(path)
    back = ImportanceWeights.load(path)
    back.check_dataset(train)
    return back


def run_method(method: str, params: dict, train: Dataset, cfg: TrainConfig,
               seed_dir: Path | None = None):
    """Train one method; for UMIX run phase A (trace, uncertainty, weights) then phase B."""
    if method == "umix":
        check_window(cfg)
        _, trace = train_erm_with_trace(train, cfg)
        scores = compute_uncertainty(trace, train.labels, cfg.T_s, cfg.T)
        weights = compute_weights(scores, cfg.eta, cfg.c)
        if seed_dir is not None:
            trace.save(seed_dir / "trace")
        weights = _persist_weights(weights, seed_dir, train)
        return train_umix(train, weights, cfg)
    group_free = train.without_groups()
    if method == "erm":
        return train_erm(group_free, cfg)
    if method == "vanilla_mixup":
        return train_vanilla_mixup(group_free, cfg)
    if method == "focal":
        return train_focal(group_free, cfg, **params)
    if method == "cvar_dro":
        return train_cvar_dro(group_free, cfg, **params)
    if method == "jtt":
        return train_jtt(group_free, cfg, **params)
    if method == "ingroup_mixup":
        return train_ingroup_mixup(train, cfg)
    if method == "static_reweight":
        return train_static_reweight(train, cfg)
    if method == "group_dro":
        return train_group_dro(train, cfg, **params)
    raise ConfigError(f"unknown method {method!r}; available methods: {sorted(METHOD_SCHEMAS)}")


def _seed_dir(config: ExperimentConfig, seed: int) -> Path | None:
    if config.out_dir is None:
        return None
    d = Path(config.out_dir) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_seed(config: ExperimentConfig, seed: int) -> dict:
    train, val, test = build_splits(config, seed)
    cfg = config.train.replace(seed=seed)
    res = run_method(config.method, config.method_params, train, cfg, _seed_dir(config, seed))
    idx, ckpt, _ = select_checkpoint(res.checkpoints, val, config.selection)
    report = evaluate(ckpt, test)
    return {"seed": seed, "selected_epoch": idx, "report": report.to_dict()}


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

def _mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class ExperimentResult:
    method: str
    per_seed: list
    config: dict
    provenance: dict

    @property
    def reports(self) -> list:
        return [EvalReport.from_dict(r["report"]) for r in self.per_seed]

    def summary(self) -> dict:
        avg = [r["report"]["avg_acc"] for r in self.per_seed]
        worst = [r["report"]["worst_acc"] for r in self.per_seed]
        (ma, sa), (mw, sw) = _mean_std(avg), _mean_std(worst)
        return {"avg_mean": ma, "avg_std": sa, "worst_mean": mw, "worst_std": sw}

    def to_dict(self) -> dict:
        return {"method": self.method, "per_seed": self.per_seed, "summary": self.summary(),
                "config": self.config, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d) -> "ExperimentResult":
        return cls(d["method"], d["per_seed"], d["config"], d["provenance"])


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def _parallel_map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *it) for it in items]
        return [f.result() for f in futures]


def run_pipeline(config: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Run ``config.method`` for every seed, select, evaluate and aggregate."""
    config.validate()
    workers = worker_count() if workers is None else workers
    started = time.time()
    per_seed = _parallel_map(run_seed, [(config, s) for s in config.seeds], workers)
    prov = {"config_hash": config.hash(), "code_version": __version__,
            "timestamps": {"started": started, "finished": time.time()}}
    return ExperimentResult(config.method, per_seed, config.to_dict(), prov)


def sweep_cells(config: ExperimentConfig) -> list:
    """One config per (method, grid point)."""
    methods = config.methods or [config.method]
    keys = sorted(config.grid)
    cells = []
    for m in methods:
        for values in itertools.product(*(config.grid[k] for k in keys)):
            train = config.train.replace(**dict(zip(keys, values)))
            params = config.method_params if m == config.method else {}
            cells.append(config.replace(method=m, method_params=params, train=train.to_dict(),
                                        methods=[], grid={}))
    return cells


def _cell_result(cell: ExperimentConfig) -> ExperimentResult:
    return run_pipeline(cell, workers=1)


def run_sweep(config: ExperimentConfig, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    return _parallel_map(_cell_result, [(c,) for c in sweep_cells(config)], workers)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def format_pm(mean: float, std: float) -> str:
    """Percent with one decimal, e.g. ``63.7 ± 1.9%``."""
    return f"{100 * mean:.1f} ± {100 * std:.1f}%"


def render_report(results, fmt: str) -> str:
    results = [results] if isinstance(results, ExperimentResult) else list(results)
    if fmt == "json":
        return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "config_hash", "seed", "selected_epoch", "avg_acc", "worst_acc",
                    "worst_group"])
        for r in results:
            for s in r.per_seed:
                rep = s["report"]
                w.writerow([r.method, r.provenance["config_hash"], s["seed"], s["selected_epoch"],
                            repr(rep["avg_acc"]), repr(rep["worst_acc"]), rep["worst_group"]])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| Method | Config | Avg. | Worst |", "|---|---|---|---|"]
        for r in results:
            s = r.summary()
            lines.append(f"| {r.method} | {r.provenance['config_hash'][:8]} | "
                         f"{format_pm(s['avg_mean'], s['avg_std'])} | "
                         f"{format_pm(s['worst_mean'], s['worst_std'])} |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")


def emit_report(results, fmt: str, out_dir) -> Path:
    ext = {"json": "json", "csv": "csv", "markdown": "md"}
    if fmt not in ext:
        raise ConfigError(f"unknown report format {fmt!r}")
    path = Path(out_dir) / f"report.{ext[fmt]}"
    _atomic_write(path, render_report(results, fmt))
    return path


def load_report(path) -> list:
    return [ExperimentResult.from_dict(d) for d in json.loads(Path(path).read_text())]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _out(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(config: ExperimentConfig) -> None:
    out = _out(config)
    for seed in config.seeds:
        d = out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        for ds in build_splits(config, seed):
            save_csv(ds, d / f"{ds.split}.csv")


def _train_one(config: ExperimentConfig, seed: int) -> None:
    train, _, _ = build_splits(config, seed)
    cfg = config.train.replace(seed=seed)
    d = _seed_dir(config, seed)
    res = run_method(config.method, config.method_params, train, cfg, d)
    save_checkpoints(d / "checkpoints", res.checkpoints, cfg, metrics=res.log.rows)
    res.log.to_csv(d / "train_log.csv")


def cmd_train(config: ExperimentConfig) -> None:
    _out(config)
    _parallel_map(_train_one, [(config, s) for s in config.seeds], worker_count())


def cmd_weights(config: ExperimentConfig) -> None:
    check_window(config.train)
    _out(config)
    for seed in config.seeds:
        train, _, _ = build_splits(config, seed)
        cfg = config.train.replace(seed=seed)
        d = _seed_dir(config, seed)
        _, trace = train_erm_with_trace(train, cfg)
        trace.save(d / "trace")
        w = compute_weights(compute_uncertainty(trace, train.labels, cfg.T_s, cfg.T), cfg.eta, cfg.c)
        w.save(d / "weights")


def cmd_evaluate(config: ExperimentConfig) -> list:
    out = _out(config)
    per_seed = []
    for seed in config.seeds:
        d = out / f"seed_{seed}"
        _, val, test = build_splits(config, seed)
        ckpts = load_checkpoints(d / "checkpoints")
        idx, ckpt, _ = select_checkpoint(ckpts, val, config.selection)
        rec = {"seed": seed, "selected_epoch": idx, "report": evaluate(ckpt, test).to_dict()}
        _atomic_write(d / "eval.json", json.dumps(rec, indent=2, sort_keys=True))
        per_seed.append(rec)
    return per_seed


def cmd_report(config: ExperimentConfig) -> None:
    """Aggregate ``seed_*/eval.json`` files written by ``evaluate``."""
    out = _out(config)
    per_seed = []
    for seed in config.seeds:
        p = out / f"seed_{seed}" / "eval.json"
        if not p.exists():
            raise FileNotFoundError(f"{p} missing; run 'evaluate' first")
        per_seed.append(json.loads(p.read_text()))
    prov = {"config_hash": config.hash(), "code_version": __version__,
            "timestamps": {"reported": time.time()}}
    res = ExperimentResult(config.method, per_seed, config.to_dict(), prov)
    for fmt in ("json", "csv", "markdown"):
        emit_report(res, fmt, out)


def cmd_sweep(config: ExperimentConfig) -> None:
    results = run_sweep(config)
    out = _out(config)
    for fmt in ("json", "csv", "markdown"):
        emit_report(results, fmt, out)


def run_theory(theory: dict) -> dict:
    t = {**THEORY_DEFAULTS, **theory}
    theta, x, y = random_glm_problem(t["d"], t["n"], t["theta_norm"], t["seed"])
    checks = [json.loads(check_mixup_regularizer(theta, (x, y), None, a, a, t["mc_samples"],
                                                 t["seed"]).to_json())
              for a in t["alphas"]]
    return {"settings": t, "checks": checks}


def cmd_theory(config: ExperimentConfig) -> None:
    out = _out(config)
    result = run_theory(config.theory)
    train, _, _ = build_splits(config, config.seeds[0])
    if train.groups is not None:
        rank, eig = covariance_rank(train)
        result["covariance_rank"] = {"rank": rank, "eigenvalues": eig.tolist()}
    _atomic_write(out / "theory.json", json.dumps(result, indent=2, sort_keys=True))


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "weights": cmd_weights,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "theory-check": cmd_theory,
    "sweep": cmd_sweep,
}


def _parse_seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="umix-bench", description=__doc__.split("\n")[0])
    ap.add_argument("subcommand", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", help="output directory (overrides config out_dir)")
    ap.add_argument("--seeds", help="comma-separated seeds (overrides config seeds)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.load(args.config)
        over = {}
        if args.out:
            over["out_dir"] = args.out
        if args.seeds:
            over["seeds"] = _parse_seeds(args.seeds)
        if over:
            config = config.replace(**over)
        worker_count()
    except (ConfigError, ValueError) as e:
        print(f"umix-bench: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.subcommand](config)
    except ConfigError as e:
        print(f"umix-bench: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 2
        print(f"umix-bench: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
