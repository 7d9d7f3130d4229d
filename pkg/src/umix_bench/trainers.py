"""UMIX and baseline trainers.

Every trainer returns a :class:`~umix_bench.training.TrainResult` which
unpacks as ``(params, checkpoints, log)``.
"""
from __future__ import annotations

import math

import numpy as np

from .core import forward, per_sample_ce, predict, sample_beta, softmax
from .data import Dataset
from .training import (ConfigError, TrainConfig, TrainResult, UmixConfig, run_training,
                       weighted_ce_objective)
from .uncertainty import ImportanceWeights

DEFAULT_FOCAL_GAMMA = 2.0
DEFAULT_CVAR_ALPHA = 0.2
DEFAULT_GROUP_DRO_ETA = 0.01


def _as_umix(cfg) -> UmixConfig:
    return cfg if isinstance(cfg, UmixConfig) else UmixConfig.from_train(cfg)


def _require_groups(dataset: Dataset, method: str):
    if dataset.groups is None:
        raise ConfigError(f"{method} is group-aware and needs training group labels")


# --------------------------------------------------------------------------
# mixup family
# --------------------------------------------------------------------------

def mixup_objective(weights: np.ndarray, alpha: float, sigma: float, pairing="permute"):
    """Batch mean of w_i*lam*CE(x~, y_i) + w_j*(1-lam)*CE(x~, y_j).

    One gate ``p ~ U(0,1)`` and one ``lam`` per batch; ``lam = 0`` when
    ``p >= sigma``.  ``pairing`` is "permute" (in-batch random permutation),
    "identity" (j = i) or a callable ``(idx, gen) -> permutation``.
    """

    def objective(params, ds, idx, rng):
        b = len(idx)
        if pairing == "identity":
            perm = np.arange(b)
        elif pairing == "permute":
            perm = rng.stream("mixup-pairing").permutation(b)
        else:
            perm = pairing(idx, rng.stream("mixup-pairing"))
        gen = rng.stream("mixup-lambda")
        p = gen.uniform()
        lam = float(sample_beta(alpha, gen)) if p < sigma else 0.0
        i, j = idx, idx[perm]
        x_mix = lam * ds.features[i] + (1.0 - lam) * ds.features[j]
        ci = weights[i] * lam / b
        cj = weights[j] * (1.0 - lam) / b
        targets = np.zeros((b, ds.n_classes))
        rows = np.arange(b)
        targets[rows, ds.labels[i]] += ci
        targets[rows, ds.labels[j]] += cj
        return x_mix, targets

    return objective


def train_umix(dataset: Dataset, weights: ImportanceWeights, cfg, pairing="permute") -> TrainResult:
    """Uncertainty-weighted mixup: the two mixup loss terms are scaled by the
    importance weights of the two source samples."""
    ucfg = _as_umix(cfg)
    if not isinstance(weights, ImportanceWeights):
        weights = ImportanceWeights(np.asarray(weights, dtype=np.float64), float("nan"), float("nan"))
    weights.check_dataset(dataset)
    if np.any(weights.w <= 0):
        raise ValueError("importance weights must be positive")
    obj = mixup_objective(weights.w, ucfg.alpha, ucfg.sigma, pairing)
    return run_training(dataset, ucfg.base, obj)


def train_vanilla_mixup(dataset: Dataset, cfg) -> TrainResult:
    ucfg = _as_umix(cfg)
    obj = mixup_objective(np.ones(len(dataset)), ucfg.alpha, ucfg.sigma)
    return run_training(dataset, ucfg.base, obj)


def ingroup_pairing(labels: np.ndarray, groups: np.ndarray):
    """Permute within each (label, group) cell of the batch; singletons self-pair."""

    def pair(idx, gen):
        perm = np.arange(len(idx))
        cell = labels[idx] * (groups.max() + 1) + groups[idx]
        for key in np.unique(cell):
            pos = np.flatnonzero(cell == key)
            if len(pos) > 1:
                perm[pos] = pos[gen.permutation(len(pos))]
        return perm

    return pair


def train_ingroup_mixup(dataset: Dataset, cfg) -> TrainResult:
    _require_groups(dataset, "in-group mixup")
    ucfg = _as_umix(cfg)
    obj = mixup_objective(np.ones(len(dataset)), ucfg.alpha, ucfg.sigma,
                          ingroup_pairing(dataset.labels, dataset.groups))
    return run_training(dataset, ucfg.base, obj)


# --------------------------------------------------------------------------
# plain reweighting family
# --------------------------------------------------------------------------

def train_erm(dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    return run_training(dataset, cfg, weighted_ce_objective())


def train_weighted_erm(dataset: Dataset, cfg: TrainConfig, weights) -> TrainResult:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(dataset),):
        raise ValueError("one weight per training sample required")
    return run_training(dataset, cfg, weighted_ce_objective(w))


def inverse_frequency_weights(groups: np.ndarray, n_groups: int | None = None) -> np.ndarray:
    """n / (G * n_g) per sample, rescaled to mean 1."""
    counts = np.bincount(groups, minlength=n_groups or 0).astype(np.float64)
    present = int(np.count_nonzero(counts))
    w = len(groups) / (present * counts[groups])
    return w / w.mean()


def train_static_reweight(dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    _require_groups(dataset, "static reweighting")
    return train_weighted_erm(dataset, cfg, inverse_frequency_weights(dataset.groups, dataset.n_groups))


def train_jtt(dataset: Dataset, cfg: TrainConfig, t_id: int | None = None,
              lambda_up: float | None = None) -> TrainResult:
    """Stage 1: ERM for ``t_id`` epochs.  Stage 2: fresh model, error set upweighted."""
    t_id = max(cfg.T_s, 1) if t_id is None else int(t_id)
    lambda_up = cfg.eta + 1.0 if lambda_up is None else float(lambda_up)
    if t_id < 1 or lambda_up < 1:
        raise ConfigError("JTT needs t_id >= 1 and lambda_up >= 1")
    stage1 = run_training(dataset, cfg, weighted_ce_objective(), epochs=t_id)
    errors = predict(stage1.params, dataset.features) != dataset.labels
    w = np.where(errors, lambda_up, 1.0)
    res = train_weighted_erm(dataset, cfg, w)
    res.extras["error_set"] = np.flatnonzero(errors)
    res.extras["stage1"] = stage1
    return res


# --------------------------------------------------------------------------
# loss-reshaping family
# --------------------------------------------------------------------------

def focal_coefficients(p_true: np.ndarray, gamma: float) -> np.ndarray:
    """d/dz of -(1-p)^g log p equals k * d/dz CE with
    k = (1-p)^g - g (1-p)^(g-1) p log p."""
    if gamma == 0:
        return np.ones_like(p_true)
    q = 1.0 - p_true
    with np.errstate(divide="ignore", invalid="ignore"):
        second = gamma * np.power(q, gamma - 1.0) * p_true * np.log(p_true)
    second = np.where(q > 0, second, 0.0)
    return np.power(q, gamma) - second


def train_focal(dataset: Dataset, cfg: TrainConfig, gamma: float = DEFAULT_FOCAL_GAMMA) -> TrainResult:
    if gamma < 0:
        raise ConfigError("focal gamma must be nonnegative")

    def objective(params, ds, idx, rng):
        b = len(idx)
        y = ds.labels[idx]
        if gamma == 0:
            k = np.ones(b)
        else:
            p = softmax(forward(params, ds.features[idx]))[np.arange(b), y]
            k = focal_coefficients(p, gamma)
        targets = np.zeros((b, ds.n_classes))
        targets[np.arange(b), y] = k / b
        return ds.features[idx], targets

    return run_training(dataset, cfg, objective)


def cvar_coefficients(losses: np.ndarray, alpha: float) -> np.ndarray:
    """Subgradient weights of min_eta eta + mean((l - eta)_+) / alpha.

    The top floor(alpha*B) losses get 1/(alpha*B); the next one gets the
    fractional remainder; the rest get 0.
    """
    b = len(losses)
    order = np.argsort(-losses, kind="stable")
    mass = alpha * b
    full = min(int(math.floor(mass)), b)
    coef = np.zeros(b)
    coef[order[:full]] = 1.0 / mass
    if full < b and mass - full > 0:
        coef[order[full]] = (mass - full) / mass
    return coef


def cvar_objective_value(losses: np.ndarray, alpha: float) -> float:
    return float(np.dot(cvar_coefficients(losses, alpha), losses))


def train_cvar_dro(dataset: Dataset, cfg: TrainConfig, alpha_cvar: float = DEFAULT_CVAR_ALPHA) -> TrainResult:
    if not 0 < alpha_cvar <= 1:
        raise ConfigError("alpha_cvar must lie in (0, 1]")

    def objective(params, ds, idx, rng):
        b = len(idx)
        y = ds.labels[idx]
        coef = cvar_coefficients(per_sample_ce(forward(params, ds.features[idx]), y), alpha_cvar)
        targets = np.zeros((b, ds.n_classes))
        targets[np.arange(b), y] = coef
        return ds.features[idx], targets

    return run_training(dataset, cfg, objective)


def group_dro_update(q: np.ndarray, group_losses: np.ndarray, present: np.ndarray, eta_q: float) -> np.ndarray:
    q = q.copy()
    q[present] = q[present] * np.exp(eta_q * group_losses[present])
    return q / q.sum()


def train_group_dro(dataset: Dataset, cfg: TrainConfig, eta_q: float = DEFAULT_GROUP_DRO_ETA) -> TrainResult:
    _require_groups(dataset, "GroupDRO")
    if eta_q < 0:
        raise ConfigError("eta_q must be nonnegative")
    n_groups = dataset.n_groups
    state = {"q": np.full(n_groups, 1.0 / n_groups), "history": []}

    def objective(params, ds, idx, rng):
        b = len(idx)
        y, g = ds.labels[idx], ds.groups[idx]
        losses = per_sample_ce(forward(params, ds.features[idx]), y)
        counts = np.bincount(g, minlength=n_groups)
        sums = np.bincount(g, weights=losses, minlength=n_groups)
        present = counts > 0
        means = np.where(present, sums / np.maximum(counts, 1), 0.0)
        q = group_dro_update(state["q"], means, present, eta_q)
        state["q"] = q
        state["history"].append(q)
        coef = q[g] / counts[g]
        targets = np.zeros((b, ds.n_classes))
        targets[np.arange(b), y] = coef
        return ds.features[idx], targets

    res = run_training(dataset, cfg, objective)
    res.extras["q"] = state["q"]
    res.extras["q_history"] = np.array(state["history"])
    return res


METHODS = {
    "erm": "group-oblivious",
    "umix": "group-oblivious",
    "vanilla_mixup": "group-oblivious",
    "focal": "group-oblivious",
    "cvar_dro": "group-oblivious",
    "jtt": "group-oblivious",
    "ingroup_mixup": "group-aware",
    "static_reweight": "group-aware",
    "group_dro": "group-aware",
}
