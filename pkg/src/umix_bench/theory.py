"""Numerical checks of the weighted-mixup second-order approximation for a
binary logistic GLM, and the group-weighted covariance rank."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import RngStream, sample_beta2
from .data import Dataset

CENTERING_TOL = 1e-9
MC_CHUNK = 4096


@dataclass
class RegularizerCheck:
    mc_mixup_loss: float
    std_loss: float
    regularizer: float
    approx_rhs: float
    abs_gap: float
    rel_gap: float
    reg_rel_gap: float
    gap_se: float
    loss_se: float
    ratio_moment: float
    mc_samples: int
    beta_params: tuple
    seed: int

    def to_json(self) -> str:
        d = asdict(self)
        d["beta_params"] = list(self.beta_params)
        return json.dumps(d, sort_keys=True)


def mixture_lambda_sample(alpha: float, beta: float, gen: np.random.Generator, size=None,
                          return_component: bool = False):
    """Draw from a/(a+b) Beta(a+1, b) + b/(a+b) Beta(b+1, a).

    This is the law of the coefficient that multiplies the sample whose label
    is being scored once the Beta(a, b) mixing weight is folded into the
    sampling distribution.
    """
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"mixture parameters must be positive, got ({alpha}, {beta})")
    shape = () if size is None else size
    first = gen.uniform(size=shape) < alpha / (alpha + beta)
    a = np.where(first, alpha + 1.0, beta + 1.0)
    b = np.where(first, beta, alpha)
    lam = sample_beta2(a, b, gen, shape if size is not None else None)
    if size is None:
        lam, first = float(lam), bool(first)
    return (lam, first) if return_component else lam


def log_partition(z):
    """A(z) = log(1 + e^z)."""
    return np.logaddexp(0.0, z)


def log_partition_dd(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 - s)


def glm_theta(theta) -> np.ndarray:
    """Accept a d-vector or a bias-free 2-class GLM ``ModelParams``."""
    if hasattr(theta, "layers"):
        (w, b), = theta.layers
        if w.shape[0] != 2:
            raise ValueError("the regularizer check needs a binary GLM")
        if abs(b[1] - b[0]) > 0:
            raise ValueError("the GLM loss form A(theta'x) - y theta'x has no intercept")
        return w[1] - w[0]
    return np.asarray(theta, dtype=np.float64)


def center(x: np.ndarray, weights=None) -> np.ndarray:
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    return x - (w @ x) / w.sum()


def random_glm_problem(d: int = 5, n: int = 200, theta_norm: float = 0.5, seed: int = 0):
    """Centred Gaussian features, a parameter of norm ``theta_norm`` and
    labels drawn from the logistic model.  Returns ``(theta, x, y)``."""
    gen = RngStream(seed).stream("noise")
    x = center(gen.normal(size=(n, d)))
    theta = gen.normal(size=d)
    theta *= theta_norm / np.linalg.norm(theta)
    p = 1.0 / (1.0 + np.exp(-(x @ theta)))
    y = (gen.uniform(size=n) < p).astype(np.float64)
    return theta, x, y


def check_mixup_regularizer(theta, dataset, weights=None, alpha: float = 8.0, beta: float = 8.0,
                            mc_samples: int = 200_000, seed: int = 0) -> RegularizerCheck:
    """Monte-Carlo weighted mixup loss on rescaled inputs vs. the second-order
    approximation ``std + (1/2n) sum w_i A''(x_i'theta) E[(1-l)^2/l^2] theta' S theta``.

    ``dataset`` is a :class:`Dataset` or an ``(x, y)`` pair with y in {0, 1}.
    Weights are rescaled to mean one so that ``w_i / n`` is a distribution;
    the data must be centred under that distribution.

    ``rel_gap`` is the gap relative to the Monte-Carlo mixup loss;
    ``reg_rel_gap`` is the same gap relative to the regularizer term alone.
    """
    if isinstance(dataset, Dataset):
        x, y = dataset.features, dataset.labels
    else:
        x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    theta = glm_theta(theta)
    if alpha < 2 or beta < 2:
        raise ValueError("E[(1-l)^2/l^2] diverges unless alpha >= 2 and beta >= 2")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("binary labels in {0, 1} required")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    w = w / w.mean()
    mean = (w @ x) / n
    if np.linalg.norm(mean) > CENTERING_TOL:
        raise ValueError(f"data not centred (|weighted mean| = {np.linalg.norm(mean):.3g})")

    s = x @ theta
    std_loss = float(np.mean(w * (log_partition(s) - y * s)))
    curv = float(np.sum(w * log_partition_dd(s))) / (2 * n)
    quad = float(theta @ ((x * w[:, None]).T @ x / n) @ theta)
    probs = w / w.sum()

    rng = RngStream(seed)
    losses = np.empty(mc_samples)
    ratio2 = np.empty(mc_samples)
    for c, start in enumerate(range(0, mc_samples, MC_CHUNK)):
        k = min(MC_CHUNK, mc_samples - start)
        gen = rng.child(c).stream("mixup-lambda")
        lam = mixture_lambda_sample(alpha, beta, gen, size=k)
        a = (1.0 - lam) / lam
        r = gen.choice(n, size=(k, n), p=probs)
        z = s[None, :] + a[:, None] * s[r]
        losses[start:start + k] = (w[None, :] * (log_partition(z) - y[None, :] * z)).mean(axis=1)
        ratio2[start:start + k] = a * a
    mc_loss = float(losses.mean())
    moment = float(ratio2.mean())
    reg = curv * moment * quad
    rhs = std_loss + reg
    diff = losses - (std_loss + curv * quad * ratio2)
    gap = abs(mc_loss - rhs)
    return RegularizerCheck(
        mc_mixup_loss=mc_loss, std_loss=std_loss, regularizer=reg, approx_rhs=rhs,
        abs_gap=gap, rel_gap=gap / abs(mc_loss) if mc_loss != 0 else (0.0 if gap == 0 else np.inf),
        reg_rel_gap=gap / reg if reg > 0 else (0.0 if gap == 0 else np.inf),
        gap_se=float(diff.std(ddof=1) / np.sqrt(mc_samples)),
        loss_se=float(losses.std(ddof=1) / np.sqrt(mc_samples)),
        ratio_moment=moment, mc_samples=mc_samples, beta_params=(alpha, beta), seed=seed)


def covariance_rank(dataset: Dataset, weights_per_group=None, eps: float = 1e-9):
    """Numerical rank of sum_g k_g w_g Sigma_g (Sigma_g = within-group second moment).

    Returns ``(rank, eigenvalues)`` with eigenvalues in descending order.
    """
    if dataset.groups is None:
        raise ValueError("covariance_rank needs group labels")
    n_groups = dataset.n_groups
    wg = np.ones(n_groups) if weights_per_group is None else np.asarray(weights_per_group, float)
    if wg.shape != (n_groups,):
        raise ValueError(f"need {n_groups} group weights")
    x = dataset.features
    sigma = np.zeros((dataset.d, dataset.d))
    counts = dataset.group_counts()
    for g in range(n_groups):
        if counts[g] == 0:
            continue
        xg = x[dataset.groups == g]
        k_g = counts[g] / len(x)
        sigma += k_g * wg[g] * (xg.T @ xg) / counts[g]
    eig = np.sort(np.linalg.eigvalsh(sigma))[::-1]
    top = eig[0] if eig.size else 0.0
    rank = int(np.sum(eig > eps * top)) if top > 0 else 0
    return rank, eig


def save_eigenvalues(eig: np.ndarray, path) -> None:
    np.savetxt(path, eig[:, None], delimiter=",", header="eigenvalue", comments="")
