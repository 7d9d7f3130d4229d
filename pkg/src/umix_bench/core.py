"""Numerical foundation: GLM / MLP models, cross-entropy, analytic gradients,
SGD with weight decay, named random streams and Beta sampling.

Everything runs in float64 so finite-difference checks and bitwise
determinism are meaningful.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

GLM = "glm"
MLP = "mlp"


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------

SUBSTREAMS = ("data-shuffle", "mixup-lambda", "mixup-pairing", "init", "noise")


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class RngStream:
    """A master seed with independent named substreams.

    Each substream is seeded from (seed, name) alone, so two objects built
    from the same seed hand out the same per-substream draws regardless of
    the order in which substreams are requested.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._cache: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._cache.get(name)
        if gen is None:
            ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, _name_key(name)])
            gen = np.random.Generator(np.random.PCG64(ss))
            self._cache[name] = gen
        return gen

    def child(self, index: int) -> "RngStream":
        """Derive a per-run stream from (master seed, index)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(index)])
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))

    def __repr__(self):
        return f"RngStream(seed={self.seed})"


def sample_beta(alpha: float, gen: np.random.Generator, size=None):
    """Draw from Beta(alpha, alpha) as G1 / (G1 + G2) with Gamma(alpha) variates."""
    return sample_beta2(alpha, alpha, gen, size)


def sample_beta2(a: float, b: float, gen: np.random.Generator, size=None):
    if not (np.all(np.asarray(a) > 0) and np.all(np.asarray(b) > 0)):
        raise ValueError(f"Beta parameters must be positive, got ({a}, {b})")
    g1 = gen.standard_gamma(a, size)
    g2 = gen.standard_gamma(b, size)
    return g1 / (g1 + g2)


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

@dataclass
class ModelParams:
    """Layers stored as (W, b) with W of shape (out, in).

    A GLM is a single layer; an MLP has ReLU between layers.
    """

    kind: str
    layers: list = field(default_factory=list)
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in (GLM, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == GLM and len(self.layers) != 1:
            raise DimensionError("a GLM has exactly one layer")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise DimensionError(f"layer dims disagree: {w0.shape} -> {w1.shape}")
        for w, b in self.layers:
            if b.shape != (w.shape[0],):
                raise DimensionError(f"bias shape {b.shape} does not match weights {w.shape}")

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, [(w.copy(), b.copy()) for w, b in self.layers], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def set_flat(self, vec: np.ndarray) -> "ModelParams":
        out, k = [], 0
        for w, b in self.layers:
            nw = w.size
            out.append((vec[k:k + nw].reshape(w.shape).copy(), vec[k + nw:k + nw + b.size].copy()))
            k += nw + b.size
        return ModelParams(self.kind, out, self.activation)

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every parameter."""
        if self.kind != other.kind or len(self.layers) != len(other.layers):
            return False
        return all(
            np.array_equal(w0, w1) and np.array_equal(b0, b1)
            for (w0, b0), (w1, b1) in zip(self.layers, other.layers)
        )


def init_glm(d: int, n_classes: int, gen: np.random.Generator | None = None) -> ModelParams:
    if gen is None:
        return ModelParams(GLM, [(np.zeros((n_classes, d)), np.zeros(n_classes))])
    bound = 1.0 / np.sqrt(d)
    w = gen.uniform(-bound, bound, size=(n_classes, d))
    b = gen.uniform(-bound, bound, size=n_classes)
    return ModelParams(GLM, [(w, b)])


def init_mlp(sizes, gen: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for ``sizes = [d, h1, ..., C]``."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = gen.uniform(-bound, bound, size=(fan_out, fan_in))
        b = gen.uniform(-bound, bound, size=fan_out)
        layers.append((w, b))
    return ModelParams(MLP, layers)


def init_model(model: str, d: int, n_classes: int, gen: np.random.Generator, hidden=(64, 64)) -> ModelParams:
    if model == GLM:
        return init_glm(d, n_classes, gen)
    if model == MLP:
        return init_mlp([d, *hidden, n_classes], gen)
    raise ValueError(f"unknown model kind {model!r}")


def _forward_cache(params: ModelParams, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        z = h @ w.T + b
        if k < last:
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    return acts


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Logits for a batch ``x`` of shape (n, d), or a single d-vector."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != params.n_in:
        raise DimensionError(f"input dim {xb.shape[1]} != model input dim {params.n_in}")
    out = _forward_cache(params, xb)[-1]
    return out[0] if single else out


forward_logits = forward


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. lowest class index on ties
    return np.argmax(forward(params, x), axis=-1)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def logsumexp(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))[..., 0]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


def cross_entropy(logits, label) -> float:
    """logsumexp(logits) - logits[label] for a single logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < logits.shape[-1]:
        raise ValueError(f"label {label} out of range [0, {logits.shape[-1]})")
    return float(max(logsumexp(logits) - logits[int(label)], 0.0))


def per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(labels, logits.shape[1])
    return logsumexp(logits) - logits[np.arange(len(labels)), labels]


def per_sample_losses(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return per_sample_ce(forward(params, x), y)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

def target_coefficients(labels: np.ndarray, coeffs: np.ndarray, n_classes: int) -> np.ndarray:
    t = np.zeros((len(labels), n_classes))
    t[np.arange(len(labels)), labels] = coeffs
    return t


def gradient_targets(params: ModelParams, x: np.ndarray, targets: np.ndarray):
    """Gradient of sum_k sum_c targets[k, c] * CE(f(x_k), c).

    Because CE is linear in the target, this covers plain weighted CE
    (one nonzero per row) and the two-label mixup loss (two nonzeros per row).
    Returns ``(grad_layers, loss)``.
    """
    acts = _forward_cache(params, x)
    z = acts[-1]
    mass = targets.sum(axis=1)
    lse = logsumexp(z)
    loss = float(np.sum(mass * lse) - np.sum(targets * z))
    delta = mass[:, None] * softmax(z) - targets
    grads = []
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        h_in = acts[k]
        grads.append((delta.T @ h_in, delta.sum(axis=0)))
        if k > 0:
            delta = (delta @ w) * (acts[k] > 0)
    grads.reverse()
    return grads, loss


def gradient(params: ModelParams, x: np.ndarray, y: np.ndarray, coeffs) -> list:
    """Gradient of sum_i coeffs[i] * CE(f(x_i), y_i) as a list of (dW, db)."""
    x = np.asarray(x, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise DimensionError(f"batch shape {x.shape} does not match input dim {params.n_in}")
    if coeffs.shape != (x.shape[0],) or len(y) != x.shape[0]:
        raise DimensionError("coefficient / label length must equal batch size")
    y = _check_labels(y, params.n_classes)
    grads, _ = gradient_targets(params, x, target_coefficients(y, coeffs, params.n_classes))
    return grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def sgd_step(params: ModelParams, grads, opt: OptimizerState) -> ModelParams:
    """theta <- theta - lr * (g + wd * theta); biases are not decayed."""
    if len(grads) != len(params.layers):
        raise DimensionError("gradient structure does not match parameters")
    lr, wd = opt.learning_rate, opt.weight_decay
    new = []
    for k, ((w, b), (gw, gb)) in enumerate(zip(params.layers, grads)):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise DimensionError(f"layer {k}: gradient shape mismatch")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NonFiniteError(
                f"non-finite gradient in layer {k} at step {opt.step_count} "
                f"({int(np.sum(~np.isfinite(gw)) + np.sum(~np.isfinite(gb)))} bad entries)"
            )
        if wd:
            new.append((w - lr * (gw + wd * w), b - lr * gb))
        else:
            new.append((w - lr * gw, b - lr * gb))
    opt.step_count += 1
    return ModelParams(params.kind, new, params.activation)
