"""Two-hidden-layer ReLU MLP with sigmoid outputs, trained by plain SGD.

Gradients are derived by hand. Batch losses are means over rows of the
per-sample loss, which is the sum over classes of sigmoid cross-entropy.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import mil_pooling, perturbation
from .embedding import normalize
from .errors import DivergenceError, ShapeError

HIDDEN = 100
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        h1, d = self.W1.shape
        h2 = self.W2.shape[0]
        n = self.W3.shape[0]
        want = {"b1": (h1,), "W2": (h2, h1), "b2": (h2,), "W3": (n, h2), "b3": (n,)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W3.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in self.arrays()))

    def equals(self, other: "MlpParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_params(input_dim: int, n_classes: int = 1, seed: int = 0, hidden: int = HIDDEN) -> MlpParams:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_out, fan_in))

    return MlpParams(
        glorot(hidden, input_dim), np.zeros(hidden),
        glorot(hidden, hidden), np.zeros(hidden),
        glorot(n_classes, hidden), np.zeros(n_classes),
    )


def zero_params(input_dim: int, n_classes: int = 1, hidden: int = HIDDEN) -> MlpParams:
    return MlpParams(
        np.zeros((hidden, input_dim)), np.zeros(hidden),
        np.zeros((hidden, hidden)), np.zeros(hidden),
        np.zeros((n_classes, hidden)), np.zeros(n_classes),
    )


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects dimension {params.input_dim}")
    return X, single


def _forward(p: MlpParams, X, masks=None):
    z1 = X @ p.W1.T + p.b1
    h1 = np.maximum(z1, 0.0)
    if masks is not None:
        h1 = h1 * masks[0]
    z2 = h1 @ p.W2.T + p.b2
    h2 = np.maximum(z2, 0.0)
    if masks is not None:
        h2 = h2 * masks[1]
    logits = h2 @ p.W3.T + p.b3
    return logits, (X, z1, h1, z2, h2, masks)


def _backward(p: MlpParams, cache, dlogits):
    X, z1, h1, z2, h2, masks = cache
    gW3 = dlogits.T @ h2
    gb3 = dlogits.sum(axis=0)
    dh2 = dlogits @ p.W3
    if masks is not None:
        dh2 = dh2 * masks[1]
    dz2 = dh2 * (z2 > 0)
    gW2 = dz2.T @ h1
    gb2 = dz2.sum(axis=0)
    dh1 = dz2 @ p.W2
    if masks is not None:
        dh1 = dh1 * masks[0]
    dz1 = dh1 * (z1 > 0)
    gW1 = dz1.T @ X
    gb1 = dz1.sum(axis=0)
    dX = dz1 @ p.W1
    return MlpParams(gW1, gb1, gW2, gb2, gW3, gb3), dX


def forward(params: MlpParams, x):
    """Return ``(logits, penultimate)`` for one sample or a batch of rows."""
    X, single = _as_batch(params, x)
    logits, cache = _forward(params, X)
    h2 = cache[4]
    if single:
        return logits[0], h2[0]
    return logits, h2


def predict_proba(params: MlpParams, x) -> np.ndarray:
    logits, _ = forward(params, x)
    return mil_pooling.sigmoid(logits)


def bce_with_logits(logits, targets) -> np.ndarray:
    """Per-row sum over classes of sigmoid cross-entropy (soft targets allowed)."""
    return (mil_pooling.softplus(logits) - targets * logits).sum(axis=-1)


def _targets(params, y, n_rows):
    Y = np.asarray(y, dtype=np.float64)
    if Y.size == n_rows * params.n_classes:
        Y = Y.reshape(n_rows, params.n_classes)
    if Y.shape != (n_rows, params.n_classes):
        raise ShapeError(f"targets have shape {Y.shape}, expected ({n_rows}, {params.n_classes})")
    return Y


def loss(params: MlpParams, x, y, reduction: str = "mean") -> float:
    X, _ = _as_batch(params, x)
    Y = _targets(params, y, X.shape[0])
    logits, _ = _forward(params, X)
    per = bce_with_logits(logits, Y)
    return float(per.sum() if reduction == "sum" else per.mean())


def backward(params: MlpParams, x, y, reduction: str = "mean"):
    """Gradients of the batch loss w.r.t. every parameter and the input.

    The input gradient of row i is the gradient of that row's own
    contribution to the reduced loss.
    """
    X, single = _as_batch(params, x)
    Y = _targets(params, y, X.shape[0])
    logits, cache = _forward(params, X)
    dlogits = mil_pooling.sigmoid(logits) - Y
    if reduction == "mean":
        dlogits = dlogits / X.shape[0]
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    grads, dX = _backward(params, cache, dlogits)
    return grads, (dX[0] if single else dX)


def penultimate(params: MlpParams, x) -> np.ndarray:
    """Unit-norm last hidden activation; raises ZeroVector for a dead ReLU layer."""
    _, h2 = forward(params, x)
    if h2.ndim == 1:
        return normalize(h2)
    return np.stack([normalize(h) for h in h2])


def penultimate_raw(params: MlpParams, X) -> np.ndarray:
    _, h2 = forward(params, np.atleast_2d(X))
    return h2


# --- multiple-instance bags -------------------------------------------------


def bag_logits(params: MlpParams, instances) -> np.ndarray:
    """Apply the MLP at every location of an (H, W, D) bag -> (H, W, N) logit grid."""
    inst = np.asarray(instances, dtype=np.float64)
    if inst.ndim != 3:
        raise ShapeError("bag must be H x W x D")
    H, W, D = inst.shape
    logits, _ = _forward(params, inst.reshape(H * W, D))
    return logits.reshape(H, W, params.n_classes)


def bag_backward(params: MlpParams, instances, y):
    """Noisy-OR loss of one bag and its gradients (params, instances)."""
    inst = np.asarray(instances, dtype=np.float64)
    H, W, D = inst.shape
    logits, cache = _forward(params, inst.reshape(H * W, D))
    grid = logits.reshape(H, W, params.n_classes)
    value = mil_pooling.mil_loss(grid, y)
    dgrid = mil_pooling.mil_loss_grad(grid, y)
    grads, dX = _backward(params, cache, dgrid.reshape(H * W, -1))
    return value, grads, dX.reshape(H, W, D)


# --- classifier adapter used by the perturbation routines --------------------


class MlpClassifier:
    """Read-only view of a parameter set exposing logits and input gradients."""

    def __init__(self, params: MlpParams):
        self.params = params

    def logits(self, X):
        X, _ = _as_batch(self.params, X)
        return _forward(self.params, X)[0]

    def input_grad(self, X, targets):
        X, _ = _as_batch(self.params, X)
        logits, cache = _forward(self.params, X)
        dlogits = mil_pooling.sigmoid(logits) - np.asarray(targets, dtype=np.float64).reshape(logits.shape)
        return _backward(self.params, cache, dlogits)[1]


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    lr_decay_factor: float = 0.1
    decay_steps: tuple[int, ...] = (3000, 4000)
    iterations: int = 5000
    batch_size: int = 16
    dropout_p: float = 0.5
    seed: int = 0
    log_every: int = 100
    monotone_window: int = 500

    def __post_init__(self):
        object.__setattr__(self, "decay_steps", tuple(int(s) for s in self.decay_steps))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        steps = self.decay_steps
        if any(b <= a for a, b in zip(steps, steps[1:])) or any(s >= self.iterations or s < 0 for s in steps):
            raise ValueError("decay_steps must be strictly increasing and below iterations")

    def lr_at(self, step: int) -> float:
        n = sum(1 for s in self.decay_steps if step >= s)
        return self.learning_rate * self.lr_decay_factor ** n


@dataclass(frozen=True)
class Regularizer:
    """Training regularizer.

    ``method`` is one of none, dropout, at, vat. Adversarial training uses the
    weighted mean ``(clean + weight * adversarial) / (1 + weight)``; virtual
    adversarial training adds ``weight * KL`` to the clean loss. Either way a
    zero ``epsilon`` reduces to plain cross-entropy.
    """

    method: str = "none"
    perturbation: perturbation.PerturbationConfig = perturbation.PerturbationConfig()
    weight: float = 1.0

    def __post_init__(self):
        if self.method not in ("none", "dropout", "at", "vat"):
            raise ValueError(f"unknown regularizer {self.method!r}")


@dataclass
class TrainResult:
    params: MlpParams
    curve: list[tuple[int, float]] = field(default_factory=list)
    monotone_violations: list[tuple[int, int]] = field(default_factory=list)


def _streams(seed: int):
    order, drop, vat = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(order), np.random.default_rng(drop), np.random.default_rng(vat)


def train(X, Y, cfg: TrainConfig = TrainConfig(), regularizer: Regularizer = Regularizer(),
          init: MlpParams | None = None) -> TrainResult:
    """Seeded mini-batch SGD; returns final parameters and a loss curve.

    Batch order, dropout masks and VAT start directions come from independent
    streams derived from ``cfg.seed``, so two methods trained with the same
    seed visit the same batches. ``init`` defaults to ``init_params`` at the
    same seed.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set must be a non-empty 2-D array")
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    params = (init if init is not None else init_params(X.shape[1], Y.shape[1], cfg.seed)).copy()
    if params.input_dim != X.shape[1] or params.n_classes != Y.shape[1]:
        raise ShapeError("initial parameters do not match the data")
    order_rng, drop_rng, vat_rng = _streams(cfg.seed)
    method = regularizer.method
    pcfg = regularizer.perturbation
    eps = pcfg.epsilon
    use_dropout = method == "dropout" and cfg.dropout_p > 0
    use_at = method == "at" and eps > 0
    use_vat = method == "vat" and eps > 0
    keep = 1.0 - cfg.dropout_p
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    w = regularizer.weight
    clf = MlpClassifier(params)

    result = TrainResult(params)
    perm = order_rng.permutation(n)
    pos = 0
    for step in range(cfg.iterations):
        if pos + bs > n:
            perm = order_rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + bs]
        pos += bs
        Xb, Yb = X[idx], Y[idx]
        m = Xb.shape[0]

        if use_at:
            Xadv = perturbation.fgsm_batch(clf, Xb, Yb, eps)
            Xs = np.concatenate([Xb, Xadv])
            Ts = np.concatenate([Yb, Yb])
            rw = np.concatenate([np.full(m, 1.0 / (1 + w)), np.full(m, w / (1 + w))]) / m
        elif use_vat:
            P = mil_pooling.sigmoid(clf.logits(Xb))
            Xv, _ = perturbation.vat_batch(clf, Xb, pcfg, vat_rng, clean_probs=P)
            Xs = np.concatenate([Xb, Xv])
            Ts = np.concatenate([Yb, P])
            rw = np.concatenate([np.ones(m), np.full(m, w)]) / m
        else:
            Xs, Ts, rw = Xb, Yb, None

        masks = None
        if use_dropout:
            masks = (
                (drop_rng.random((Xs.shape[0], params.W1.shape[0])) < keep) / keep,
                (drop_rng.random((Xs.shape[0], params.W2.shape[0])) < keep) / keep,
            )
        logits, cache = _forward(params, Xs, masks)
        dlogits = mil_pooling.sigmoid(logits) - Ts
        if rw is None:
            dlogits /= m
        else:
            dlogits *= rw[:, None]
        batch_loss = float(bce_with_logits(logits[:m], Ts[:m]).mean())
        if not np.isfinite(batch_loss):
            raise DivergenceError(step)
        grads, _ = _backward(params, cache, dlogits)
        lr = cfg.lr_at(step)
        for a, g in zip(params.arrays(), grads.arrays()):
            a -= lr * g
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            full = loss(params, X, Y)
            if not np.isfinite(full):
                raise DivergenceError(step)
            result.curve.append((step + 1, full))

    result.monotone_violations = monotone_violations(result.curve, cfg.monotone_window)
    return result


def monotone_violations(curve: Sequence[tuple[int, float]], window: int) -> list[tuple[int, int]]:
    """(start, end) iteration pairs where the loss rose across ``window`` iterations."""
    at = dict(curve)
    out = []
    for step, val in curve:
        later = at.get(step + window)
        if later is not None and later > val:
            out.append((step, step + window))
    return out


# --- checkpoints -------------------------------------------------------------


def params_to_json(params: MlpParams) -> str:
    arrays = {}
    for name in PARAM_NAMES:
        a = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        arrays[name] = {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}
    return json.dumps({"format": "viser-mlp", "version": 1, "arrays": arrays}, indent=1)


def params_from_json(text: str) -> MlpParams:
    obj = json.loads(text)
    if obj.get("format") != "viser-mlp" or obj.get("version") != 1:
        raise ValueError("not a viser-mlp v1 checkpoint")
    out = {}
    for name in PARAM_NAMES:
        spec = obj["arrays"][name]
        raw = base64.b64decode(spec["data"])
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).astype(np.float64)
    return MlpParams(**out)


def save_params(params: MlpParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(params_to_json(params))


def load_params(path) -> MlpParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_json(fh.read())

