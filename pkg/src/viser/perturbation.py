"""Training-time perturbations: FGSM, virtual adversarial, and neighbor-based.

The adversarial routines work with any classifier object exposing

* ``logits(X) -> (n, N)`` for a batch of inputs, and
* ``input_grad(X, targets) -> (n, D)``: per-row gradient of the summed
  sigmoid cross-entropy against (possibly soft) targets.

Sigmoid outputs are treated as independent Bernoulli variables, so the KL
between two output distributions is a sum of Bernoulli KLs over the N bits.
Its gradient w.r.t. the perturbed logits is ``sigmoid(b) - p``, which is the
cross-entropy gradient with soft target ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import Corpus
from .errors import EmptyCorpus, NonFiniteGradient
from .mil_pooling import sigmoid, softplus
from .neighbor_search import RegularizedSample, SearchParams, label_bits, search, transfer_labels

# gradient norms at or below this count as "no direction"
DEGENERATE_NORM = 1e-30


@dataclass(frozen=True)
class PerturbationConfig:
    """``epsilon``: L-inf radius for FGSM, L2 radius for VAT.

    ``xi`` of None means 1e-6 * sqrt(D). ``grad`` selects how VAT obtains the
    KL gradient: "analytic" backpropagates, "fd" uses central differences over
    the input coordinates (cost 2*D model evaluations per power iteration)
    with step ``fd_step``, defaulting to ``xi``.
    """

    epsilon: float = 0.5
    xi: float | None = None
    power_iters: int = 1
    grad: str = "analytic"
    fd_step: float | None = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.xi is not None and not self.xi > 0:
            raise ValueError("xi must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if self.grad not in ("analytic", "fd"):
            raise ValueError(f"unknown gradient method {self.grad!r}")

    def xi_for(self, dim: int) -> float:
        return self.xi if self.xi is not None else 1e-6 * np.sqrt(dim)


# --- FGSM --------------------------------------------------------------------


def fgsm_batch(model, X, Y, eps: float) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if eps == 0:
        return X.copy()
    g = model.input_grad(X, Y)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("input gradient has non-finite entries")
    return X + eps * np.sign(g)


def fgsm_perturb(x, y, model, eps: float) -> np.ndarray:
    """``x + eps * sign(grad_x loss(x, y))`` with sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return fgsm_batch(model, x[None, :], y[None, :], eps)[0]


# --- virtual adversarial -----------------------------------------------------


def kl_bernoulli(clean_logits, pert_logits) -> np.ndarray:
    """Row-wise sum over bits of KL[Bern(sigmoid(a)) || Bern(sigmoid(b))]."""
    a = np.asarray(clean_logits, dtype=np.float64)
    b = np.asarray(pert_logits, dtype=np.float64)
    p = sigmoid(a)
    delta = b - a
    wide = p * (softplus(-b) - softplus(-a)) + (1 - p) * (softplus(b) - softplus(a))
    # same quantity without cancelling O(1) terms; exact to O(eps * delta)
    with np.errstate(over="ignore", invalid="ignore"):
        near = np.log1p(p * np.expm1(delta)) - p * delta
    kl = np.where(np.abs(delta) < 1.0, near, wide)
    return kl.sum(axis=-1)


def _unit_rows(d):
    norms = np.sqrt((d * d).sum(axis=1, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        return d / norms, norms[:, 0]


def kl_grad_fd(model, X, R, clean_logits, step: float) -> np.ndarray:
    """Central-difference gradient of KL[p(.|x) || p(.|x + r)] w.r.t. r."""
    n, dim = X.shape
    eye = np.eye(dim) * step
    base = (X + R)[:, None, :]
    probe = np.concatenate([base + eye, base - eye], axis=1).reshape(n * 2 * dim, dim)
    logits = model.logits(probe).reshape(n, 2 * dim, -1)
    kl = kl_bernoulli(np.repeat(clean_logits[:, None, :], 2 * dim, axis=1), logits)
    return (kl[:, :dim] - kl[:, dim:]) / (2 * step)


def kl_grad_analytic(model, X, R, clean_probs) -> np.ndarray:
    return model.input_grad(X + R, clean_probs)


def vat_batch(model, X, cfg: PerturbationConfig, rng: np.random.Generator, clean_probs=None):
    """Virtual adversarial points for each row of ``X``.

    Returns ``(X + eps * d, degenerate)`` where ``d`` is the unit power-iteration
    direction per row and ``degenerate`` marks rows whose KL gradient vanished
    (those keep their random start direction).
    """
    X = np.asarray(X, dtype=np.float64)
    n, dim = X.shape
    d, _ = _unit_rows(rng.standard_normal((n, dim)))
    degenerate = np.zeros(n, dtype=bool)
    if cfg.epsilon == 0:
        return X.copy(), degenerate
    clean_logits = model.logits(X)
    if clean_probs is None:
        clean_probs = sigmoid(clean_logits)
    xi = cfg.xi_for(dim)
    d0 = d
    for _ in range(cfg.power_iters):
        if cfg.grad == "fd":
            g = kl_grad_fd(model, X, xi * d, clean_logits, cfg.fd_step or xi)
        else:
            g = kl_grad_analytic(model, X, xi * d, clean_probs)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("KL gradient has non-finite entries")
        unit, norms = _unit_rows(g)
        dead = ~(norms > DEGENERATE_NORM)
        degenerate |= dead
        d = np.where(dead[:, None], d, unit)
    d = np.where(degenerate[:, None], d0, d)
    return X + cfg.epsilon * d, degenerate


@dataclass
class VatResult:
    x: np.ndarray
    direction: np.ndarray
    degenerate: bool


def vat_perturb(x, model, cfg: PerturbationConfig, rng=None) -> VatResult:
    """Move ``x`` a distance ``epsilon`` along the approximate KL-maximizing direction.

    ``rng`` may be a Generator or an integer seed; the start direction is the
    only randomness, so a fixed seed makes the result bit-reproducible.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    xs, deg = vat_batch(model, x[None, :], cfg, rng)
    direction = (xs[0] - x) / cfg.epsilon if cfg.epsilon else np.zeros_like(x)
    return VatResult(xs[0], direction, bool(deg[0]))


# --- neighbor-based regularizers ---------------------------------------------


@dataclass
class AugmentedSet:
    X: np.ndarray
    Y: np.ndarray
    samples: list[RegularizedSample]
    n_labeled: int

    @property
    def n_added(self) -> int:
        return len(self.samples)


def viser_augment(labeled: Corpus, unlabeled: Corpus, params: SearchParams = SearchParams(), take: int = 1,
                  *, n_classes: int, labeled_features=None, unlabeled_features=None) -> AugmentedSet:
    """Labeled set plus each labeled sample's nearest unlabeled points under its labels.

    ``labeled`` and ``unlabeled`` hold embeddings (and, for ``labeled``, the
    class-index labels). The returned rows are the training inputs given by
    ``*_features`` (row-aligned with the corpora), defaulting to the
    embeddings themselves.
    """
    if len(unlabeled) == 0:
        raise EmptyCorpus("unlabeled corpus is empty")
    if labeled.labels is None:
        raise ValueError("labeled corpus carries no labels")
    lf = labeled.vectors if labeled_features is None else np.asarray(labeled_features, dtype=np.float64)
    uf = unlabeled.vectors if unlabeled_features is None else np.asarray(unlabeled_features, dtype=np.float64)
    matches = search(labeled, unlabeled, params)
    samples = transfer_labels(matches, labeled.label_table(), take=take)
    Y0 = np.stack([label_bits(lab, n_classes) for lab in labeled.labels]).astype(np.float64)
    if not samples:
        return AugmentedSet(lf.copy(), Y0, [], len(labeled))
    rows = [unlabeled.position(s.features_source_id) for s in samples]
    X = np.concatenate([lf, uf[rows]])
    Y = np.concatenate([Y0, np.stack([label_bits(s.labels, n_classes) for s in samples]).astype(np.float64)])
    return AugmentedSet(X, Y, samples, len(labeled))
