import math

import numpy as np
import pytest

from viser.embedding import Corpus
from viser.errors import EmptyCorpus, NonFiniteGradient
from viser.model import MlpClassifier, init_params
from viser.neighbor_search import SearchParams
from viser.perturbation import (
    PerturbationConfig,
    fgsm_batch,
    fgsm_perturb,
    kl_bernoulli,
    kl_grad_analytic,
    kl_grad_fd,
    vat_batch,
    vat_perturb,
    viser_augment,
)


class Linear:
    """logits = X w + b with one sigmoid output."""

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = b

    def logits(self, X):
        return (np.asarray(X) @ self.w + self.b)[:, None]

    def input_grad(self, X, targets):
        p = 1.0 / (1.0 + np.exp(-self.logits(X)))
        return (p - np.asarray(targets).reshape(p.shape)) * self.w[None, :]


class Constant:
    def logits(self, X):
        return np.full((len(X), 1), 0.7)

    def input_grad(self, X, targets):
        return np.zeros(np.shape(X))


class Broken(Constant):
    def input_grad(self, X, targets):
        return np.full(np.shape(X), np.nan)


def angle_to_line(d, w):
    c = abs(float(d @ w)) / (np.linalg.norm(d) * np.linalg.norm(w))
    return math.acos(min(1.0, c))


def mlp(seed=0, dim=6):
    p = init_params(dim, 1, seed, hidden=20)
    p.b1[:] = 0.1
    return MlpClassifier(p)


def test_fgsm_examples():
    x = np.array([0.3, -1.2, 2.0])
    model = Linear([0.5, -2.0, 0.0])
    assert np.array_equal(fgsm_perturb(x, [0], model, 0.0), x)
    # y = 0: gradient is sigmoid(w.x) * w, so the step follows sign(w); sign(0) = 0
    assert np.array_equal(fgsm_perturb(x, [0], model, 0.1), x + 0.1 * np.array([1.0, -1.0, 0.0]))
    assert np.array_equal(fgsm_perturb(x, [1], model, 0.1), x - 0.1 * np.array([1.0, -1.0, 0.0]))
    with pytest.raises(NonFiniteGradient):
        fgsm_perturb(x, [1], Broken(), 0.1)


def test_fgsm_linf_norm():
    rng = np.random.default_rng(0)
    for _ in range(100):
        model = mlp(int(rng.integers(1000)))
        x = rng.normal(0, 2, 6)
        y = rng.integers(0, 2, 1)
        eps = float(rng.uniform(0.01, 1.0))
        xt = fgsm_perturb(x, y, model, eps)
        g = model.input_grad(x[None], y[None])[0]
        delta = np.abs(xt - x)
        assert delta.max() <= eps + 1e-12
        if np.all(g != 0):
            assert delta.max() == pytest.approx(eps, abs=1e-12)


def test_vat_constant_model_is_degenerate():
    res = vat_perturb(np.ones(5), Constant(), PerturbationConfig(epsilon=0.3), rng=1)
    assert res.degenerate
    assert np.linalg.norm(res.x - np.ones(5)) == pytest.approx(0.3, abs=1e-9)


@pytest.mark.parametrize("grad", ["analytic", "fd"])
def test_vat_logistic_direction(grad):
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = rng.normal(size=2)
        model = Linear(w, float(rng.normal()))
        x = rng.normal(size=2)
        res = vat_perturb(x, model, PerturbationConfig(epsilon=0.5, power_iters=2, grad=grad), rng=rng)
        assert not res.degenerate
        assert angle_to_line(res.x - x, w) < 1e-3


def test_vat_l2_norm():
    rng = np.random.default_rng(3)
    for _ in range(100):
        model = mlp(int(rng.integers(1000)))
        x = rng.normal(0, 2, 6)
        eps = float(rng.uniform(0.01, 2.0))
        res = vat_perturb(x, model, PerturbationConfig(epsilon=eps, power_iters=int(rng.integers(1, 3))), rng=rng)
        assert abs(np.linalg.norm(res.x - x) - eps) < 1e-9


def test_vat_is_reproducible():
    model = mlp(4)
    x = np.linspace(-1, 1, 6)
    cfg = PerturbationConfig(epsilon=0.4)
    assert np.array_equal(vat_perturb(x, model, cfg, rng=7).x, vat_perturb(x, model, cfg, rng=7).x)
    assert not np.array_equal(vat_perturb(x, model, cfg, rng=7).x, vat_perturb(x, model, cfg, rng=8).x)


def test_kl_bernoulli_against_direct_formula():
    rng = np.random.default_rng(5)
    a, b = rng.normal(0, 2, (10, 3)), rng.normal(0, 2, (10, 3))
    p, q = 1 / (1 + np.exp(-a)), 1 / (1 + np.exp(-b))
    direct = (p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))).sum(axis=1)
    np.testing.assert_allclose(kl_bernoulli(a, b), direct, rtol=1e-10, atol=1e-15)
    assert np.all(kl_bernoulli(a, a) == 0)


def test_kl_gradient_routes_agree():
    rng = np.random.default_rng(6)
    for _ in range(20):
        model = mlp(int(rng.integers(1000)))
        X = rng.normal(0, 1, (4, 6))
        R = rng.normal(0, 0.2, (4, 6))
        clean = model.logits(X)
        fd = kl_grad_fd(model, X, R, clean, 1e-5)
        an = kl_grad_analytic(model, X, R, 1 / (1 + np.exp(-clean)))
        np.testing.assert_allclose(an, fd, rtol=1e-5, atol=1e-9)


def test_vat_routes_pick_same_direction():
    rng = np.random.default_rng(7)
    model = mlp(11)
    X = rng.normal(0, 1, (8, 6))
    a, _ = vat_batch(model, X, PerturbationConfig(epsilon=1.0, grad="analytic"), np.random.default_rng(1))
    b, _ = vat_batch(model, X, PerturbationConfig(epsilon=1.0, grad="fd"), np.random.default_rng(1))
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_zero_epsilon_is_identity():
    X = np.random.default_rng(8).normal(size=(3, 6))
    assert np.array_equal(fgsm_batch(mlp(), X, np.ones((3, 1)), 0.0), X)
    assert np.array_equal(vat_batch(mlp(), X, PerturbationConfig(epsilon=0.0), np.random.default_rng(0))[0], X)


@pytest.mark.parametrize("kw", [{"epsilon": -1}, {"xi": 0}, {"power_iters": 0}, {"grad": "other"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PerturbationConfig(**kw)


def test_viser_augment_copy_doubles():
    rng = np.random.default_rng(9)
    v = rng.normal(size=(6, 4))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    labels = [(0,), (), (1,), (0, 1), (), (1,)]
    lab = Corpus(np.arange(6), v, labels)
    unl = Corpus(np.arange(100, 106), v.copy())
    aug = viser_augment(lab, unl, SearchParams(k_m=6, k_r=3), n_classes=2)
    assert aug.n_added == 6 and aug.X.shape == (12, 4)
    assert np.array_equal(aug.X[6:], v)
    assert np.array_equal(aug.Y[6:], aug.Y[:6])
    assert aug.Y[3].tolist() == [1.0, 1.0]


def test_viser_augment_never_fabricates_labels():
    rng = np.random.default_rng(10)
    v = rng.normal(size=(30, 5))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    u = rng.normal(size=(200, 5))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    labels = [tuple(sorted(set(rng.integers(0, 4, rng.integers(0, 3)).tolist()))) for _ in range(30)]
    aug = viser_augment(Corpus(np.arange(30), v, labels), Corpus(np.arange(200), u),
                        SearchParams(k_m=5, k_r=4, shard_count=3), take=3, n_classes=4)
    existing = {tuple(r) for r in aug.Y[:30]}
    assert all(tuple(r) in existing for r in aug.Y[30:])
    assert {s.labels for s in aug.samples} <= set(labels)


def test_viser_augment_empty_unlabeled():
    lab = Corpus([0], [[1.0, 0.0]], [(0,)])
    with pytest.raises(EmptyCorpus):
        viser_augment(lab, Corpus(np.empty(0), np.empty((0, 2))), n_classes=1)
