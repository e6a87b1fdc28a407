"""Two-class multimodal 2-D Gaussian mixture lifted linearly into R^100.

Each class owns ``modes_per_class`` Gaussian modes with random means and
covariances. The labeled set draws ``train_per_mode`` points from every mode;
unlabeled and test points alternate classes and pick a mode uniformly within
the class. The lift is a random matrix with orthonormal columns, so latent
geometry is preserved exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# calibrated so cross-entropy test error lands near 9% at the default training schedule
MEAN_RANGE = (-6.0, 6.0)
SCALE_RANGE = (0.1, 0.3)
CONTOUR_EXTENT = 6.0


@dataclass(frozen=True)
class SyntheticSpec:
    modes_per_class: int = 8
    train_per_mode: int = 1
    n_unlabeled: int = 1000
    n_test: int = 1000
    ambient_dim: int = 100
    latent_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("modes_per_class", "train_per_mode", "n_unlabeled", "n_test", "ambient_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ambient_dim < self.latent_dim:
            raise ValueError("ambient_dim must be >= latent_dim")


@dataclass(frozen=True)
class Split:
    """Parallel arrays; ``x`` holds ambient vectors, ``z`` latent points."""

    x: np.ndarray
    z: np.ndarray
    cls: np.ndarray
    mode: np.ndarray

    def __len__(self):
        return int(self.cls.shape[0])


@dataclass(frozen=True)
class SyntheticDataset:
    spec: SyntheticSpec
    train: Split
    unlabeled: Split
    test: Split
    embedding_matrix: np.ndarray
    means: np.ndarray  # (2 * modes_per_class, latent_dim); mode m belongs to class m // modes_per_class
    covs: np.ndarray

    def mode_class(self, mode):
        return np.asarray(mode) // self.spec.modes_per_class

    def lift(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.embedding_matrix.T

    def recover_latent(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ np.linalg.pinv(self.embedding_matrix).T


def _rotation_cov(angle, s1, s2):
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag([s1 * s1, s2 * s2]) @ R.T


def _draw(rng, means, chols, modes):
    eps = rng.standard_normal((len(modes), means.shape[1]))
    return means[modes] + np.einsum("nij,nj->ni", chols[modes], eps)


def _split(rng, means, chols, modes, lift):
    z = _draw(rng, means, chols, modes)
    return Split(z @ lift.T, z, modes // (len(means) // 2), modes)


def _mixture_modes(rng, n, modes_per_class):
    cls = np.arange(n) % 2
    return cls * modes_per_class + rng.integers(0, modes_per_class, size=n)


def generate(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticDataset:
    m = spec.modes_per_class
    n_modes = 2 * m
    mode_rng, train_rng, unl_rng, test_rng, lift_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(5)
    )
    if spec.latent_dim != 2:
        raise ValueError("only 2-D latent mixtures are supported")

    means = mode_rng.uniform(*MEAN_RANGE, size=(n_modes, 2))
    angles = mode_rng.uniform(0.0, np.pi, size=n_modes)
    scales = mode_rng.uniform(*SCALE_RANGE, size=(n_modes, 2))
    covs = np.stack([_rotation_cov(a, s[0], s[1]) for a, s in zip(angles, scales)])
    chols = np.linalg.cholesky(covs)

    g = lift_rng.standard_normal((spec.ambient_dim, spec.latent_dim))
    q, r = np.linalg.qr(g)
    lift = q * np.sign(np.diag(r))

    train_modes = np.repeat(np.arange(n_modes), spec.train_per_mode)
    train = _split(train_rng, means, chols, train_modes, lift)
    unlabeled = _split(unl_rng, means, chols, _mixture_modes(unl_rng, spec.n_unlabeled, m), lift)
    test = _split(test_rng, means, chols, _mixture_modes(test_rng, spec.n_test, m), lift)
    return SyntheticDataset(spec, train, unlabeled, test, lift, means, covs)


def mode_log_densities(dataset: SyntheticDataset, z) -> np.ndarray:
    """(n, n_modes) Gaussian log densities of latent points under every mode."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    out = np.empty((z.shape[0], len(dataset.means)))
    for k, (mu, cov) in enumerate(zip(dataset.means, dataset.covs)):
        diff = z - mu
        sol = np.linalg.solve(cov, diff.T).T
        _, logdet = np.linalg.slogdet(cov)
        out[:, k] = -0.5 * (np.einsum("ni,ni->n", diff, sol) + logdet + 2 * np.log(2 * np.pi))
    return out


def nearest_mode_error(dataset: SyntheticDataset, split: str = "test") -> float:
    """Test error (%) of assigning each point the class of its most likely true mode."""
    s = getattr(dataset, split)
    pred = dataset.mode_class(np.argmax(mode_log_densities(dataset, s.z), axis=1))
    return 100.0 * float(np.mean(pred != s.cls))


def latent_lattice(resolution: int, extent: float = CONTOUR_EXTENT) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-extent, extent, resolution)
    zx, zy = np.meshgrid(axis, axis)
    return axis, np.stack([zx.ravel(), zy.ravel()], axis=1)


def contour_grid(predict, dataset: SyntheticDataset, resolution: int = 101) -> np.ndarray:
    """p(y=1|x) on a resolution x resolution lattice over latent [-6, 6]^2.

    ``predict`` maps an (n, ambient_dim) array to n probabilities. Row i of
    the result is the second latent coordinate ``axis[i]``, column j the
    first.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    _, pts = latent_lattice(resolution)
    p = np.asarray(predict(dataset.lift(pts)), dtype=np.float64).reshape(-1)
    return p.reshape(resolution, resolution)
