"""Outils partagés des tests : jeux aléatoires et différences finies centrées."""

import numpy as np

from backend.models.model_zoo import Batch
from backend.reweighting.risks import AnnotatedDataset

FD_STEP = 1e-5


def make_dataset(rng, n=10, d=3, n_envs=2, n_groups=2, binary=True):
    """Petit jeu annoté aléatoire ; chaque environnement et groupe est non vide."""
    X = rng.uniform(-2.0, 2.0, size=(n, d))
    y = rng.integers(0, 2, size=n).astype(float) if binary else rng.normal(size=n)
    env_ids = np.arange(n) % n_envs
    group_ids = (np.arange(n) // 2) % n_groups
    return AnnotatedDataset(Batch(X, y), env_ids=env_ids, group_ids=group_ids)


def finite_difference(fn, x, step=FD_STEP):
    """Gradient de fn en x par différences centrées."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        grad[k] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
