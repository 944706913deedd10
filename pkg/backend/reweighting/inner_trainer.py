"""
Boucle interne : ERM pondéré par descente de gradient (pleine ou stochastique).

L'entraînement renvoie θ_T, θ_{T-1} et la trace de la perte, ce dont a besoin la
rétropropagation tronquée à un pas. Le module fournit aussi un solveur exact des
moindres carrés pondérés pour les vérifications linéaires.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional
import logging

import numpy as np

from backend.models.model_zoo import (
    Batch,
    LossFamily,
    ModelSpec,
    ParamVector,
    init_params as default_init,
    per_sample_loss_grads,
)
from backend.reweighting.risks import AnnotatedDataset

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Perte ou paramètres non finis pendant l'entraînement interne."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        message = f"Divergence de la boucle interne au pas {step}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class SingularSystemError(np.linalg.LinAlgError):
    """Système des moindres carrés singulier (pas de pseudo-inverse silencieuse)."""


class InnerOptimizer(str, Enum):
    GD = "GD"
    SGD = "SGD"


@dataclass(frozen=True)
class InnerConfig:
    """Programme de la boucle interne (valeurs par défaut : table d'hyperparamètres ColoredMNIST)."""
    steps: int = 100
    learning_rate: float = 0.1
    weight_decay: float = 0.1
    optimizer: InnerOptimizer = InnerOptimizer.GD
    batch_size: Optional[int] = None
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "optimizer", InnerOptimizer(self.optimizer))
        if self.steps < 1:
            raise ValueError(f"steps doit etre >= 1 (recu {self.steps})")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate doit etre strictement positif")
        if self.weight_decay < 0:
            raise ValueError("weight_decay doit etre positif ou nul")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size doit etre positif")


@dataclass(frozen=True)
class TrainResult:
    theta_T: ParamVector
    theta_Tm1: ParamVector
    loss_trace: np.ndarray
    # indices du dernier mini-batch (None : batch complet)
    last_batch: Optional[np.ndarray] = None


def _check_weights(weights, n: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != n:
        raise ValueError(f"{weights.shape[0]} poids pour {n} echantillons")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError("Les poids effectifs doivent etre finis et positifs ou nuls")
    return weights


def weighted_objective(params: ParamVector, batch: Batch, weights: np.ndarray, model: ModelSpec,
                       family: LossFamily, weight_decay: float, indices=None):
    """
    Objectif interne (1/|B|) Σ_{i∈B} w_i ℓ_i(θ) + weight_decay ||θ||² / 2 et son gradient.

    Sans mini-batch, |B| = n et l'on retrouve l'objectif (1/n) Σ w_i ℓ_i. Avec un
    mini-batch on garde la normalisation par |B| : la moyenne de l'objectif sur les
    batchs d'une partition du jeu vaut l'objectif complet. Seules les lignes de poids
    non nul passent dans le modèle, le dénominateur reste |B|.

    Args:
        indices: Mini-batch B (None : tout le jeu)

    Returns:
        (valeur, gradient)
    """
    if indices is not None:
        batch = batch.take(indices)
        weights = weights[indices]
    penalty = 0.5 * weight_decay * float(params @ params)
    active = np.flatnonzero(weights)
    if active.size == 0:
        return penalty, weight_decay * params
    if active.size < batch.n:
        kept, kept_weights = batch.take(active), weights[active]
    else:
        kept, kept_weights = batch, weights
    losses, grads = per_sample_loss_grads(model, params, kept, family)
    value = float(kept_weights @ losses) / batch.n + penalty
    grad = kept_weights @ grads / batch.n + weight_decay * params
    return value, grad


def gd_step(params: ParamVector, batch: Batch, weights: np.ndarray, model: ModelSpec,
            family: LossFamily, cfg: InnerConfig, indices=None):
    """Un pas de descente θ ← θ - η ∇L(θ; w). Renvoie (nouveaux paramètres, perte avant le pas)."""
    value, grad = weighted_objective(params, batch, weights, model, family, cfg.weight_decay, indices)
    return params - cfg.learning_rate * grad, value


def _batch_schedule(n: int, cfg: InnerConfig):
    """Ordre des mini-batchs : une permutation graine par époque, batchs contigus."""
    if cfg.optimizer == InnerOptimizer.GD or cfg.batch_size is None or cfg.batch_size >= n:
        return [None] * cfg.steps

    rng = np.random.default_rng(np.random.SeedSequence([cfg.init_seed, 7919]))
    size = cfg.batch_size
    schedule = []
    order = rng.permutation(n)
    cursor = 0
    for _ in range(cfg.steps):
        if cursor + size > n:
            order = rng.permutation(n)
            cursor = 0
        schedule.append(np.sort(order[cursor:cursor + size]))
        cursor += size
    return schedule


def train_weighted_erm(data: AnnotatedDataset, effective_weights, model: ModelSpec,
                       family: LossFamily, cfg: InnerConfig,
                       init_params: Optional[ParamVector] = None) -> TrainResult:
    """
    Entraîne le modèle par ERM pondéré pendant T pas depuis une initialisation neuve.

    Args:
        data: Données d'entraînement (seul le batch est utilisé)
        effective_weights: Poids effectifs w∘m, finis et positifs ou nuls
        model: Architecture
        family: Famille de perte
        cfg: Programme de la boucle interne
        init_params: Point de départ imposé (sinon initialisation graine cfg.init_seed)

    Returns:
        TrainResult avec θ_T, θ_{T-1}, la trace de la perte et le dernier mini-batch
    """
    batch = data.batch
    weights = _check_weights(effective_weights, batch.n)
    params = default_init(model, cfg.init_seed) if init_params is None else \
        np.array(init_params, dtype=np.float64).reshape(-1)

    schedule = _batch_schedule(batch.n, cfg)
    trace = np.empty(cfg.steps)
    previous = params
    for step, indices in enumerate(schedule):
        previous = params
        params, value = gd_step(params, batch, weights, model, family, cfg, indices)
        if not np.isfinite(value):
            raise DivergenceError(step, "perte non finie")
        if not np.all(np.isfinite(params)):
            raise DivergenceError(step, "parametres non finis")
        trace[step] = value

    logger.debug(f"Boucle interne terminee: perte initiale {trace[0]:.4g}, finale {trace[-1]:.4g}")
    return TrainResult(theta_T=params, theta_Tm1=previous, loss_trace=trace, last_batch=schedule[-1])


def solve_weighted_least_squares(X, y, w, ridge: float = 0.0) -> ParamVector:
    """
    argmin_θ Σ w_i (y_i - x_iᵀθ)² + ridge ||θ||².

    On résout le système mis à l'échelle par √w (augmenté de √ridge·I) par
    moindres carrés QR/SVD plutôt que par les équations normales.

    Args:
        X: Matrice n x d
        y: Réponses de longueur n
        w: Poids positifs ou nuls, de somme strictement positive
        ridge: Régularisation (>= 0)

    Returns:
        θ de longueur d
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n, d = X.shape
    if y.shape[0] != n or w.shape[0] != n:
        raise ValueError(f"Dimensions incompatibles: X {X.shape}, y {y.shape}, w {w.shape}")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("Les poids doivent etre positifs ou nuls, de somme strictement positive")
    if ridge < 0:
        raise ValueError("ridge doit etre positif ou nul")

    root = np.sqrt(w)
    A = X * root[:, None]
    b = y * root
    if ridge > 0:
        A = np.vstack([A, np.sqrt(ridge) * np.eye(d)])
        b = np.concatenate([b, np.zeros(d)])

    theta, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < d:
        raise SingularSystemError(f"Systeme des moindres carres singulier (rang {rank} < {d})")
    return theta
