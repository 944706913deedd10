"""
Risques OOD R(D, θ) : valeur et gradient par rapport à θ.

ERM, IRMv1 (convention du classifieur factice scalaire), REx (variance de
population entre environnements), GroupDRO (pire groupe) et CVaR-DRO (sup en
forme close sur la boule C(α)). Tous les gradients sont analytiques et
construits à partir des gradients par échantillon du zoo de modèles.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional
import logging

import numpy as np

from backend.models.model_zoo import (
    Batch,
    LossFamily,
    ModelSpec,
    ParamVector,
    forward,
    loss_derivatives,
    per_sample_output_grads,
)

logger = logging.getLogger(__name__)


class MissingAnnotationError(ValueError):
    """Annotation d'environnement / de groupe absente ou partition vide."""


class RiskKind(str, Enum):
    ERM = "ERM"
    IRMV1 = "IRMv1"
    REX = "REx"
    GROUP_DRO = "GroupDRO"
    CVAR = "CVaR"


@dataclass(frozen=True)
class RiskSpec:
    """Risque OOD : lambda ne sert qu'à IRMv1 / REx, alpha qu'à CVaR."""
    kind: RiskKind = RiskKind.ERM
    lam: float = 1.0
    alpha: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", RiskKind(self.kind))
        if self.lam < 0:
            raise ValueError(f"lambda doit etre positif ou nul (recu {self.lam})")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha doit etre dans ]0, 1] (recu {self.alpha})")


def _as_ids(ids) -> Optional[np.ndarray]:
    if ids is None:
        return None
    return np.asarray(ids, dtype=np.int64).reshape(-1)


@dataclass(frozen=True)
class AnnotatedDataset:
    """
    Jeu de données annoté : batch, environnements, groupes et poids optionnels.

    Les identifiants d'environnement et de groupe sont contigus à partir de 0.
    """
    batch: Batch
    env_ids: Optional[np.ndarray] = field(default=None, repr=False)
    group_ids: Optional[np.ndarray] = field(default=None, repr=False)
    weights: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.batch.n
        for name in ("env_ids", "group_ids"):
            ids = _as_ids(getattr(self, name))
            if ids is not None:
                if ids.shape[0] != n:
                    raise ValueError(f"{name} de longueur {ids.shape[0]} pour {n} echantillons")
                if ids.min() < 0:
                    raise ValueError(f"{name} doit etre positif ou nul")
            object.__setattr__(self, name, ids)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != n:
                raise ValueError(f"weights de longueur {w.shape[0]} pour {n} echantillons")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("Les poids doivent etre finis et positifs ou nuls")
            object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.batch.n

    @property
    def n_envs(self) -> int:
        return 0 if self.env_ids is None else int(self.env_ids.max()) + 1

    @property
    def n_groups(self) -> int:
        return 0 if self.group_ids is None else int(self.group_ids.max()) + 1

    def sample_weights(self) -> np.ndarray:
        return np.ones(self.n) if self.weights is None else self.weights

    def subset(self, indices) -> "AnnotatedDataset":
        indices = np.asarray(indices)
        return AnnotatedDataset(
            batch=self.batch.take(indices),
            env_ids=None if self.env_ids is None else self.env_ids[indices],
            group_ids=None if self.group_ids is None else self.group_ids[indices],
            weights=None if self.weights is None else self.weights[indices],
        )

    def with_weights(self, weights) -> "AnnotatedDataset":
        return replace(self, weights=weights)

    def without_groups(self) -> "AnnotatedDataset":
        """Copie sans annotations de groupe (ce que voit la boucle externe à l'entraînement)."""
        return replace(self, group_ids=None)


def _partition(data: AnnotatedDataset, ids: Optional[np.ndarray], what: str):
    if ids is None:
        raise MissingAnnotationError(f"Le risque demande des annotations de {what}")
    count = int(ids.max()) + 1
    members = [np.flatnonzero(ids == k) for k in range(count)]
    for k, idx in enumerate(members):
        if idx.size == 0:
            raise MissingAnnotationError(f"{what} {k} vide")
    return members


class _RiskTerms:
    """Quantités par échantillon partagées entre valeur et gradient."""

    def __init__(self, data: AnnotatedDataset, model: ModelSpec, params: ParamVector,
                 family: LossFamily, with_grads: bool):
        self.u = data.sample_weights()
        self.f = forward(model, params, data.batch)
        self.loss, self.d1, self.d2 = loss_derivatives(family, self.f, data.batch.labels)
        self.jac = per_sample_output_grads(model, params, data.batch) if with_grads else None

    def mean_loss(self, idx):
        return float(np.mean(self.u[idx] * self.loss[idx]))

    def mean_loss_grad(self, idx):
        return (self.u[idx] * self.d1[idx]) @ self.jac[idx] / idx.size

    def irm_dummy(self, idx):
        return float(np.mean(self.u[idx] * self.d1[idx] * self.f[idx]))

    def irm_dummy_grad(self, idx):
        coeff = self.u[idx] * (self.d2[idx] * self.f[idx] + self.d1[idx])
        return coeff @ self.jac[idx] / idx.size


def cvar_sup_weights(losses, alpha: float) -> np.ndarray:
    """
    Maximiseur de Σ w_i ℓ_i sur {w >= 0, ||w||_inf <= 1/(αn), ||w||_1 = 1}.

    Les ⌊αn⌋ plus grandes pertes reçoivent 1/(αn), la suivante reçoit le reste ;
    les égalités sont départagées par l'indice le plus petit.

    Args:
        losses: Pertes par échantillon
        alpha: Taille de la boule, dans ]0, 1]

    Returns:
        Vecteur de poids de longueur n
    """
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    n = losses.shape[0]
    if n < 1:
        raise ValueError("cvar_sup_weights demande au moins une perte")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha doit etre dans ]0, 1] (recu {alpha})")

    cap = 1.0 / (alpha * n)
    full = min(int(np.floor(alpha * n + 1e-12)), n)
    # tri décroissant stable : à perte égale, l'indice le plus petit passe en premier
    order = np.argsort(-losses, kind="stable")

    weights = np.zeros(n)
    weights[order[:full]] = cap
    remainder = 1.0 - full * cap
    if full < n and remainder > 1e-15:
        weights[order[full]] = remainder
    elif remainder < 0:
        # αn arrondi vers l'entier supérieur : on revient sur le simplexe
        weights /= weights.sum()
    return weights


def per_env_losses(data: AnnotatedDataset, model: ModelSpec, params: ParamVector,
                   family: LossFamily) -> np.ndarray:
    """Pertes moyennes L(D^e, θ) de chaque environnement."""
    terms = _RiskTerms(data, model, params, family, with_grads=False)
    return np.array([terms.mean_loss(idx) for idx in _partition(data, data.env_ids, "environnement")])


def per_group_losses(data: AnnotatedDataset, model: ModelSpec, params: ParamVector,
                     family: LossFamily) -> np.ndarray:
    """Pertes moyennes L(D^g, θ) de chaque groupe."""
    terms = _RiskTerms(data, model, params, family, with_grads=False)
    return np.array([terms.mean_loss(idx) for idx in _partition(data, data.group_ids, "groupe")])


def _evaluate(spec: RiskSpec, data: AnnotatedDataset, model: ModelSpec, params: ParamVector,
              family: LossFamily, with_grads: bool):
    terms = _RiskTerms(data, model, params, family, with_grads)
    everyone = np.arange(data.n)
    grad = None

    if spec.kind == RiskKind.ERM:
        value = terms.mean_loss(everyone)
        if with_grads:
            grad = terms.mean_loss_grad(everyone)

    elif spec.kind == RiskKind.IRMV1:
        envs = _partition(data, data.env_ids, "environnement")
        dummies = [terms.irm_dummy(idx) for idx in envs]
        value = sum(terms.mean_loss(idx) for idx in envs) + spec.lam * sum(d ** 2 for d in dummies)
        if with_grads:
            grad = sum(terms.mean_loss_grad(idx) + spec.lam * 2.0 * d * terms.irm_dummy_grad(idx)
                       for idx, d in zip(envs, dummies))

    elif spec.kind == RiskKind.REX:
        envs = _partition(data, data.env_ids, "environnement")
        env_losses = np.array([terms.mean_loss(idx) for idx in envs])
        centered = env_losses - env_losses.mean()
        value = float(env_losses.sum() + spec.lam * np.mean(centered ** 2))
        if with_grads:
            # la moyenne des écarts est nulle : le terme en ∇L̄ disparaît
            n_env = len(envs)
            grad = sum((1.0 + spec.lam * 2.0 * c / n_env) * terms.mean_loss_grad(idx)
                       for idx, c in zip(envs, centered))

    elif spec.kind == RiskKind.GROUP_DRO:
        groups = _partition(data, data.group_ids, "groupe")
        group_losses = np.array([terms.mean_loss(idx) for idx in groups])
        worst = int(np.argmax(group_losses))
        value = float(group_losses[worst])
        if with_grads:
            grad = terms.mean_loss_grad(groups[worst])

    else:
        weighted_losses = terms.u * terms.loss
        w_star = cvar_sup_weights(weighted_losses, spec.alpha)
        value = float(w_star @ weighted_losses)
        if with_grads:
            grad = (w_star * terms.u * terms.d1) @ terms.jac

    return value, grad


def risk_value(spec: RiskSpec, data: AnnotatedDataset, model: ModelSpec, params: ParamVector,
               family: LossFamily) -> float:
    """
    Valeur du risque OOD.

    Args:
        spec: Type de risque et hyperparamètres (λ, α)
        data: Données annotées (environnements pour IRMv1/REx, groupes pour GroupDRO)
        model: Architecture
        params: Paramètres θ
        family: Famille de perte

    Returns:
        R(D, θ) >= 0
    """
    value, _ = _evaluate(spec, data, model, params, family, with_grads=False)
    return value


def risk_grad(spec: RiskSpec, data: AnnotatedDataset, model: ModelSpec, params: ParamVector,
              family: LossFamily) -> np.ndarray:
    """Gradient analytique ∇_θ R(D, θ) (vecteur de longueur |θ|)."""
    _, grad = _evaluate(spec, data, model, params, family, with_grads=True)
    return np.asarray(grad, dtype=np.float64)
