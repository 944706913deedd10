"""
Boucle externe : apprentissage des poids d'échantillons par optimisation bi-niveau.

Hypergradients tronqués à un pas pour w et s, masques échantillonnés par
différence de deux Gumbel avec estimateur straight-through, pas d'Adam,
projection sur l'ensemble admissible et pilote complet de l'algorithme.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple
import logging
import time

import numpy as np
import pandas as pd

from backend.models.model_zoo import (
    DimensionError,
    LossFamily,
    ModelSpec,
    ParamVector,
    per_sample_loss_grads,
    predict_labels,
)
from backend.reweighting.inner_trainer import InnerConfig, TrainResult, train_weighted_erm
from backend.reweighting.projections import project_capped_box_simplex, project_nonneg
from backend.reweighting.risks import AnnotatedDataset, RiskSpec, risk_grad, risk_value

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PROBABILITY_CLAMP = 1e-6
SATURATION_MARGIN = 0.1
KEEP_THRESHOLD = 0.5


@dataclass(frozen=True)
class AdamSlot:
    """Moments d'Adam et compteur de pas pour un bloc de variables."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamSlot":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(slot: AdamSlot, params, grad, lr: float) -> Tuple[np.ndarray, AdamSlot]:
    """
    Un pas d'Adam standard (β1 = 0.9, β2 = 0.999, ε = 1e-8, correction du biais).

    Returns:
        (paramètres mis à jour, nouvel état d'Adam)
    """
    grad = np.asarray(grad, dtype=np.float64)
    step = slot.step + 1
    m = ADAM_BETA1 * slot.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * slot.v + (1.0 - ADAM_BETA2) * grad ** 2
    m_hat = m / (1.0 - ADAM_BETA1 ** step)
    v_hat = v / (1.0 - ADAM_BETA2 ** step)
    updated = np.asarray(params, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return updated, AdamSlot(m=m, v=v, step=step)


@dataclass(frozen=True)
class MaskSample:
    """Masque dur m et logits perturbés utilisés par la passe arrière straight-through."""
    m: np.ndarray
    soft_logits: np.ndarray
    temperature: float = 1.0

    @classmethod
    def all_ones(cls, n: int, temperature: float = 1.0) -> "MaskSample":
        return cls(m=np.ones(n), soft_logits=np.full(n, np.inf), temperature=temperature)


def _logit(s: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(s) - np.log1p(-s)


def sample_mask(s, temperature: float, rng: np.random.Generator) -> MaskSample:
    """
    Tire m_i = 1(log(s_i / (1 - s_i)) + g1 - g0 >= 0) avec g0, g1 ~ Gumbel(0, 1).

    La différence de deux Gumbel indépendantes suit une loi logistique : P(m_i = 1) = s_i.
    s_i = 0 ou 1 donnent un masque déterministe.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if temperature <= 0:
        raise ValueError("La temperature doit etre strictement positive")
    if not np.all(np.isfinite(s)):
        raise ValueError("Probabilites non finies")
    g1 = rng.gumbel(size=s.shape[0])
    g0 = rng.gumbel(size=s.shape[0])
    soft_logits = _logit(np.clip(s, 0.0, 1.0)) + g1 - g0
    return MaskSample(m=(soft_logits >= 0).astype(np.float64), soft_logits=soft_logits,
                      temperature=temperature)


def straight_through_factor(s: np.ndarray, mask: MaskSample) -> np.ndarray:
    """
    ∂m̃_i/∂s_i pour m̃ = σ(z / τ), z = logit(s) + g1 - g0.

    Vaut σ'(z/τ)/τ · 1/(s(1-s)), avec s borné dans [1e-6, 1 - 1e-6] ; nul si s_i vaut exactement 0 ou 1.
    """
    s = np.asarray(s, dtype=np.float64)
    tau = mask.temperature
    interior = (s > 0.0) & (s < 1.0)
    clamped = np.clip(s, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    z = np.where(interior, mask.soft_logits, 0.0) / tau
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    factor = sig * (1.0 - sig) / tau / (clamped * (1.0 - clamped))
    return np.where(interior, factor, 0.0)


def _contractions(theta_T, theta_Tm1, data_tr: AnnotatedDataset, data_v: AnnotatedDataset,
                  risk: RiskSpec, model: ModelSpec, family: LossFamily, last_batch=None):
    """⟨∇_θ R(D_v, θ_T), ∇_θ ℓ_i(θ_{T-1})⟩ / |B| pour chaque échantillon du dernier batch."""
    theta_T = np.asarray(theta_T, dtype=np.float64).reshape(-1)
    theta_Tm1 = np.asarray(theta_Tm1, dtype=np.float64).reshape(-1)
    if theta_T.shape != theta_Tm1.shape or theta_T.shape[0] != model.n_params:
        raise DimensionError(
            f"theta_T {theta_T.shape} / theta_Tm1 {theta_Tm1.shape} pour {model.n_params} parametres")

    val_grad = risk_grad(risk, data_v, model, theta_T, family)
    _, train_grads = per_sample_loss_grads(model, theta_Tm1, data_tr.batch, family)
    contraction = train_grads @ val_grad

    n = data_tr.n
    if last_batch is None:
        return contraction / n
    in_batch = np.zeros(n, dtype=bool)
    in_batch[np.asarray(last_batch)] = True
    return np.where(in_batch, contraction / in_batch.sum(), 0.0)


def hypergrad_w(theta_T, theta_Tm1, data_tr: AnnotatedDataset, data_v: AnnotatedDataset,
                risk: RiskSpec, model: ModelSpec, family: LossFamily,
                mask: Optional[MaskSample] = None, last_batch=None) -> np.ndarray:
    """
    Hypergradient tronqué à un pas par rapport aux poids w.

    g_i = (m_i / n) ⟨∇_θ R(D_v, θ_T), ∇_θ ℓ_i(θ_{T-1})⟩. Le facteur -η_θ du
    dernier pas interne est constant : il est absorbé dans le pas externe et
    le signe est appliqué par l'appelant (la vraie dérivée vaut -η_θ g).

    Args:
        theta_T, theta_Tm1: Paramètres final et avant-dernier de la boucle interne
        data_tr: Données d'entraînement
        data_v: Données de validation (annotations requises par le risque)
        risk: Risque OOD externe
        model: Architecture
        family: Famille de perte
        mask: Masque échantillonné (None : tous les échantillons)
        last_batch: Dernier mini-batch en SGD (None : batch complet)

    Returns:
        Vecteur de longueur n
    """
    contraction = _contractions(theta_T, theta_Tm1, data_tr, data_v, risk, model, family, last_batch)
    m = np.ones(data_tr.n) if mask is None else np.asarray(mask.m, dtype=np.float64)
    return m * contraction


def hypergrad_s(theta_T, theta_Tm1, data_tr: AnnotatedDataset, data_v: AnnotatedDataset,
                risk: RiskSpec, model: ModelSpec, family: LossFamily,
                state: "ReweightState", mask: MaskSample, last_batch=None) -> np.ndarray:
    """
    Hypergradient par rapport aux probabilités s (straight-through Gumbel).

    g_i = (w_i / n) ⟨∇_θ R(D_v, θ_T), ∇_θ ℓ_i(θ_{T-1})⟩ · ∂m̃_i/∂s_i, même convention de signe que hypergrad_w.
    """
    contraction = _contractions(theta_T, theta_Tm1, data_tr, data_v, risk, model, family, last_batch)
    return state.w * contraction * straight_through_factor(state.s, mask)


@dataclass(frozen=True)
class OuterConfig:
    """Boucle externe (pas par défaut : 0.25 pour w, 5e-2 pour s, Adam)."""
    iterations: int = 100
    lr_w: float = 0.25
    lr_s: float = 5e-2
    risk: RiskSpec = field(default_factory=RiskSpec)
    temperature: float = 1.0
    sparsity_enabled: bool = True
    seed: int = 0
    normalize_weights: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations doit etre positif ou nul")
        if self.lr_w <= 0 or self.lr_s <= 0:
            raise ValueError("Les pas externes doivent etre strictement positifs")
        if self.temperature <= 0:
            raise ValueError("La temperature doit etre strictement positive")


@dataclass(frozen=True)
class ReweightState:
    w: np.ndarray
    s: np.ndarray
    K: float
    adam_w: AdamSlot
    adam_s: AdamSlot

    @classmethod
    def initial(cls, n: int, K: float, sparsity_enabled: bool = True) -> "ReweightState":
        s = np.full(n, K / n) if sparsity_enabled else np.ones(n)
        return cls(w=np.ones(n), s=s, K=float(K), adam_w=AdamSlot.zeros(n), adam_s=AdamSlot.zeros(n))

    def is_feasible(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.w >= 0) and np.all(self.s >= 0) and np.all(self.s <= 1)
                    and self.s.sum() <= self.K + tol)


@dataclass(frozen=True)
class WeightedCoreset:
    """Sortie de l'algorithme : échantillons conservés et leurs poids."""
    indices: np.ndarray
    weights: np.ndarray
    threshold_mask: np.ndarray
    sampled_mask: np.ndarray

    def effective_weights(self, n: int) -> np.ndarray:
        full = np.zeros(n)
        full[self.indices] = self.weights
        return full


def derive_seed(run_seed: int, *path: int) -> int:
    """Graine déterministe dérivée de (graine du run, itération externe, ...)."""
    return int(np.random.SeedSequence([int(run_seed), *map(int, path)]).generate_state(1)[0])


def group_weight_fractions(w, s, groups) -> np.ndarray:
    """Part Σ_{i∈g} w_i s_i / Σ_i w_i s_i de chaque groupe."""
    mass = np.asarray(w) * np.asarray(s)
    groups = np.asarray(groups, dtype=np.int64)
    totals = np.bincount(groups, weights=mass, minlength=int(groups.max()) + 1)
    total = mass.sum()
    return totals / total if total > 0 else np.zeros_like(totals)


def s_saturation(s) -> float:
    """Fraction des s_i à moins de 0.1 de 0 ou de 1."""
    s = np.asarray(s)
    return float(np.mean((s <= SATURATION_MARGIN) | (s >= 1.0 - SATURATION_MARGIN)))


def _history_row(iteration: int, state: ReweightState, mask: MaskSample, result: TrainResult,
                 data_v: AnnotatedDataset, model: ModelSpec, family: LossFamily, risk: RiskSpec,
                 report_groups, inner_seconds: float) -> Dict[str, float]:
    predictions = predict_labels(model, result.theta_T, data_v.batch, family)
    row = {
        "outer_iter": iteration,
        "val_risk": risk_value(risk, data_v, model, result.theta_T, family),
        "val_acc": float(np.mean(predictions == data_v.batch.labels)),
        "w_mean": float(state.w.mean()),
        "w_std": float(state.w.std()),
        "w_min": float(state.w.min()),
        "w_max": float(state.w.max()),
        "s_saturation": s_saturation(state.s),
        "s_q10": float(np.quantile(state.s, 0.1)),
        "s_median": float(np.median(state.s)),
        "s_q90": float(np.quantile(state.s, 0.9)),
        "kept": int(mask.m.sum()),
        # temps mur de la boucle interne, seule colonne non déterministe
        "inner_seconds": inner_seconds,
    }
    if report_groups is not None:
        for g, fraction in enumerate(group_weight_fractions(state.w, state.s, report_groups)):
            row[f"group_{g}_fraction"] = float(fraction)
    return row


def run_maple(data_tr: AnnotatedDataset, data_v: AnnotatedDataset, model: ModelSpec,
              family: LossFamily, inner_cfg: InnerConfig, outer_cfg: OuterConfig,
              K: Optional[float] = None, report_groups=None):
    """
    Pilote complet de la repondération bi-niveau.

    Initialise w = 1 et s = (K/n)·1 puis, à chaque itération : tire un masque,
    entraîne la boucle interne depuis une initialisation neuve, calcule les
    hypergradients tronqués, fait un pas d'Adam et projette sur C'. Sans
    parcimonie, s reste à 1, les masques valent 1 et seul w est optimisé.

    Args:
        data_tr: Données d'entraînement (sans groupes : la boucle ne les utilise jamais)
        data_v: Données de validation, annotées pour le risque externe
        model: Architecture
        family: Famille de perte
        inner_cfg: Programme interne (init_seed remplacé à chaque itération)
        outer_cfg: Programme externe
        K: Budget de parcimonie (défaut n)
        report_groups: Groupes utilisés seulement pour l'historique des parts de poids

    Returns:
        (état final, coreset pondéré, historique sous forme de DataFrame)
    """
    n = data_tr.n
    K = float(n) if K is None else float(K)
    if not 0.0 < K <= n:
        raise ValueError(f"K doit etre dans ]0, {n}] (recu {K})")

    sparse = outer_cfg.sparsity_enabled
    state = ReweightState.initial(n, K, sparse)
    history: List[Dict[str, float]] = []
    started = time.time()

    for iteration in range(outer_cfg.iterations):
        rng = np.random.default_rng(np.random.SeedSequence([outer_cfg.seed, iteration, 1]))
        mask = sample_mask(state.s, outer_cfg.temperature, rng) if sparse \
            else MaskSample.all_ones(n, outer_cfg.temperature)

        cfg = replace(inner_cfg, init_seed=derive_seed(outer_cfg.seed, iteration))
        inner_started = time.perf_counter()
        result = train_weighted_erm(data_tr, state.w * mask.m, model, family, cfg)
        inner_seconds = time.perf_counter() - inner_started

        history.append(_history_row(iteration, state, mask, result, data_v, model, family,
                                    outer_cfg.risk, report_groups, inner_seconds))

        g_w = hypergrad_w(result.theta_T, result.theta_Tm1, data_tr, data_v, outer_cfg.risk,
                          model, family, mask, result.last_batch)
        # la dérivée vraie est -η_θ g : on descend donc selon -g
        w, adam_w = adam_step(state.adam_w, state.w, -g_w, outer_cfg.lr_w)
        s, adam_s = state.s, state.adam_s
        if sparse:
            g_s = hypergrad_s(result.theta_T, result.theta_Tm1, data_tr, data_v, outer_cfg.risk,
                              model, family, state, mask, result.last_batch)
            s, adam_s = adam_step(state.adam_s, state.s, -g_s, outer_cfg.lr_s)
            s = project_capped_box_simplex(s, K)

        state = ReweightState(w=project_nonneg(w), s=s, K=K, adam_w=adam_w, adam_s=adam_s)

        if (iteration + 1) % 10 == 0 or iteration == outer_cfg.iterations - 1:
            logger.info(
                f"Iteration externe {iteration + 1}/{outer_cfg.iterations}: "
                f"risque val {history[-1]['val_risk']:.4f}, acc val {history[-1]['val_acc']:.3f}, "
                f"saturation s {s_saturation(state.s):.2f} ({time.time() - started:.1f}s)")

    coreset = _extract_coreset(state, outer_cfg)
    return state, coreset, pd.DataFrame(history)


def _extract_coreset(state: ReweightState, outer_cfg: OuterConfig) -> WeightedCoreset:
    """Seuil s >= 0.5 pour le coreset ; un masque tiré selon s est aussi enregistré."""
    n = state.w.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([outer_cfg.seed, outer_cfg.iterations, 2]))
    sampled = sample_mask(state.s, outer_cfg.temperature, rng).m
    threshold = (state.s >= KEEP_THRESHOLD).astype(np.float64)
    indices = np.flatnonzero(threshold)
    weights = state.w[indices].copy()
    if outer_cfg.normalize_weights and weights.size and weights.mean() > 0:
        weights = weights / weights.mean()
    return WeightedCoreset(indices=indices, weights=weights, threshold_mask=threshold,
                           sampled_mask=sampled)
