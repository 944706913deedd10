"""
Projections euclidiennes sur les ensembles admissibles de la boucle externe.

C  = {w >= 0}                          (poids d'échantillons)
C' = {(w, s) : w >= 0, 0 <= s <= 1, Σ s <= K}  (poids + probabilités de conservation)

C' est un produit cartésien, la projection jointe se décompose donc en
project_nonneg(w) et project_capped_box_simplex(s, K).
"""

import logging

import numpy as np

logger = logging.getLogger(__name__)

BISECTION_TOLERANCE = 1e-12
MAX_BISECTION_STEPS = 200


def project_nonneg(w) -> np.ndarray:
    """Projection sur l'orthant positif : w'_i = max(w_i, 0)."""
    return np.maximum(np.asarray(w, dtype=np.float64), 0.0)


def _clipped_sum(s: np.ndarray, tau: float) -> float:
    return float(np.clip(s - tau, 0.0, 1.0).sum())


def project_capped_box_simplex(s, K: float) -> np.ndarray:
    """
    Projection sur {0 <= s <= 1, Σ s_i <= K}.

    La solution est clip(s - τ, 0, 1) avec τ >= 0 ; τ = 0 si le simple
    écrêtage respecte le budget, sinon Σ clip(s - τ, 0, 1) = K. La somme étant
    monotone en τ, on procède par dichotomie puis on recalcule τ exactement sur
    l'ensemble des coordonnées libres identifié.

    Args:
        s: Probabilités de conservation
        K: Budget de parcimonie (> 0)

    Returns:
        Projection de s
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if K <= 0:
        raise ValueError(f"K doit etre strictement positif (recu {K})")

    clipped = np.clip(s, 0.0, 1.0)
    if clipped.sum() <= K:
        return clipped

    # Σ clip(s - τ) vaut plus de K en τ = 0 et 0 en τ = max(s)
    low, high = 0.0, float(s.max())
    for _ in range(MAX_BISECTION_STEPS):
        tau = 0.5 * (low + high)
        total = _clipped_sum(s, tau)
        if abs(total - K) <= BISECTION_TOLERANCE:
            break
        if total > K:
            low = tau
        else:
            high = tau

    # Recalcul exact de τ sur les coordonnées strictement dans la boîte
    shifted = s - tau
    free = (shifted > 0.0) & (shifted < 1.0)
    at_one = shifted >= 1.0
    if free.any():
        exact = (s[free].sum() + at_one.sum() - K) / free.sum()
        candidate = np.clip(s - exact, 0.0, 1.0)
        if abs(candidate.sum() - K) <= abs(_clipped_sum(s, tau) - K):
            return candidate
    return np.clip(shifted, 0.0, 1.0)
