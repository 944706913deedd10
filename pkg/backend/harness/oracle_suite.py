"""
Batterie de vérifications de l'oracle de population sur des lois aléatoires.

Sous le poids en forme close : moyenne de w égale à 1, marges conservées,
indépendance de z_s et (y, z_c), covariance croisée nulle, identifiabilité
(bloc parasite nul, égalité avec le prédicteur débiaisé) et identités
d'entropie. Le contrôle négatif remplace le poids par w ≡ 1.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List
import logging

import numpy as np
import pandas as pd

from backend.data.synthetic import make_mixing
from backend.oracle.population import (
    WeightTable,
    closed_form_weight,
    conditional_entropy,
    independence_gap,
    optimal_debiased_predictor,
    population_wls,
    random_joint,
    weighted_moments,
)
from backend.utils.logger import log_info, normalize_text

logger = logging.getLogger(__name__)

EXACT = 1e-12
SOLVE = 1e-8


class OracleCheckFailure(RuntimeError):
    """Au moins une vérification de l'oracle a échoué."""


@dataclass
class OracleReport:
    table: pd.DataFrame

    @property
    def passed(self) -> bool:
        return bool(self.table["passed"].all())

    def failures(self) -> List[str]:
        return self.table.loc[~self.table["passed"], "check"].tolist()


def _checks(joint, weight, mixing) -> Dict[str, float]:
    """Erreur de chaque vérification pour une loi."""
    moments = weighted_moments(joint, weight, mixing)
    base = weighted_moments(joint, None, mixing)
    solution = population_wls(joint, weight, mixing)
    debiased = optimal_debiased_predictor(joint, mixing)
    h_full = conditional_entropy(joint, ("z_c", "z_s"), weight)
    h_core = conditional_entropy(joint, ("z_c",), weight)
    d_c = joint.d_c
    return {
        "mean_one": abs(weight.mean_under(joint) - 1.0),
        "marginal_core": float(np.max(np.abs(moments.joint_core - base.joint_core))),
        "marginal_spurious": float(np.max(np.abs(moments.marginal_spurious - base.marginal_spurious))),
        "independence": independence_gap(joint, weight),
        "block_covariance": float(np.max(np.abs(moments.cov_core_spurious))),
        "spurious_label_cross": float(np.max(np.abs(
            moments.z_cross[d_c:] - moments.mean_spurious * moments.mean_y))),
        "identifiability_spurious": float(np.max(np.abs(solution.beta_spurious))),
        "identifiability_core": float(np.max(np.abs(solution.theta - debiased.theta_bar))),
        "entropy_unbiased": abs(h_full - h_core),
        "entropy_core_preserving": abs(h_core - conditional_entropy(joint, ("z_c",))),
    }


TOLERANCES = {
    "mean_one": EXACT,
    "marginal_core": EXACT,
    "marginal_spurious": EXACT,
    "independence": EXACT,
    "block_covariance": EXACT,
    "spurious_label_cross": EXACT,
    "identifiability_spurious": SOLVE,
    "identifiability_core": SOLVE,
    "entropy_unbiased": EXACT,
    "entropy_core_preserving": EXACT,
}


def oracle_suite(seed: int = 0, n_joints: int = 100, inject_wrong_weight: bool = False) -> OracleReport:
    """
    Exécute la batterie sur n_joints lois aléatoires (|Y| = 2, |Z_c|, |Z_s| dans {2, 3}).

    La première loi est toujours le cas minimal 2 x 2 x 2.

    Args:
        seed: Graine de la batterie
        n_joints: Nombre de lois tirées
        inject_wrong_weight: Remplace le poids en forme close par w ≡ 1 (contrôle négatif)

    Returns:
        OracleReport (check, max_error, tolerance, passed)
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    pick_weight: Callable = WeightTable.uniform if inject_wrong_weight else closed_form_weight
    worst = {name: 0.0 for name in TOLERANCES}

    for j in range(n_joints):
        n_zc, n_zs = (2, 2) if j == 0 else tuple(rng.integers(2, 4, size=2))
        joint = random_joint(rng, n_y=2, n_zc=int(n_zc), n_zs=int(n_zs))
        mixing = make_mixing(joint.dim, int(rng.integers(0, 2 ** 31)))
        for name, error in _checks(joint, pick_weight(joint), mixing).items():
            worst[name] = max(worst[name], error)

    table = pd.DataFrame([
        {"check": name, "max_error": worst[name], "tolerance": tol, "passed": worst[name] <= tol}
        for name, tol in TOLERANCES.items()
    ])
    report = OracleReport(table)
    log_info(normalize_text(table.to_string(index=False)))
    logger.debug(f"oracle_suite: {n_joints} lois, graine {seed}, succes={report.passed}")
    return report


def ensure_passed(report: OracleReport) -> OracleReport:
    if not report.passed:
        raise OracleCheckFailure(f"Verifications en echec: {', '.join(report.failures())}")
    return report
