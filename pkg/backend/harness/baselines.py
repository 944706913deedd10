"""
Baselines : ERM, surpondération par groupe (oracle des groupes), IRMv1, REx, CVaR et
GroupDRO minimisés directement, et ERM sur les seules features utiles (oracle).
"""

from enum import Enum
import logging
import time

import numpy as np

from backend.data.synthetic import SplitBundle, core_view
from backend.harness.metrics import MetricsRecord, evaluate
from backend.models.model_zoo import LossFamily, ModelSpec, init_params
from backend.reweighting.inner_trainer import DivergenceError, InnerConfig, gd_step, train_weighted_erm
from backend.reweighting.risks import AnnotatedDataset, RiskKind, RiskSpec, per_group_losses, risk_grad, risk_value

logger = logging.getLogger(__name__)

GROUP_DRO_STEP_SIZE = 0.01


class Baseline(str, Enum):
    ERM = "ERM"
    GROUP_ORACLE_UPWEIGHT = "GroupOracleUpweight"
    IRMV1_DIRECT = "IRMv1-direct"
    REX_DIRECT = "REx-direct"
    CVAR_DIRECT = "CVaR-direct"
    GROUP_DRO_DIRECT = "GroupDRO-direct"
    CORE_ONLY_ORACLE = "CoreOnlyOracle"


# baselines qui minimisent directement un risque OOD sur le train
DIRECT_RISKS = {
    Baseline.IRMV1_DIRECT: RiskKind.IRMV1,
    Baseline.REX_DIRECT: RiskKind.REX,
    Baseline.CVAR_DIRECT: RiskKind.CVAR,
}


def inverse_group_weights(group_ids) -> np.ndarray:
    """w_i = n / (G · n_{g(i)}) : chaque groupe pèse autant, poids de moyenne 1."""
    group_ids = np.asarray(group_ids)
    counts = np.bincount(group_ids)
    present = np.count_nonzero(counts)
    return group_ids.shape[0] / (present * counts[group_ids])


def minimize_risk(risk: RiskSpec, data: AnnotatedDataset, model: ModelSpec, family: LossFamily,
                  cfg: InnerConfig) -> np.ndarray:
    """Descente de gradient sur R(D, θ) + weight_decay ||θ||² / 2 depuis l'initialisation graine."""
    params = init_params(model, cfg.init_seed)
    for step in range(cfg.steps):
        value = risk_value(risk, data, model, params, family)
        if not np.isfinite(value):
            raise DivergenceError(step, f"risque {risk.kind.value} non fini")
        params = params - cfg.learning_rate * (risk_grad(risk, data, model, params, family)
                                               + cfg.weight_decay * params)
        if not np.all(np.isfinite(params)):
            raise DivergenceError(step, "parametres non finis")
    return params


def group_dro_online(data: AnnotatedDataset, model: ModelSpec, family: LossFamily, cfg: InnerConfig,
                     step_size: float = GROUP_DRO_STEP_SIZE) -> np.ndarray:
    """
    GroupDRO en ligne : q_g ← q_g exp(η L_g) puis un pas sur Σ_g q_g L_g.

    Σ_g q_g L_g s'écrit comme un ERM pondéré de poids n q_g / n_g.
    """
    groups = data.group_ids
    counts = np.bincount(groups)
    q = np.full(counts.shape[0], 1.0 / counts.shape[0])
    params = init_params(model, cfg.init_seed)
    for step in range(cfg.steps):
        losses = per_group_losses(data, model, params, family)
        q = q * np.exp(step_size * losses)
        q = q / q.sum()
        weights = data.n * q[groups] / counts[groups]
        params, value = gd_step(params, data.batch, weights, model, family, cfg)
        if not np.isfinite(value) or not np.all(np.isfinite(params)):
            raise DivergenceError(step, "GroupDRO")
    logger.debug(f"GroupDRO: poids de groupe finaux {np.round(q, 3).tolist()}")
    return params


def run_baseline(name, bundle: SplitBundle, model: ModelSpec, family: LossFamily, cfg: InnerConfig,
                 outer_risk: RiskSpec = RiskSpec()) -> MetricsRecord:
    """
    Entraîne une baseline sur le split d'entraînement (groupes visibles) et l'évalue sur le test.

    Args:
        name: Nom de la baseline
        bundle: Splits du benchmark
        model: Architecture sur les features complètes
        family: Famille de perte
        cfg: Programme d'entraînement (pas, pas d'apprentissage, graine)
        outer_risk: Risque externe du run ; ses λ et α servent à la baseline directe de même type

    Returns:
        MetricsRecord sur le split de test
    """
    name = Baseline(name)
    started = time.time()
    train, test = bundle.train, bundle.test

    if name == Baseline.CORE_ONLY_ORACLE:
        core_train, core_test = core_view(bundle, train), core_view(bundle, test)
        core_model = ModelSpec(kind=model.kind, input_dim=bundle.core_dim, hidden_dims=model.hidden_dims,
                               activation=model.activation)
        params = train_weighted_erm(core_train, np.ones(train.n), core_model, family, cfg).theta_T
        return evaluate(name.value, core_model, params, core_test, family, time.time() - started)

    if name == Baseline.ERM:
        params = train_weighted_erm(train, np.ones(train.n), model, family, cfg).theta_T
    elif name == Baseline.GROUP_ORACLE_UPWEIGHT:
        params = train_weighted_erm(train, inverse_group_weights(train.group_ids), model, family, cfg).theta_T
    elif name in DIRECT_RISKS:
        kind = DIRECT_RISKS[name]
        risk = outer_risk if outer_risk.kind == kind else RiskSpec(kind=kind)
        params = minimize_risk(risk, train, model, family, cfg)
    else:
        params = group_dro_online(train, model, family, cfg)

    return evaluate(name.value, model, params, test, family, time.time() - started)
