"""
Balayage de l'écart de généralisation en fonction de la taille de validation.

Pour chaque n_val et chaque graine : recherche des poids avec une validation de
taille n_val, ERM pondéré final, puis |R(validation) - R(échantillon réservé 10x)|.
Les graines tournent dans un pool de threads.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence
import logging

import numpy as np
import pandas as pd

from backend.harness.config import DatasetSection, RunConfig, derive_run_seeds
from backend.reweighting.inner_trainer import train_weighted_erm
from backend.reweighting.outer_optimizer import run_maple
from backend.reweighting.risks import risk_value
from backend.utils.logger import log_info

logger = logging.getLogger(__name__)

DEFAULT_N_VALS = (100, 400, 1600, 6400)
HELDOUT_FACTOR = 10
HELDOUT_SEED_OFFSET = 100_003


@dataclass
class SweepResult:
    table: pd.DataFrame
    slope: float
    gaps: pd.DataFrame


def with_val_size(dataset: DatasetSection, n_val: int) -> DatasetSection:
    """Copie de la section de données avec une validation de taille n_val."""
    section = getattr(dataset, dataset.kind)
    return dataset.model_copy(update={dataset.kind: section.model_copy(update={"n_val": n_val})})


def generalization_gap(cfg: RunConfig, n_val: int, seed: int) -> float:
    """Écart |R(D_v, θ) - R(D_réservé, θ)| au point obtenu par la repondération."""
    seeds = derive_run_seeds(seed)
    bundle = with_val_size(cfg.dataset, n_val).build(seeds["data"])
    heldout = with_val_size(cfg.dataset, HELDOUT_FACTOR * n_val).build(seeds["data"] + HELDOUT_SEED_OFFSET).val

    model = cfg.model.to_spec(bundle.train.batch.dim)
    family = cfg.model.loss
    inner = cfg.inner.to_config(seeds["init"])
    outer = cfg.outer.to_config(seeds["outer"])
    train_view = bundle.train.without_groups() if cfg.hide_train_groups else bundle.train

    _, coreset, _ = run_maple(train_view, bundle.val, model, family, inner, outer,
                              cfg.outer.budget(bundle.train.n))
    theta = train_weighted_erm(bundle.train, coreset.effective_weights(bundle.train.n),
                               model, family, inner).theta_T
    risk = outer.risk
    return abs(risk_value(risk, bundle.val, model, theta, family) -
               risk_value(risk, heldout, model, theta, family))


def fit_loglog_slope(n_vals, mean_gaps) -> float:
    """Pente de la droite des moindres carrés de log(écart) en fonction de log(n)."""
    n_vals = np.asarray(n_vals, dtype=np.float64)
    mean_gaps = np.asarray(mean_gaps, dtype=np.float64)
    if n_vals.size < 2 or np.any(mean_gaps <= 0):
        return float("nan")
    slope, _ = np.polyfit(np.log(n_vals), np.log(mean_gaps), 1)
    return float(slope)


def sweep_generalization_gap(cfg: RunConfig, n_vals: Sequence[int] = DEFAULT_N_VALS, repeats: int = 20,
                             max_workers: Optional[int] = None) -> SweepResult:
    """
    Args:
        cfg: Configuration de base (la taille de validation est remplacée)
        n_vals: Tailles de validation
        repeats: Nombre de graines (cfg.seed, cfg.seed + 1, ...)
        max_workers: Taille du pool de threads

    Returns:
        SweepResult : tableau (n_val, mean_gap, std_gap, repeats, single_seed), pente log-log,
        écarts bruts par (n_val, graine)
    """
    if repeats < 1:
        raise ValueError("repeats doit etre >= 1")
    jobs = [(n_val, cfg.seed + r) for n_val in n_vals for r in range(repeats)]
    log_info(f"Balayage: {len(n_vals)} tailles x {repeats} graine(s)")

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        gaps = list(pool.map(lambda job: generalization_gap(cfg, *job), jobs))

    raw = pd.DataFrame({"n_val": [j[0] for j in jobs], "seed": [j[1] for j in jobs], "gap": gaps})
    table = raw.groupby("n_val", sort=True)["gap"].agg(mean_gap="mean", std_gap=lambda g: g.std(ddof=0))
    table = table.reset_index()
    table["repeats"] = repeats
    table["single_seed"] = repeats == 1
    slope = fit_loglog_slope(table["n_val"], table["mean_gap"])
    log_info(f"Pente log-log de l'ecart: {slope:.3f}")
    return SweepResult(table=table, slope=slope, gaps=raw)
