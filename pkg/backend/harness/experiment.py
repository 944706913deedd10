"""
Orchestration d'une expérience : données, baselines, repondération bi-niveau et artefacts.

Artefacts écrits dans output_dir :
    metrics.csv            lignes finales (sans temps d'exécution, déterministe)
    metrics.jsonl          mêmes lignes + temps d'exécution
    history.csv            historique par itération externe (sans temps)
    timings.csv            temps de la boucle interne et échantillons conservés par itération
    weights.jsonl          un enregistrement par échantillon d'entraînement
    weight_histograms.csv  histogrammes de w par groupe
    metadata.json          hash de configuration, graine, métadonnées du jeu
    data/                  splits au format CSV (voir dataset_io)
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union
import json
import logging
import time

import numpy as np
import pandas as pd
from pydantic import ValidationError

from backend.data.dataset_io import load_dataset, save_dataset
from backend.harness.baselines import run_baseline
from backend.harness.config import (
    InnerSection,
    ModelSection,
    RunConfig,
    config_hash,
    derive_run_seeds,
    load_config,
    read_yaml,
    resolve_output_dir,
)
from backend.harness.metrics import MetricsRecord, evaluate, weight_histograms
from backend.reweighting.inner_trainer import DivergenceError, train_weighted_erm
from backend.reweighting.outer_optimizer import ReweightState, WeightedCoreset, run_maple
from backend.utils.logger import log_error, log_info, log_success, log_warning

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUN_FAILURE = 2

TIMING_COLUMNS = ["inner_seconds"]


@dataclass
class ExperimentResult:
    records: List[MetricsRecord]
    output_dir: Path
    config_hash: str
    seed: int
    state: Optional[ReweightState] = None
    coreset: Optional[WeightedCoreset] = None
    history: Optional[pd.DataFrame] = field(default=None, repr=False)

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row(self.config_hash, self.seed) for r in self.records])


def _write_weights(path: Path, state: ReweightState, coreset: WeightedCoreset, digest: str, seed: int):
    with open(path, "w", encoding="utf-8") as f:
        for i in range(state.w.shape[0]):
            f.write(json.dumps({
                "sample_index": i,
                "w": float(state.w[i]),
                "s": float(state.s[i]),
                "m": int(coreset.threshold_mask[i]),
                "m_sampled": int(coreset.sampled_mask[i]),
                "config_hash": digest,
                "seed": seed,
            }) + "\n")


def write_artifacts(result: ExperimentResult, cfg: RunConfig, dataset_metadata: dict,
                    train_groups=None):
    out = result.output_dir
    digest, seed = result.config_hash, result.seed

    result.metrics_frame().to_csv(out / "metrics.csv", index=False)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as f:
        for record in result.records:
            f.write(record.to_json(digest, seed) + "\n")

    if result.state is not None:
        history = result.history.drop(columns=TIMING_COLUMNS)
        history.insert(0, "seed", seed)
        history.insert(0, "config_hash", digest)
        history.to_csv(out / "history.csv", index=False)
        result.history[["outer_iter", "kept", *TIMING_COLUMNS]].to_csv(out / "timings.csv", index=False)
        _write_weights(out / "weights.jsonl", result.state, result.coreset, digest, seed)
        histograms = weight_histograms(result.state.w, train_groups)
        histograms.insert(0, "seed", seed)
        histograms.insert(0, "config_hash", digest)
        histograms.to_csv(out / "weight_histograms.csv", index=False)

    metadata = {
        "config_hash": digest,
        "seed": seed,
        "config": cfg.model_dump(mode="json"),
        "dataset": dataset_metadata,
        "methods": [r.method for r in result.records],
    }
    with open(out / "metadata.json", "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)


def execute(cfg: RunConfig, write: bool = True) -> ExperimentResult:
    """
    Exécute les baselines demandées puis la repondération (si outer.iterations >= 1).

    La boucle externe ne reçoit que le split d'entraînement (sans groupes si
    hide_train_groups) et la validation ; le test ne sert qu'à l'évaluation finale.
    """
    digest = config_hash(cfg)
    seeds = derive_run_seeds(cfg.seed)
    bundle = cfg.dataset.build(seeds["data"])
    out = resolve_output_dir(cfg)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(bundle, out / "data", digest)

    model = cfg.model.to_spec(bundle.train.batch.dim)
    family = cfg.model.loss
    inner = cfg.inner.to_config(seeds["init"])
    risk = cfg.outer.risk
    log_info(f"Experience {digest} (graine {cfg.seed}) : {bundle.train.n} echantillons d'entrainement")

    records = []
    for name in cfg.baselines:
        record = run_baseline(name, bundle, model, family, inner, outer_risk=risk.to_spec())
        log_info(f"{name}: precision {record.average_accuracy:.3f}, pire groupe {record.worst_group_accuracy:.3f}")
        records.append(record)

    result = ExperimentResult(records=records, output_dir=out, config_hash=digest, seed=cfg.seed)
    if cfg.outer.iterations >= 1:
        started = time.time()
        train_view = bundle.train.without_groups() if cfg.hide_train_groups else bundle.train
        K = cfg.outer.budget(bundle.train.n)
        state, coreset, history = run_maple(train_view, bundle.val, model, family, inner,
                                            cfg.outer.to_config(seeds["outer"]), K,
                                            report_groups=bundle.train.group_ids)
        if coreset.indices.size == 0:
            log_warning("Coreset vide : aucun s_i >= 0.5")
        effective = coreset.effective_weights(bundle.train.n)
        theta = train_weighted_erm(bundle.train, effective, model, family, inner).theta_T
        method = f"MAPLE-{risk.kind.value}"
        records.append(evaluate(method, model, theta, bundle.test, family, time.time() - started, history))

        if cfg.eval_model is not None:
            transfer_model = cfg.eval_model.to_spec(bundle.train.batch.dim)
            theta = train_weighted_erm(bundle.train, effective, transfer_model, cfg.eval_model.loss, inner).theta_T
            records.append(evaluate(f"{method}@transfer", transfer_model, theta, bundle.test,
                                    cfg.eval_model.loss, time.time() - started))
        result.state, result.coreset, result.history = state, coreset, history
        log_info(f"{method}: precision {records[-1].average_accuracy:.3f}, "
                 f"pire groupe {records[-1].worst_group_accuracy:.3f}, coreset {coreset.indices.size}")

    if write:
        write_artifacts(result, cfg, bundle.metadata, bundle.train.group_ids)
    return result


def run_experiment(config_path) -> int:
    """
    Point d'entrée de `run` : valide la configuration, exécute, écrit les artefacts.

    Returns:
        0 en cas de succès, 1 si la configuration est invalide, 2 si le run échoue
    """
    try:
        cfg = load_config(config_path)
    except ValidationError as e:
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"])
            log_error(f"{config_path}: {location}: {error['msg']}")
        return EXIT_VALIDATION
    except (OSError, ValueError) as e:
        log_error(f"Configuration illisible: {e}")
        return EXIT_VALIDATION

    try:
        result = execute(cfg)
    except DivergenceError as e:
        log_error(f"Run echoue: {e} (pas {e.step})")
        return EXIT_RUN_FAILURE
    except Exception as e:
        log_error(f"Run echoue: {type(e).__name__}: {e}")
        return EXIT_RUN_FAILURE

    log_success(f"Artefacts ecrits dans {result.output_dir}")
    return EXIT_OK


def _read_model_sections(model_config: Union[ModelSection, dict, str, Path]):
    if isinstance(model_config, ModelSection):
        return model_config, InnerSection()
    data = model_config if isinstance(model_config, dict) else read_yaml(model_config)
    if "model" in data:
        return ModelSection.model_validate(data["model"]), InnerSection.model_validate(data.get("inner", {}))
    return ModelSection.model_validate(data), InnerSection()


def read_weights(weights_file) -> pd.DataFrame:
    return pd.read_json(weights_file, lines=True)


def eval_weighted_erm(data_dir, weights_file, model_config) -> MetricsRecord:
    """
    ERM pondéré avec des poids figés (poids effectif w·m), évalué sur le test.

    Args:
        data_dir: Répertoire écrit par save_dataset
        weights_file: weights.jsonl d'une recherche précédente
        model_config: ModelSection, dict ou fichier YAML (section model, ou model + inner)

    Raises:
        ValueError: si les indices du fichier de poids ne couvrent pas exactement le jeu d'entraînement
    """
    bundle = load_dataset(data_dir)
    model_section, inner_section = _read_model_sections(model_config)
    weights = read_weights(weights_file).sort_values("sample_index")
    n = bundle.train.n
    if not np.array_equal(weights["sample_index"].to_numpy(), np.arange(n)):
        raise ValueError(f"Indices du fichier de poids incompatibles avec {n} echantillons d'entrainement")

    effective = weights["w"].to_numpy(dtype=np.float64)
    if "m" in weights.columns:
        effective = effective * weights["m"].to_numpy(dtype=np.float64)

    seeds = derive_run_seeds(int(bundle.metadata["seed"]))
    model = model_section.to_spec(bundle.train.batch.dim)
    started = time.time()
    theta = train_weighted_erm(bundle.train, effective, model, model_section.loss,
                               inner_section.to_config(seeds["init"])).theta_T
    return evaluate("WeightedERM", model, theta, bundle.test, model_section.loss, time.time() - started)
