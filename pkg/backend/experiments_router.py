from fastapi import APIRouter, HTTPException, Query
from typing import Any, Dict
import json
import logging
import time

from pydantic import ValidationError

from backend.data.synthetic import agreement_rate
from backend.harness.config import DatasetSection, RunConfig
from backend.harness.experiment import execute
from backend.harness.oracle_suite import oracle_suite
from backend.reweighting.inner_trainer import DivergenceError
from backend.utils.logger import log_error, log_info

router = APIRouter(prefix="/api")

logger = logging.getLogger(__name__)


@router.get("/hello")
def read_root():
    return {"message": "Hello from FastAPI : repondération d'échantillons bi-niveau"}


@router.get("/oracle", response_model=Dict[str, Any])
def run_oracle(seed: int = Query(0, description="Graine de la batterie"),
               n_joints: int = Query(100, ge=1, le=1000, description="Nombre de lois aléatoires")):
    """
    Exécute la batterie de vérifications de l'oracle de population.
    """
    start_time = time.time()
    try:
        report = oracle_suite(seed=seed, n_joints=n_joints)
    except Exception as e:
        log_error(f"/api/oracle: {e}")
        raise HTTPException(status_code=500, detail=f"Erreur serveur: {str(e)}")

    return {
        "passed": report.passed,
        "checks": json.loads(report.table.to_json(orient="records")),
        "computation_time": round(time.time() - start_time, 3),
    }


@router.post("/datasets/preview", response_model=Dict[str, Any])
def preview_dataset(section: Dict[str, Any], seed: int = Query(0)):
    """
    Génère un jeu de données et renvoie la taille des splits et les taux d'accord attribut/étiquette.
    """
    try:
        dataset = DatasetSection.model_validate(section)
        bundle = dataset.build(seed)
    except (ValidationError, ValueError) as e:
        raise HTTPException(status_code=400, detail=f"Section de donnees invalide: {str(e)}")

    splits = {}
    for name, data in bundle.splits().items():
        splits[name] = {
            "n": data.n,
            "dim": data.batch.dim,
            "agreement_rate": agreement_rate(data) if data.group_ids is not None else None,
            "n_envs": data.n_envs,
            "n_groups": data.n_groups,
        }
    return {"kind": dataset.kind, "seed": seed, "splits": splits}


@router.post("/experiments/run", response_model=Dict[str, Any])
def run_experiment_endpoint(payload: Dict[str, Any]):
    """
    Exécute une expérience de façon synchrone et renvoie les métriques finales.
    """
    try:
        cfg = RunConfig.model_validate(payload)
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=e.errors(include_url=False, include_context=False))

    log_info(f"Experience demandee via l'API (graine {cfg.seed})")
    try:
        result = execute(cfg)
    except DivergenceError as e:
        log_error(f"/api/experiments/run: {e}")
        raise HTTPException(status_code=500, detail=f"Divergence au pas {e.step}: {str(e)}")
    except Exception as e:
        log_error(f"/api/experiments/run: {e}")
        raise HTTPException(status_code=500, detail=f"Erreur serveur: {str(e)}")

    return {
        "config_hash": result.config_hash,
        "seed": result.seed,
        "output_dir": str(result.output_dir),
        "metrics": json.loads(result.metrics_frame().to_json(orient="records")),
    }
