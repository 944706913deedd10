"""
Export / import des splits au format colonnes (CSV pandas) + metadata.json.

Colonnes : x0..x{d-1}, label, env_id, group_id (-1 quand l'annotation est absente).
"""

from pathlib import Path
from typing import Optional
import json
import logging

import numpy as np
import pandas as pd

from backend.data.synthetic import MixingMatrix, SplitBundle
from backend.models.model_zoo import Batch
from backend.reweighting.risks import AnnotatedDataset

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
METADATA_FILE = "metadata.json"
MISSING_ID = -1


def dataset_to_frame(data: AnnotatedDataset) -> pd.DataFrame:
    frame = pd.DataFrame(data.batch.features, columns=[f"x{j}" for j in range(data.batch.dim)])
    frame["label"] = data.batch.labels.astype(np.int64)
    for column, ids in (("env_id", data.env_ids), ("group_id", data.group_ids)):
        frame[column] = np.full(data.n, MISSING_ID, dtype=np.int64) if ids is None else ids
    return frame


def frame_to_dataset(frame: pd.DataFrame) -> AnnotatedDataset:
    feature_columns = [c for c in frame.columns if c.startswith("x")]
    missing = {"label", "env_id", "group_id"} - set(frame.columns)
    if missing or not feature_columns:
        raise ValueError(f"Colonnes manquantes dans le fichier de donnees: {sorted(missing) or 'x*'}")
    feature_columns.sort(key=lambda c: int(c[1:]))

    def ids(column: str) -> Optional[np.ndarray]:
        values = frame[column].to_numpy(dtype=np.int64)
        return None if np.all(values == MISSING_ID) else values

    return AnnotatedDataset(
        Batch(frame[feature_columns].to_numpy(dtype=np.float64), frame["label"].to_numpy(dtype=np.float64)),
        env_ids=ids("env_id"), group_ids=ids("group_id"))


def save_dataset(bundle: SplitBundle, out_dir, config_hash: Optional[str] = None) -> Path:
    """
    Écrit train.csv, val.csv, test.csv et metadata.json dans out_dir.

    Returns:
        Le répertoire de sortie
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in bundle.splits().items():
        dataset_to_frame(data).to_csv(out_dir / f"{name}.csv", index=False)

    metadata = dict(bundle.metadata)
    metadata.update({
        "core_dim": bundle.core_dim,
        "spurious_dim": bundle.spurious_dim,
        "mixing": None if bundle.mixing is None else bundle.mixing.S.tolist(),
        "mixing_inverse": None if bundle.mixing is None else bundle.mixing.T.tolist(),
        "config_hash": config_hash,
    })
    with open(out_dir / METADATA_FILE, "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
    logger.info(f"Jeu de donnees ecrit dans {out_dir}")
    return out_dir


def load_dataset(data_dir) -> SplitBundle:
    """Relit un répertoire écrit par save_dataset (flottants relus à l'identique)."""
    data_dir = Path(data_dir)
    metadata_path = data_dir / METADATA_FILE
    if not metadata_path.exists():
        raise FileNotFoundError(f"{METADATA_FILE} introuvable dans {data_dir}")
    with open(metadata_path, encoding="utf-8") as f:
        metadata = json.load(f)

    splits = {}
    for name in SPLIT_NAMES:
        frame = pd.read_csv(data_dir / f"{name}.csv", float_precision="round_trip")
        splits[name] = frame_to_dataset(frame)

    mixing = metadata.pop("mixing", None)
    inverse = metadata.pop("mixing_inverse", None)
    return SplitBundle(
        train=splits["train"], val=splits["val"], test=splits["test"],
        core_dim=int(metadata.pop("core_dim")), spurious_dim=int(metadata.pop("spurious_dim")),
        mixing=None if mixing is None else (
            MixingMatrix(S=mixing, T=inverse) if inverse is not None else MixingMatrix.from_matrix(mixing)),
        metadata=metadata)
