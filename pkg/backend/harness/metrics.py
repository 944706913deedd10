"""
Métriques d'évaluation : précision moyenne, pire groupe, précision par environnement
et par groupe, histogrammes de poids par groupe.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional
import json

import numpy as np
import pandas as pd

from backend.models.model_zoo import LossFamily, ModelSpec, ParamVector, predict_labels
from backend.reweighting.risks import AnnotatedDataset


def partition_accuracy(correct: np.ndarray, ids: Optional[np.ndarray]) -> Dict[int, float]:
    """Précision de chaque identifiant présent (dict vide sans annotations)."""
    if ids is None:
        return {}
    return {int(k): float(correct[ids == k].mean()) for k in np.unique(ids)}


@dataclass
class MetricsRecord:
    """
    Résultat final d'une méthode sur le split de test.

    Les précisions sont dans [0, 1] et la pire précision de groupe ne dépasse
    jamais la précision moyenne (moyenne pondérée par les tailles de groupe).
    """
    method: str
    average_accuracy: float
    worst_group_accuracy: float
    group_accuracy: Dict[int, float] = field(default_factory=dict)
    env_accuracy: Dict[int, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    history: Optional[pd.DataFrame] = field(default=None, repr=False)

    def __post_init__(self):
        values = [self.average_accuracy, self.worst_group_accuracy,
                  *self.group_accuracy.values(), *self.env_accuracy.values()]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError(f"{self.method}: precision hors de [0, 1]")
        if self.worst_group_accuracy > self.average_accuracy + 1e-12:
            raise ValueError(f"{self.method}: pire groupe {self.worst_group_accuracy} "
                             f"> moyenne {self.average_accuracy}")

    def to_row(self, config_hash: str, seed: int) -> Dict:
        """Ligne du tableau metrics.csv (sans temps d'exécution, pour rester déterministe)."""
        row = {"method": self.method, "config_hash": config_hash, "seed": seed,
               "average_accuracy": self.average_accuracy,
               "worst_group_accuracy": self.worst_group_accuracy}
        row.update({f"group_{g}_accuracy": acc for g, acc in sorted(self.group_accuracy.items())})
        row.update({f"env_{e}_accuracy": acc for e, acc in sorted(self.env_accuracy.items())})
        return row

    def to_json(self, config_hash: str, seed: int) -> str:
        record = self.to_row(config_hash, seed)
        record["wall_clock"] = self.wall_clock
        return json.dumps(record, sort_keys=True)


def evaluate(method: str, model: ModelSpec, params: ParamVector, data: AnnotatedDataset,
             family: LossFamily, wall_clock: float = 0.0,
             history: Optional[pd.DataFrame] = None) -> MetricsRecord:
    """Évalue θ sur un split annoté ; sans groupes, la pire précision vaut la moyenne."""
    predictions = predict_labels(model, params, data.batch, family)
    correct = (predictions == data.batch.labels).astype(np.float64)
    groups = partition_accuracy(correct, data.group_ids)
    average = float(correct.mean())
    return MetricsRecord(
        method=method,
        average_accuracy=average,
        worst_group_accuracy=min(groups.values()) if groups else average,
        group_accuracy=groups,
        env_accuracy=partition_accuracy(correct, data.env_ids),
        wall_clock=wall_clock,
        history=history,
    )


def weight_histograms(w, groups=None, bins: int = 20) -> pd.DataFrame:
    """
    Histogrammes des poids par groupe sur des classes communes.

    Returns:
        DataFrame (group, bin_left, bin_right, count) ; group = -1 sans annotations
    """
    w = np.asarray(w, dtype=np.float64)
    groups = np.full(w.shape[0], -1) if groups is None else np.asarray(groups)
    edges = np.histogram_bin_edges(w, bins=bins)
    rows = []
    for g in np.unique(groups):
        counts, _ = np.histogram(w[groups == g], bins=edges)
        rows.extend({"group": int(g), "bin_left": float(edges[b]), "bin_right": float(edges[b + 1]),
                     "count": int(c)} for b, c in enumerate(counts))
    return pd.DataFrame(rows, columns=["group", "bin_left", "bin_right", "count"])
