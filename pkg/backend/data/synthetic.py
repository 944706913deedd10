"""
Générateurs synthétiques de décalage de distribution.

- gen_two_env : analogue ColoredMNIST, deux environnements d'entraînement où
  l'attribut parasite suit l'étiquette (bruitée) avec une probabilité propre à
  chaque environnement, et un test où la corrélation est inversée.
- gen_group : analogue Waterbirds/CelebA, quatre groupes étiquette x attribut,
  groupes minoritaires rares à l'entraînement, test équilibré.
- gen_toy_2d : jeu jouet à deux coordonnées (x1 utile, x2 parasite).
- make_mixing / entangle / disentangle : mélange inversible x = S[z_c; z_s].

Tous les générateurs sont des fonctions pures de (config, graine).
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple
import logging

import numpy as np

from backend.models.model_zoo import Batch
from backend.reweighting.risks import AnnotatedDataset

logger = logging.getLogger(__name__)

# (corrélation env. 1, corrélation env. 2, corrélation test)
CORRELATION_PRESETS: Dict[str, Tuple[float, float, float]] = {
    "colored_mnist": (0.9, 0.8, 0.1),
    "colored_object": (0.999, 0.7, 0.1),
}

MIXING_TOLERANCE = 1e-8
MAX_MIXING_ATTEMPTS = 10

# Identifiants des flux aléatoires indépendants
_CORE_STREAM = 0
_SPURIOUS_STREAM = 1
_SPLIT_TRAIN, _SPLIT_VAL, _SPLIT_TEST = 0, 10, 20


def _check_probability(name: str, value: float, low: float, high: float, closed_low=False):
    ok = (low <= value < high) if closed_low else (low < value < high)
    if not ok:
        bracket = "[" if closed_low else "]"
        raise ValueError(f"{name} doit etre dans {bracket}{low}, {high}[ (recu {value})")


@dataclass(frozen=True)
class TwoEnvConfig:
    """Analogue ColoredMNIST ; défauts : corrélations (0.9, 0.8, 0.1), bruit d'étiquette 25 %."""
    n_train_per_env: int = 2500
    n_val: int = 1000
    n_test: int = 5000
    train_corrs: Tuple[float, float] = (0.9, 0.8)
    test_corr: float = 0.1
    label_noise: float = 0.25
    core_dim: int = 2
    spurious_dim: int = 2
    core_margin: float = 1.0
    spurious_margin: float = 1.0
    core_noise: float = 0.25
    spurious_noise: float = 0.25
    entangle: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_corrs", tuple(float(c) for c in self.train_corrs))
        if len(self.train_corrs) != 2:
            raise ValueError("train_corrs doit contenir deux correlations")
        for n_name in ("n_train_per_env", "n_val", "n_test", "core_dim", "spurious_dim"):
            if getattr(self, n_name) < 1:
                raise ValueError(f"{n_name} doit etre strictement positif")
        for corr in (*self.train_corrs, self.test_corr):
            _check_probability("correlation", corr, 0.0, 1.0)
        _check_probability("label_noise", self.label_noise, 0.0, 0.5, closed_low=True)
        if self.core_margin <= 0 or self.spurious_margin <= 0:
            raise ValueError("Les marges doivent etre strictement positives")
        if self.core_noise < 0 or self.spurious_noise < 0:
            raise ValueError("Les bruits de features doivent etre positifs ou nuls")


@dataclass(frozen=True)
class GroupConfig:
    """Analogue à quatre groupes ; les groupes 2y + a avec a = y sont majoritaires.

    val_majority_fraction règle la validation : 0.5 (défaut) donne des groupes de
    même taille, None reprend majority_fraction.
    """
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 2000
    majority_fraction: float = 0.9
    val_majority_fraction: Optional[float] = 0.5
    core_dim: int = 2
    spurious_dim: int = 2
    core_margin: float = 1.0
    spurious_margin: float = 2.0
    noise_scale: float = 1.0
    spurious_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for n_name in ("n_train", "n_val", "n_test", "core_dim", "spurious_dim"):
            if getattr(self, n_name) < 1:
                raise ValueError(f"{n_name} doit etre strictement positif")
        _check_probability("majority_fraction", self.majority_fraction, 0.5, 1.0, closed_low=True)
        if self.val_majority_fraction is not None:
            _check_probability("val_majority_fraction", self.val_majority_fraction, 0.5, 1.0, closed_low=True)
        if self.core_margin <= 0 or self.spurious_margin <= 0 or self.noise_scale <= 0:
            raise ValueError("Marges et bruit doivent etre strictement positifs")
        if self.spurious_noise < 0:
            raise ValueError("spurious_noise doit etre positif ou nul")


@dataclass(frozen=True)
class MixingMatrix:
    """Matrice de mélange S inversible et son inverse T."""
    S: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=np.float64))
        T = np.atleast_2d(np.asarray(self.T, dtype=np.float64))
        if S.shape != T.shape or S.shape[0] != S.shape[1]:
            raise ValueError(f"Formes incompatibles: S {S.shape}, T {T.shape}")
        if np.max(np.abs(T @ S - np.eye(S.shape[0]))) > MIXING_TOLERANCE:
            raise ValueError("T n'est pas l'inverse de S")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "T", T)

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "MixingMatrix":
        return cls(S=np.eye(dim), T=np.eye(dim))

    @classmethod
    def from_matrix(cls, S) -> "MixingMatrix":
        S = np.asarray(S, dtype=np.float64)
        return cls(S=S, T=np.linalg.inv(S))


@dataclass(frozen=True)
class SplitBundle:
    """Les trois splits d'un benchmark et de quoi retrouver les latents."""
    train: AnnotatedDataset
    val: AnnotatedDataset
    test: AnnotatedDataset
    core_dim: int
    spurious_dim: int
    mixing: Optional[MixingMatrix] = None
    metadata: Dict = field(default_factory=dict)

    def splits(self) -> Dict[str, AnnotatedDataset]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_mixing(dim: int, seed: int) -> MixingMatrix:
    """
    Tire S = U diag(σ) Vᵀ, U et V rotations aléatoires, σ log-uniforme dans [1, 10].

    Le conditionnement vaut au plus 10. Si la vérification de l'inverse échoue,
    on retire une nouvelle matrice.
    """
    if dim < 1:
        raise ValueError("dim doit etre strictement positif")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    for attempt in range(MAX_MIXING_ATTEMPTS):
        U = _random_rotation(rng, dim)
        V = _random_rotation(rng, dim)
        sigma = np.exp(rng.uniform(0.0, np.log(10.0), size=dim))
        S = (U * sigma) @ V.T
        T = np.linalg.inv(S)
        if np.max(np.abs(T @ S - np.eye(dim))) <= MIXING_TOLERANCE:
            return MixingMatrix(S=S, T=T)
        logger.debug(f"Matrice de melange rejetee (tentative {attempt + 1})")
    raise np.linalg.LinAlgError(f"Impossible de tirer une matrice de melange inversible en dimension {dim}")


def entangle(Z, S) -> np.ndarray:
    """X = Z Sᵀ, soit x = S z pour chaque ligne."""
    S = S.S if isinstance(S, MixingMatrix) else np.asarray(S, dtype=np.float64)
    return np.asarray(Z, dtype=np.float64) @ S.T


def disentangle(X, mixing: MixingMatrix) -> np.ndarray:
    """Z = X Tᵀ."""
    return np.asarray(X, dtype=np.float64) @ mixing.T.T


def _cloud(rng: np.random.Generator, signs: np.ndarray, dim: int, margin: float, noise: float):
    """Nuages gaussiens centrés en ±margin (séparation totale margin le long de la diagonale)."""
    centers = np.outer(2.0 * signs - 1.0, np.full(dim, margin / np.sqrt(dim)))
    return centers + noise * rng.standard_normal((signs.shape[0], dim))


def _two_env_split(cfg: TwoEnvConfig, n: int, corr: float, split_id: int):
    """Un split à corrélation fixe ; latents utiles et étiquettes sur un flux indépendant du flux parasite."""
    core_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_id, _CORE_STREAM]))
    spurious_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_id, _SPURIOUS_STREAM]))

    clean = core_rng.integers(0, 2, size=n).astype(np.float64)
    core = _cloud(core_rng, clean, cfg.core_dim, cfg.core_margin, cfg.core_noise)
    flips = core_rng.random(n) < cfg.label_noise
    labels = np.where(flips, 1.0 - clean, clean)

    agree = spurious_rng.random(n) < corr
    attribute = np.where(agree, labels, 1.0 - labels)
    spurious = _cloud(spurious_rng, attribute, cfg.spurious_dim, cfg.spurious_margin, cfg.spurious_noise)
    return np.hstack([core, spurious]), labels, attribute


def _annotate(features, labels, attribute, env_id, mixing) -> AnnotatedDataset:
    if mixing is not None:
        features = entangle(features, mixing)
    n = labels.shape[0]
    env_ids = np.full(n, env_id, dtype=np.int64) if np.isscalar(env_id) else env_id
    return AnnotatedDataset(Batch(features, labels), env_ids=env_ids,
                            group_ids=(2 * labels + attribute).astype(np.int64))


def gen_two_env(cfg: TwoEnvConfig) -> SplitBundle:
    """
    Génère train (deux environnements), validation (mélange des environnements d'entraînement) et test.

    Args:
        cfg: Configuration validée

    Returns:
        SplitBundle ; env_ids {0, 1} en train et validation, 0 en test ;
        group_ids = 2·étiquette + attribut sur tous les splits
    """
    dim = cfg.core_dim + cfg.spurious_dim
    mixing = make_mixing(dim, cfg.seed) if cfg.entangle else None

    parts = [_two_env_split(cfg, cfg.n_train_per_env, corr, _SPLIT_TRAIN + e)
             for e, corr in enumerate(cfg.train_corrs)]
    train = _annotate(
        np.vstack([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.repeat(np.arange(2), cfg.n_train_per_env), mixing)

    # validation dans la distribution : moitié par environnement d'entraînement
    sizes = (cfg.n_val - cfg.n_val // 2, cfg.n_val // 2)
    val_parts = [_two_env_split(cfg, size, corr, _SPLIT_VAL + e)
                 for e, (size, corr) in enumerate(zip(sizes, cfg.train_corrs)) if size > 0]
    val_envs = np.concatenate([np.full(size, e) for e, size in enumerate(sizes) if size > 0])
    val = _annotate(np.vstack([p[0] for p in val_parts]), np.concatenate([p[1] for p in val_parts]),
                    np.concatenate([p[2] for p in val_parts]), val_envs, mixing)

    features, labels, attribute = _two_env_split(cfg, cfg.n_test, cfg.test_corr, _SPLIT_TEST)
    test = _annotate(features, labels, attribute, 0, mixing)

    logger.debug(f"gen_two_env: {train.n} train / {val.n} val / {test.n} test, intrication={cfg.entangle}")
    return SplitBundle(train=train, val=val, test=test, core_dim=cfg.core_dim,
                       spurious_dim=cfg.spurious_dim, mixing=mixing,
                       metadata={"kind": "two_env", "config": asdict(cfg), "seed": cfg.seed})


def group_counts(n: int, majority_fraction: float) -> np.ndarray:
    """Tailles exactes des groupes (0, 1, 2, 3) ; 0 et 3 (attribut = étiquette) sont majoritaires."""
    majority = int(round(majority_fraction * n))
    minority = n - majority
    counts = np.array([majority // 2, minority // 2, minority - minority // 2, majority - majority // 2])
    if np.any(counts == 0):
        raise ValueError(f"Configuration avec un groupe vide: tailles {counts.tolist()} pour n = {n}")
    return counts


def _group_split(cfg: GroupConfig, counts: np.ndarray, split_id: int) -> AnnotatedDataset:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_id]))
    groups = np.repeat(np.arange(4), counts)
    groups = groups[rng.permutation(groups.shape[0])]
    labels = (groups // 2).astype(np.float64)
    attribute = (groups % 2).astype(np.float64)
    core = _cloud(rng, labels, cfg.core_dim, cfg.core_margin, cfg.noise_scale)
    spurious = _cloud(rng, attribute, cfg.spurious_dim, cfg.spurious_margin, cfg.spurious_noise)
    return AnnotatedDataset(Batch(np.hstack([core, spurious]), labels), group_ids=groups)


def gen_group(cfg: GroupConfig) -> SplitBundle:
    """
    Quatre groupes étiquette x attribut.

    Le train suit la répartition majority_fraction (tailles exactes), la validation
    val_majority_fraction et le test est équilibré. Un groupe vide lève ValueError.
    """
    train = _group_split(cfg, group_counts(cfg.n_train, cfg.majority_fraction), _SPLIT_TRAIN)
    val_fraction = cfg.majority_fraction if cfg.val_majority_fraction is None else cfg.val_majority_fraction
    val = _group_split(cfg, group_counts(cfg.n_val, val_fraction), _SPLIT_VAL)
    test = _group_split(cfg, group_counts(cfg.n_test, 0.5), _SPLIT_TEST)
    logger.debug(f"gen_group: tailles train {np.bincount(train.group_ids).tolist()}")
    return SplitBundle(train=train, val=val, test=test, core_dim=cfg.core_dim,
                       spurious_dim=cfg.spurious_dim,
                       metadata={"kind": "group", "config": asdict(cfg), "seed": cfg.seed})


def gen_toy_2d(n: int, corr: float, seed: int) -> AnnotatedDataset:
    """
    Jeu jouet : x1 = (2y - 1) + N(0, 1) utile, x2 = (2a - 1) + N(0, 1) parasite.

    L'attribut a vaut y avec probabilité corr ; group_ids = 2y + a.
    """
    if n <= 0:
        raise ValueError(f"gen_toy_2d demande n > 0 (recu {n})")
    _check_probability("corr", corr, 0.0, 1.0, closed_low=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    labels = rng.integers(0, 2, size=n).astype(np.float64)
    attribute = np.where(rng.random(n) < corr, labels, 1.0 - labels)
    features = np.column_stack([
        (2.0 * labels - 1.0) + rng.standard_normal(n),
        (2.0 * attribute - 1.0) + rng.standard_normal(n),
    ])
    return AnnotatedDataset(Batch(features, labels), group_ids=(2 * labels + attribute).astype(np.int64))


def core_view(bundle: SplitBundle, data: AnnotatedDataset) -> AnnotatedDataset:
    """Copie de data restreinte aux coordonnées utiles z_c (après désintrication éventuelle)."""
    features = data.batch.features
    if bundle.mixing is not None:
        features = disentangle(features, bundle.mixing)
    return AnnotatedDataset(Batch(features[:, :bundle.core_dim], data.batch.labels),
                            env_ids=data.env_ids, group_ids=data.group_ids, weights=data.weights)


def agreement_rate(data: AnnotatedDataset) -> float:
    """Fraction d'échantillons dont l'attribut parasite (group_id % 2) égale l'étiquette."""
    if data.group_ids is None:
        raise ValueError("agreement_rate demande des group_ids")
    return float(np.mean(data.group_ids % 2 == data.batch.labels))
