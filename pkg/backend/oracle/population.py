"""
Oracle de population sur des lois discrètes finies P(y, z_c, z_s).

Calculs exacts (sommes sur le support) : poids de débiaisage en forme close,
moments pondérés, moindres carrés pondérés de population, prédicteur débiaisé
optimal, entropies conditionnelles. Les catégories de y, z_c et z_s portent
des plongements réels ; x = S [z_c; z_s] pour une matrice de mélange S.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple
import logging

import numpy as np

from backend.data.synthetic import MixingMatrix
from backend.reweighting.inner_trainer import SingularSystemError

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-12
CONDITION_LIMIT = 1e12
CONDITIONING_AXES = {"z_c": 1, "z_s": 2}


class AssumptionViolation(ValueError):
    """Cellule de probabilité nulle là où une densité strictement positive est requise."""


def _as_matrix(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(-1, 1) if values.ndim == 1 else values


@dataclass(frozen=True)
class DiscreteJoint:
    """
    Loi jointe p[y][z_c][z_s] et plongements des catégories.

    y_values : |Y| réels ; zc_values : |Z_c| x d_c ; zs_values : |Z_s| x d_s.
    Les cellules nulles sont représentables ; strictly_positive indique si
    l'hypothèse de densité strictement positive tient.
    """
    p: np.ndarray
    y_values: np.ndarray
    zc_values: np.ndarray
    zs_values: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        y_values = np.asarray(self.y_values, dtype=np.float64).reshape(-1)
        zc_values = _as_matrix(self.zc_values)
        zs_values = _as_matrix(self.zs_values)
        if p.ndim != 3:
            raise ValueError(f"La table de probabilites doit etre de dimension 3 (recu {p.ndim})")
        expected = (y_values.shape[0], zc_values.shape[0], zs_values.shape[0])
        if p.shape != expected:
            raise ValueError(f"Table de forme {p.shape}, plongements de tailles {expected}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("Les probabilites doivent etre finies et positives ou nulles")
        if abs(p.sum() - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"Les probabilites somment a {p.sum()!r} au lieu de 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "y_values", y_values)
        object.__setattr__(self, "zc_values", zc_values)
        object.__setattr__(self, "zs_values", zs_values)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.p.shape

    @property
    def d_c(self) -> int:
        return self.zc_values.shape[1]

    @property
    def d_s(self) -> int:
        return self.zs_values.shape[1]

    @property
    def dim(self) -> int:
        return self.d_c + self.d_s

    @property
    def strictly_positive(self) -> bool:
        return bool(np.all(self.p > 0))

    def z_cells(self) -> np.ndarray:
        """Tableau |Z_c| x |Z_s| x d des vecteurs z = [z_c; z_s]."""
        n_c, n_s = self.zc_values.shape[0], self.zs_values.shape[0]
        core = np.broadcast_to(self.zc_values[:, None, :], (n_c, n_s, self.d_c))
        spurious = np.broadcast_to(self.zs_values[None, :, :], (n_c, n_s, self.d_s))
        return np.concatenate([core, spurious], axis=2)


@dataclass(frozen=True)
class WeightTable:
    """Poids w[y][z_c][z_s] > 0 ; valide pour une loi p si Σ p·w = 1."""
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 3:
            raise ValueError("La table de poids doit etre de dimension 3")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("Les poids doivent etre finis et strictement positifs")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, joint: DiscreteJoint) -> "WeightTable":
        return cls(np.ones(joint.shape))

    def mean_under(self, joint: DiscreteJoint) -> float:
        return float(np.sum(joint.p * self.w))


@dataclass(frozen=True)
class DebiasedPredictor:
    theta_bar: np.ndarray
    theta_bar_c: np.ndarray
    intercept: float = 0.0


@dataclass(frozen=True)
class WeightedMoments:
    """Moments exacts sous P_w, en espace x et en espace latent z."""
    second_moment: np.ndarray        # Σ^w = E_w[x xᵀ]
    cross: np.ndarray                # E_w[x y]
    z_second_moment: np.ndarray      # E_w[z zᵀ]
    z_cross: np.ndarray              # E_w[z y]
    cov_core_spurious: np.ndarray    # Cov^w(z_c, z_s)
    mean_y: float
    mean_core: np.ndarray
    mean_spurious: np.ndarray
    joint_core: np.ndarray           # P_w(y, z_c)
    marginal_spurious: np.ndarray    # P_w(z_s)


@dataclass(frozen=True)
class PopulationSolution:
    theta: np.ndarray
    beta: np.ndarray
    d_c: int
    intercept: float = 0.0

    @property
    def beta_core(self) -> np.ndarray:
        return self.beta[:self.d_c]

    @property
    def beta_spurious(self) -> np.ndarray:
        return self.beta[self.d_c:]


def _check_weight(joint: DiscreteJoint, weight: Optional[WeightTable]) -> np.ndarray:
    if weight is None:
        return np.ones(joint.shape)
    if weight.w.shape != joint.shape:
        raise ValueError(f"Table de poids {weight.w.shape} pour une loi {joint.shape}")
    return weight.w


def _mixing(joint: DiscreteJoint, mixing: Optional[MixingMatrix]) -> MixingMatrix:
    if mixing is None:
        return MixingMatrix.identity(joint.dim)
    if mixing.dim != joint.dim:
        raise ValueError(f"Melange de dimension {mixing.dim} pour des latents de dimension {joint.dim}")
    return mixing


def weighted_law(joint: DiscreteJoint, weight: Optional[WeightTable] = None) -> np.ndarray:
    """P_w = w·P cellule par cellule."""
    return joint.p * _check_weight(joint, weight)


def closed_form_weight(joint: DiscreteJoint) -> WeightTable:
    """
    w(y, z_c, z_s) = P(y, z_c) P(z_s) / P(y, z_c, z_s).

    Sous P_w, (y, z_c) est indépendant de z_s et les marges P(y, z_c), P(z_s)
    sont conservées.

    Raises:
        AssumptionViolation: si une cellule de la loi est nulle
    """
    if not joint.strictly_positive:
        zeros = np.argwhere(joint.p <= 0)
        raise AssumptionViolation(
            f"Densite non strictement positive: {len(zeros)} cellule(s) nulle(s), "
            f"par exemple {tuple(int(i) for i in zeros[0])}")
    p_core = joint.p.sum(axis=2, keepdims=True)
    p_spurious = joint.p.sum(axis=(0, 1), keepdims=True)
    return WeightTable(p_core * p_spurious / joint.p)


def independence_gap(joint: DiscreteJoint, weight: Optional[WeightTable] = None) -> float:
    """max |P_w(y, z_c, z_s) - P_w(y, z_c) P_w(z_s)| sur le support."""
    q = weighted_law(joint, weight)
    return float(np.max(np.abs(q - q.sum(axis=2, keepdims=True) * q.sum(axis=(0, 1), keepdims=True))))


def weighted_moments(joint: DiscreteJoint, weight: Optional[WeightTable] = None,
                     mixing: Optional[MixingMatrix] = None) -> WeightedMoments:
    """
    Moments exacts sous P_w (poids uniforme si weight est None).

    Args:
        joint: Loi discrète
        weight: Table de poids
        mixing: Matrice de mélange (identité par défaut)

    Returns:
        WeightedMoments
    """
    mixing = _mixing(joint, mixing)
    q = weighted_law(joint, weight)
    zc, zs, y = joint.zc_values, joint.zs_values, joint.y_values

    q_core = q.sum(axis=(0, 2))
    q_spurious = q.sum(axis=(0, 1))
    q_cs = q.sum(axis=0)

    cc = zc.T @ (q_core[:, None] * zc)
    ss = zs.T @ (q_spurious[:, None] * zs)
    cs = zc.T @ q_cs @ zs
    z_second = np.block([[cc, cs], [cs.T, ss]])
    z_cross = np.concatenate([np.einsum("ycs,y,cd->d", q, y, zc), np.einsum("ycs,y,sd->d", q, y, zs)])

    mean_core = q_core @ zc
    mean_spurious = q_spurious @ zs
    return WeightedMoments(
        second_moment=mixing.S @ z_second @ mixing.S.T,
        cross=mixing.S @ z_cross,
        z_second_moment=z_second,
        z_cross=z_cross,
        cov_core_spurious=cs - np.outer(mean_core, mean_spurious),
        mean_y=float(np.einsum("ycs,y->", q, y)),
        mean_core=mean_core,
        mean_spurious=mean_spurious,
        joint_core=q.sum(axis=2),
        marginal_spurious=q_spurious,
    )


def _solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > CONDITION_LIMIT:
        raise SingularSystemError(f"Second moment {what} singulier")
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"Second moment {what} singulier: {e}") from e


def _with_intercept(second: np.ndarray, cross: np.ndarray, mean_x: np.ndarray, mean_y: float, mass: float):
    d = second.shape[0]
    A = np.empty((d + 1, d + 1))
    A[:d, :d] = second
    A[:d, d] = A[d, :d] = mean_x
    A[d, d] = mass
    return A, np.append(cross, mean_y)


def population_wls(joint: DiscreteJoint, weight: Optional[WeightTable] = None,
                   mixing: Optional[MixingMatrix] = None, intercept: bool = False) -> PopulationSolution:
    """
    θ*(w) = argmin_θ E_w[(y - xᵀθ)²] = (Σ^w)⁻¹ E_w[x y], résolu en espace x.

    beta = Sᵀθ donne les coefficients sur [z_c; z_s].

    Raises:
        SingularSystemError: si Σ^w est singulier
    """
    mixing = _mixing(joint, mixing)
    moments = weighted_moments(joint, weight, mixing)
    A, b = moments.second_moment, moments.cross
    if intercept:
        mean_x = mixing.S @ np.concatenate([moments.mean_core, moments.mean_spurious])
        mass = float(weighted_law(joint, weight).sum())
        A, b = _with_intercept(A, b, mean_x, moments.mean_y, mass)

    solution = _solve(A, b, "pondere")
    theta = solution[:joint.dim]
    return PopulationSolution(theta=theta, beta=mixing.S.T @ theta, d_c=joint.d_c,
                              intercept=float(solution[joint.dim]) if intercept else 0.0)


def optimal_debiased_predictor(joint: DiscreteJoint, mixing: Optional[MixingMatrix] = None,
                               intercept: bool = False) -> DebiasedPredictor:
    """
    Prédicteur débiaisé optimal : régression de y sur z_c seul sous P, puis θ̄ = Tᵀ[θ̄_c; 0].
    """
    mixing = _mixing(joint, mixing)
    p_yc = joint.p.sum(axis=2)
    p_core = p_yc.sum(axis=0)
    zc = joint.zc_values
    A = zc.T @ (p_core[:, None] * zc)
    b = zc.T @ (p_yc.T @ joint.y_values)
    if intercept:
        A, b = _with_intercept(A, b, p_core @ zc, float(p_yc.sum(axis=1) @ joint.y_values), 1.0)

    solution = _solve(A, b, "des features utiles")
    theta_bar_c = solution[:joint.d_c]
    theta_bar = mixing.T.T @ np.concatenate([theta_bar_c, np.zeros(joint.d_s)])
    return DebiasedPredictor(theta_bar=theta_bar, theta_bar_c=theta_bar_c,
                             intercept=float(solution[joint.d_c]) if intercept else 0.0)


def conditional_entropy(joint: DiscreteJoint, conditioning: Iterable[str] = ("z_c", "z_s"),
                        weight: Optional[WeightTable] = None) -> float:
    """
    H_w[Y | conditionnement] en nats, avec la convention 0·log 0 = 0.

    Args:
        joint: Loi discrète
        conditioning: Sous-ensemble de {"z_c", "z_s"} (vide : H[Y])
        weight: Table de poids (None : loi P elle-même)
    """
    conditioning = set(conditioning)
    unknown = conditioning - set(CONDITIONING_AXES)
    if unknown:
        raise ValueError(f"Variables de conditionnement inconnues: {sorted(unknown)}")

    q = weighted_law(joint, weight)
    q = q / q.sum()
    dropped = tuple(axis for name, axis in CONDITIONING_AXES.items() if name not in conditioning)
    q_yc = q.sum(axis=dropped) if dropped else q
    q_c = q_yc.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q_yc > 0, q_yc * np.log(q_yc / q_c), 0.0)
    return float(-terms.sum())


def population_risk(joint: DiscreteJoint, mixing: Optional[MixingMatrix], theta,
                    weight: Optional[WeightTable] = None, intercept: float = 0.0) -> float:
    """E_w[(y - xᵀθ - b)²] exact."""
    mixing = _mixing(joint, mixing)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    predictions = joint.z_cells() @ (mixing.S.T @ theta) + intercept
    residuals = joint.y_values[:, None, None] - predictions[None, :, :]
    return float(np.sum(weighted_law(joint, weight) * residuals ** 2))


def random_joint(rng: np.random.Generator, n_y: int = 2, n_zc: int = 2, n_zs: int = 2,
                 d_c: int = 1, d_s: int = 1, floor: float = 0.05) -> DiscreteJoint:
    """
    Loi strictement positive tirée au hasard.

    Une part floor de la masse est uniforme. Les plongements de z_s sont
    centrés sous P ; y binaire est codé ±1.
    """
    size = n_y * n_zc * n_zs
    p = (1.0 - floor) * rng.dirichlet(np.ones(size)) + floor / size
    p = (p / p.sum()).reshape(n_y, n_zc, n_zs)

    y_values = np.array([-1.0, 1.0]) if n_y == 2 else rng.standard_normal(n_y)
    zc_values = rng.standard_normal((n_zc, d_c))
    zs_values = rng.standard_normal((n_zs, d_s))
    zs_values = zs_values - p.sum(axis=(0, 1)) @ zs_values
    return DiscreteJoint(p=p, y_values=y_values, zc_values=zc_values, zs_values=zs_values)


def sample_joint(joint: DiscreteJoint, n: int, rng: np.random.Generator,
                 mixing: Optional[MixingMatrix] = None, weight: Optional[WeightTable] = None):
    """
    Tire n échantillons i.i.d. de P.

    Returns:
        (X n x d, y, poids par échantillon w(y_i, x_i) ; 1 si weight est None)
    """
    if n <= 0:
        raise ValueError("n doit etre strictement positif")
    mixing = _mixing(joint, mixing)
    cells = rng.choice(joint.p.size, size=n, p=joint.p.reshape(-1))
    y_idx, c_idx, s_idx = np.unravel_index(cells, joint.shape)
    Z = np.hstack([joint.zc_values[c_idx], joint.zs_values[s_idx]])
    sample_weights = np.ones(n) if weight is None else _check_weight(joint, weight)[y_idx, c_idx, s_idx]
    return Z @ mixing.S.T, joint.y_values[y_idx], sample_weights


_SECTIONS = ("values.y", "values.z_c", "values.z_s", "probabilities")


def save_joint(joint: DiscreteJoint, path) -> Path:
    """Fichier texte par sections ; les flottants sont écrits par repr (relecture exacte)."""
    path = Path(path)
    lines = ["# loi jointe discrete p[y][z_c][z_s]"]
    for section, values in zip(_SECTIONS, (joint.y_values.reshape(-1, 1), joint.zc_values, joint.zs_values)):
        lines.append(f"[{section}]")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in values)
    lines.append("[probabilities]")
    for index in np.ndindex(*joint.shape):
        lines.append(f"{index[0]} {index[1]} {index[2]} {float(joint.p[index])!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_joint(path) -> DiscreteJoint:
    """Relit un fichier écrit par save_joint."""
    sections = {name: [] for name in _SECTIONS}
    current = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise ValueError(f"Section inconnue: {current}")
            continue
        if current is None:
            raise ValueError(f"Ligne hors section: {line}")
        sections[current].append(line.split())

    values = [np.array([[float(v) for v in row] for row in sections[name]]) for name in _SECTIONS[:3]]
    p = np.zeros((values[0].shape[0], values[1].shape[0], values[2].shape[0]))
    for row in sections["probabilities"]:
        if len(row) != 4:
            raise ValueError(f"Ligne de probabilite invalide: {' '.join(row)}")
        p[int(row[0]), int(row[1]), int(row[2])] = float(row[3])
    return DiscreteJoint(p=p, y_values=values[0].reshape(-1), zc_values=values[1], zs_values=values[2])
