"""
Zoo de petits modèles différentiables (linéaire, logistique, MLP).

Chaque modèle expose ses sorties par échantillon, les gradients par échantillon
de la perte et de la sortie par rapport au vecteur plat de paramètres θ. Ce sont
les seules dérivées dont le reste de la boîte à outils a besoin (risques OOD,
hypergradients tronqués). La rétropropagation est écrite à la main pour les
trois architectures et vérifiée contre des différences finies dans les tests.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple
import logging

import numpy as np

logger = logging.getLogger(__name__)

ParamVector = np.ndarray


class DimensionError(ValueError):
    """Incompatibilité de dimensions entre spécification, paramètres et batch."""


class InvalidLabelError(ValueError):
    """Étiquette invalide pour la famille de perte demandée."""


class ModelKind(str, Enum):
    LINEAR = "Linear"
    LOGISTIC = "Logistic"
    MLP = "MLP"


class Activation(str, Enum):
    RELU = "ReLU"
    TANH = "Tanh"


class LossFamily(str, Enum):
    SQUARE = "Square"
    LOGISTIC_BCE = "LogisticBCE"


@dataclass(frozen=True)
class ModelSpec:
    """
    Description d'une architecture à sortie scalaire.

    Disposition des paramètres :
        Linear / Logistic : θ = poids de longueur input_dim (pas de biais).
        MLP : pour chaque couche cachée W (h_out x h_in, ligne par ligne) puis b,
              enfin les poids de sortie v (h_last) et le biais de sortie c.
    """
    kind: ModelKind
    input_dim: int
    hidden_dims: Tuple[int, ...] = ()
    activation: Activation = Activation.RELU
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim doit etre positif (recu {self.input_dim})")
        if self.output_dim != 1:
            raise ValueError("Seules les sorties scalaires sont supportees (output_dim = 1)")
        if self.kind in (ModelKind.LINEAR, ModelKind.LOGISTIC) and self.hidden_dims:
            raise ValueError(f"Un modele {self.kind.value} n'a pas de couches cachees")
        if self.kind == ModelKind.MLP and not self.hidden_dims:
            raise ValueError("Un MLP demande au moins une couche cachee")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"Tailles de couches cachees invalides: {self.hidden_dims}")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """Formes (h_out, h_in) des couches cachées."""
        dims = [self.input_dim, *self.hidden_dims]
        return [(dims[i + 1], dims[i]) for i in range(len(self.hidden_dims))]

    @property
    def n_params(self) -> int:
        if self.kind != ModelKind.MLP:
            return self.input_dim
        count = sum(h_out * h_in + h_out for h_out, h_in in self.layer_shapes)
        return count + self.hidden_dims[-1] + 1


@dataclass(frozen=True)
class Batch:
    """Données (x_i, y_i) d'un lot : matrice n x d et étiquettes de longueur n."""
    features: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if features.shape[0] < 1:
            raise DimensionError("Un batch doit contenir au moins un echantillon")
        if features.shape[0] != labels.shape[0]:
            raise DimensionError(
                f"{features.shape[0]} lignes de features pour {labels.shape[0]} etiquettes")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(labels))):
            raise ValueError("Le batch contient des valeurs non finies")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "Batch":
        return Batch(self.features[indices], self.labels[indices])


def _check(spec: ModelSpec, params: ParamVector, batch: Batch = None) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.shape[0] != spec.n_params:
        raise DimensionError(
            f"{params.shape[0]} parametres fournis, {spec.n_params} attendus pour {spec.kind.value}")
    if not np.all(np.isfinite(params)):
        raise ValueError("Parametres non finis (NaN ou infini)")
    if batch is not None and batch.dim != spec.input_dim:
        raise DimensionError(f"Batch de dimension {batch.dim}, modele de dimension {spec.input_dim}")
    return params


def _unpack_mlp(spec: ModelSpec, params: np.ndarray):
    layers = []
    offset = 0
    for h_out, h_in in spec.layer_shapes:
        W = params[offset:offset + h_out * h_in].reshape(h_out, h_in)
        offset += h_out * h_in
        b = params[offset:offset + h_out]
        offset += h_out
        layers.append((W, b))
    h_last = spec.hidden_dims[-1]
    v = params[offset:offset + h_last]
    c = params[offset + h_last]
    return layers, v, c


def _activate(activation: Activation, z: np.ndarray):
    """Retourne (activation, dérivée) ; ReLU'(0) = 0."""
    if activation == Activation.RELU:
        return np.maximum(z, 0.0), (z > 0).astype(np.float64)
    a = np.tanh(z)
    return a, 1.0 - a ** 2


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """
    Initialisation des paramètres.

    Linear / Logistic démarrent à zéro (problèmes convexes). Les poids et biais
    du MLP sont tirés uniformément dans [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """
    if spec.kind != ModelKind.MLP:
        return np.zeros(spec.n_params)

    rng = np.random.default_rng(seed)
    chunks = []
    for h_out, h_in in spec.layer_shapes:
        bound = 1.0 / np.sqrt(h_in)
        chunks.append(rng.uniform(-bound, bound, size=h_out * h_in))
        chunks.append(rng.uniform(-bound, bound, size=h_out))
    h_last = spec.hidden_dims[-1]
    bound = 1.0 / np.sqrt(h_last)
    chunks.append(rng.uniform(-bound, bound, size=h_last + 1))
    return np.concatenate(chunks)


def forward(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """
    Sorties f(x_i; θ) par échantillon (logit pour Logistic).

    Args:
        spec: Architecture
        params: Vecteur plat de paramètres
        batch: Lot d'entrée

    Returns:
        Vecteur de longueur n
    """
    params = _check(spec, params, batch)
    X = batch.features
    if spec.kind != ModelKind.MLP:
        return X @ params

    layers, v, c = _unpack_mlp(spec, params)
    a = X
    for W, b in layers:
        a, _ = _activate(spec.activation, a @ W.T + b)
    return a @ v + c


def per_sample_output_grads(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """Matrice n x |θ| des gradients ∇_θ f(x_i; θ)."""
    params = _check(spec, params, batch)
    X = batch.features
    if spec.kind != ModelKind.MLP:
        return X.copy()

    layers, v, c = _unpack_mlp(spec, params)
    n = batch.n

    # Passe avant en gardant les activations et leurs dérivées
    activations = [X]
    derivatives = []
    a = X
    for W, b in layers:
        a, da = _activate(spec.activation, a @ W.T + b)
        activations.append(a)
        derivatives.append(da)

    # Passe arrière : on remonte les couches en partant de df/da_L = v
    grads_reversed = [np.ones((n, 1)), activations[-1]]
    g_a = np.broadcast_to(v, (n, v.shape[0]))
    for layer_index in range(len(layers) - 1, -1, -1):
        W, _ = layers[layer_index]
        g_z = g_a * derivatives[layer_index]
        a_prev = activations[layer_index]
        grad_W = (g_z[:, :, None] * a_prev[:, None, :]).reshape(n, -1)
        grads_reversed.append(g_z)
        grads_reversed.append(grad_W)
        g_a = g_z @ W

    return np.concatenate(grads_reversed[::-1], axis=1)


def _sigmoid(f):
    # Forme stable pour les grands |f|
    return 0.5 * (1.0 + np.tanh(0.5 * f))


def loss_derivatives(family: LossFamily, f, y):
    """
    Perte et ses deux premières dérivées par rapport à la sortie f.

    Args:
        family: Square ou LogisticBCE
        f: Sortie(s) du modèle (scalaire ou tableau)
        y: Étiquette(s) ; dans {0, 1} pour LogisticBCE

    Returns:
        Tuple (ℓ, ℓ', ℓ'')
    """
    family = LossFamily(family)
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    if family == LossFamily.SQUARE:
        r = f - y
        return r ** 2, 2.0 * r, np.full(np.broadcast(f, y).shape, 2.0)

    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidLabelError("LogisticBCE attend des etiquettes dans {0, 1}")
    sig = _sigmoid(f)
    loss = np.logaddexp(0.0, f) - y * f
    return loss, sig - y, sig * (1.0 - sig)


def per_sample_loss_grads(spec: ModelSpec, params: ParamVector, batch: Batch,
                          family: LossFamily) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pertes par échantillon et matrice n x |θ| des gradients ∇_θ ℓ_i.

    Returns:
        (losses, grads)
    """
    f = forward(spec, params, batch)
    losses, d_loss, _ = loss_derivatives(family, f, batch.labels)
    grads = per_sample_output_grads(spec, params, batch) * d_loss[:, None]
    return losses, grads


def predict_labels(spec: ModelSpec, params: ParamVector, batch: Batch,
                   family: LossFamily) -> np.ndarray:
    """Prédictions binaires : f >= 0 pour la logistique, f >= 0.5 pour la perte carrée."""
    f = forward(spec, params, batch)
    threshold = 0.0 if LossFamily(family) == LossFamily.LOGISTIC_BCE else 0.5
    return (f >= threshold).astype(np.float64)
