"""
Configuration d'une expérience : modèles pydantic chargés depuis un fichier YAML.

Exemple minimal :

    seed: 0
    output_dir: runs/colored_mnist
    dataset:
      kind: two_env
      two_env: {preset: colored_mnist, label_noise: 0.25}
    model: {kind: MLP, hidden_dims: [16], loss: LogisticBCE}
    outer: {iterations: 100, risk: {kind: IRMv1, lam: 1.0}}
    baselines: [ERM, CoreOnlyOracle]
"""

from pathlib import Path
from typing import List, Literal, Optional, Tuple
import hashlib
import json
import os

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from backend.data.synthetic import (
    CORRELATION_PRESETS,
    GroupConfig,
    SplitBundle,
    TwoEnvConfig,
    gen_group,
    gen_toy_2d,
    gen_two_env,
)
from backend.models.model_zoo import Activation, LossFamily, ModelKind, ModelSpec
from backend.reweighting.inner_trainer import InnerConfig, InnerOptimizer
from backend.reweighting.outer_optimizer import OuterConfig
from backend.reweighting.risks import RiskKind, RiskSpec

OUTPUT_ROOT_ENV_VAR = "REWEIGH_OUTPUT_ROOT"

BaselineName = Literal["ERM", "GroupOracleUpweight", "IRMv1-direct", "REx-direct", "CVaR-direct",
                       "GroupDRO-direct", "CoreOnlyOracle"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TwoEnvSection(_Section):
    preset: Optional[Literal["colored_mnist", "colored_object"]] = None
    n_train_per_env: int = Field(2500, ge=1)
    n_val: int = Field(1000, ge=1)
    n_test: int = Field(5000, ge=1)
    train_corrs: Tuple[float, float] = (0.9, 0.8)
    test_corr: float = Field(0.1, gt=0.0, lt=1.0)
    label_noise: float = Field(0.25, ge=0.0, lt=0.5)
    core_dim: int = Field(2, ge=1)
    spurious_dim: int = Field(2, ge=1)
    core_margin: float = Field(1.0, gt=0.0)
    spurious_margin: float = Field(1.0, gt=0.0)
    core_noise: float = Field(0.25, ge=0.0)
    spurious_noise: float = Field(0.25, ge=0.0)
    entangle: bool = False

    @model_validator(mode="after")
    def _apply_preset(self):
        if self.preset is not None:
            first, second, test = CORRELATION_PRESETS[self.preset]
            self.train_corrs = (first, second)
            self.test_corr = test
        for corr in self.train_corrs:
            if not 0.0 < corr < 1.0:
                raise ValueError(f"train_corrs doit etre dans ]0, 1[ (recu {corr})")
        return self

    def to_config(self, seed: int) -> TwoEnvConfig:
        return TwoEnvConfig(seed=seed, **self.model_dump(exclude={"preset"}))


class GroupSection(_Section):
    n_train: int = Field(2000, ge=1)
    n_val: int = Field(400, ge=1)
    n_test: int = Field(2000, ge=1)
    majority_fraction: float = Field(0.9, ge=0.5, lt=1.0)
    val_majority_fraction: Optional[float] = Field(0.5, ge=0.5, lt=1.0)
    core_dim: int = Field(2, ge=1)
    spurious_dim: int = Field(2, ge=1)
    core_margin: float = Field(1.0, gt=0.0)
    spurious_margin: float = Field(2.0, gt=0.0)
    noise_scale: float = Field(1.0, gt=0.0)
    spurious_noise: float = Field(0.5, ge=0.0)

    def to_config(self, seed: int) -> GroupConfig:
        return GroupConfig(seed=seed, **self.model_dump())


class ToySection(_Section):
    n: int = Field(2000, ge=1)
    n_val: int = Field(500, ge=1)
    n_test: int = Field(2000, ge=1)
    corr: float = Field(0.95, ge=0.0, lt=1.0)
    test_corr: float = Field(0.5, ge=0.0, lt=1.0)


class DatasetSection(_Section):
    kind: Literal["two_env", "group", "toy_2d"] = "two_env"
    two_env: TwoEnvSection = Field(default_factory=TwoEnvSection)
    group: GroupSection = Field(default_factory=GroupSection)
    toy_2d: ToySection = Field(default_factory=ToySection)

    def build(self, seed: int) -> SplitBundle:
        """Génère les trois splits de la section active."""
        if self.kind == "two_env":
            return gen_two_env(self.two_env.to_config(seed))
        if self.kind == "group":
            return gen_group(self.group.to_config(seed))
        toy = self.toy_2d
        return SplitBundle(
            train=gen_toy_2d(toy.n, toy.corr, seed),
            val=gen_toy_2d(toy.n_val, toy.corr, seed + 1),
            test=gen_toy_2d(toy.n_test, toy.test_corr, seed + 2),
            core_dim=1, spurious_dim=1,
            metadata={"kind": "toy_2d", "config": toy.model_dump(), "seed": seed})


class ModelSection(_Section):
    kind: ModelKind = ModelKind.MLP
    hidden_dims: List[int] = Field(default_factory=lambda: [16])
    activation: Activation = Activation.RELU
    loss: LossFamily = LossFamily.LOGISTIC_BCE

    @model_validator(mode="after")
    def _check_layers(self):
        if self.kind != ModelKind.MLP and self.hidden_dims:
            self.hidden_dims = []
        if self.kind == ModelKind.MLP and (not self.hidden_dims or min(self.hidden_dims) < 1):
            raise ValueError("Un MLP demande des couches cachees de taille >= 1")
        return self

    def to_spec(self, input_dim: int) -> ModelSpec:
        return ModelSpec(kind=self.kind, input_dim=input_dim, hidden_dims=tuple(self.hidden_dims),
                         activation=self.activation)


class InnerSection(_Section):
    steps: int = Field(100, ge=1)
    learning_rate: float = Field(0.1, gt=0.0)
    weight_decay: float = Field(0.1, ge=0.0)
    optimizer: InnerOptimizer = InnerOptimizer.GD
    batch_size: Optional[int] = Field(None, ge=1)

    def to_config(self, init_seed: int) -> InnerConfig:
        return InnerConfig(init_seed=init_seed, **self.model_dump())


class RiskSection(_Section):
    kind: RiskKind = RiskKind.IRMV1
    lam: float = Field(1.0, ge=0.0)
    alpha: float = Field(0.2, gt=0.0, le=1.0)

    def to_spec(self) -> RiskSpec:
        return RiskSpec(kind=self.kind, lam=self.lam, alpha=self.alpha)


class OuterSection(_Section):
    iterations: int = Field(100, ge=0)
    lr_w: float = Field(0.25, gt=0.0)
    lr_s: float = Field(5e-2, gt=0.0)
    risk: RiskSection = Field(default_factory=RiskSection)
    temperature: float = Field(1.0, gt=0.0)
    sparsity_enabled: bool = True
    K: Optional[float] = Field(None, gt=0.0)
    keep_fraction: float = Field(0.8, gt=0.0, le=1.0)
    normalize_weights: bool = False

    def to_config(self, seed: int) -> OuterConfig:
        return OuterConfig(iterations=self.iterations, lr_w=self.lr_w, lr_s=self.lr_s,
                           risk=self.risk.to_spec(), temperature=self.temperature,
                           sparsity_enabled=self.sparsity_enabled, seed=seed,
                           normalize_weights=self.normalize_weights)

    def budget(self, n_train: int) -> float:
        """K explicite, sinon keep_fraction·n (borné à n)."""
        if not self.sparsity_enabled:
            return float(n_train)
        K = self.K if self.K is not None else self.keep_fraction * n_train
        return float(min(K, n_train))


class RunConfig(_Section):
    seed: int
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    inner: InnerSection = Field(default_factory=InnerSection)
    outer: OuterSection = Field(default_factory=OuterSection)
    baselines: List[BaselineName] = Field(default_factory=lambda: ["ERM"])
    output_dir: str = "runs/default"
    hide_train_groups: bool = True
    eval_model: Optional[ModelSection] = None

    @model_validator(mode="after")
    def _check_risk_annotations(self):
        if self.dataset.kind != "two_env" and self.outer.risk.kind in (RiskKind.IRMV1, RiskKind.REX) \
                and self.outer.iterations > 0:
            raise ValueError(f"Le risque {self.outer.risk.kind.value} demande des environnements "
                             f"(jeu '{self.dataset.kind}' sans env_ids)")
        for name in ("IRMv1-direct", "REx-direct"):
            if self.dataset.kind != "two_env" and name in self.baselines:
                raise ValueError(f"La baseline {name} demande des environnements "
                                 f"(jeu '{self.dataset.kind}' sans env_ids)")
        return self


def config_hash(cfg: BaseModel) -> str:
    """12 premiers caractères hexadécimaux du SHA-256 du JSON canonique."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def read_yaml(path) -> dict:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: le fichier de configuration doit contenir un dictionnaire YAML")
    return data


def load_config(path) -> RunConfig:
    """Lit et valide un RunConfig ; lève pydantic.ValidationError avec la localisation des champs."""
    return RunConfig.model_validate(read_yaml(path))


def resolve_output_dir(cfg: RunConfig) -> Path:
    """output_dir relatif résolu sous REWEIGH_OUTPUT_ROOT quand la variable est définie."""
    path = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV_VAR)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def derive_run_seeds(seed: int) -> dict:
    """Graines des sous-tâches d'un run (données, initialisation des baselines, boucle externe)."""
    states = np.random.SeedSequence([seed, 31]).generate_state(2)
    return {"data": seed, "init": int(states[0]), "outer": int(states[1])}
