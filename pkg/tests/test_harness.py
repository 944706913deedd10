import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from backend.data.dataset_io import save_dataset
from backend.harness.baselines import Baseline, inverse_group_weights, minimize_risk, run_baseline
from backend.harness.config import (
    DatasetSection,
    RunConfig,
    TwoEnvSection,
    config_hash,
    derive_run_seeds,
    resolve_output_dir,
)
from backend.harness.experiment import eval_weighted_erm, execute, read_weights
from backend.harness.metrics import MetricsRecord, evaluate, weight_histograms
from backend.harness.sweep import fit_loglog_slope, sweep_generalization_gap
from backend.models.model_zoo import Batch, LossFamily, ModelKind, ModelSpec
from backend.reweighting.inner_trainer import InnerConfig, train_weighted_erm
from backend.reweighting.risks import AnnotatedDataset, RiskKind, RiskSpec


def small_config(**overrides) -> dict:
    config = {
        "seed": 0,
        "output_dir": "runs/test",
        "dataset": {"kind": "two_env", "two_env": {"n_train_per_env": 40, "n_val": 20, "n_test": 40}},
        "model": {"kind": "Linear", "loss": "LogisticBCE"},
        "inner": {"steps": 20, "learning_rate": 0.1},
        "outer": {"iterations": 0},
        "baselines": ["ERM"],
    }
    config.update(overrides)
    return config


def test_config_defaults_and_presets():
    cfg = RunConfig.model_validate({"seed": 3})
    assert cfg.outer.lr_w == 0.25 and cfg.outer.lr_s == 0.05 and cfg.outer.iterations == 100
    assert cfg.outer.risk.alpha == 0.2
    assert cfg.baselines == ["ERM"]
    section = TwoEnvSection(preset="colored_object")
    assert section.train_corrs == (0.999, 0.7) and section.test_corr == 0.1
    assert RunConfig.model_validate(small_config(model={"kind": "Linear", "hidden_dims": [8]})).model.hidden_dims == []


@pytest.mark.parametrize("payload", [
    {},
    small_config(unknown_field=1),
    small_config(outer={"iterations": 5, "risk": {"kind": "IRMv1"}},
                 dataset={"kind": "group", "group": {"n_train": 100}}),
    small_config(baselines=["IRMv1-direct"], dataset={"kind": "toy_2d"}),
    small_config(baselines=["REx-direct"], dataset={"kind": "group", "group": {"n_train": 100}}),
    small_config(baselines=["NotABaseline"]),
    small_config(outer={"lr_w": -1.0}),
    small_config(dataset={"kind": "two_env", "two_env": {"train_corrs": [0.9, 1.5]}}),
])
def test_invalid_configs(payload):
    with pytest.raises(ValidationError):
        RunConfig.model_validate(payload)


def test_group_dataset_accepts_group_risks():
    cfg = RunConfig.model_validate(small_config(outer={"iterations": 5, "risk": {"kind": "CVaR"}},
                                                dataset={"kind": "group"}))
    assert cfg.outer.risk.kind.value == "CVaR"


def test_config_hash_and_seeds():
    first = RunConfig.model_validate(small_config())
    assert len(config_hash(first)) == 12
    assert config_hash(first) == config_hash(RunConfig.model_validate(small_config()))
    assert config_hash(first) != config_hash(RunConfig.model_validate(small_config(seed=1)))
    seeds = derive_run_seeds(7)
    assert seeds == derive_run_seeds(7)
    assert seeds["data"] == 7 and seeds["init"] != seeds["outer"]


def test_output_root_override(output_root):
    cfg = RunConfig.model_validate(small_config())
    assert resolve_output_dir(cfg) == output_root / "runs" / "test"


def test_inverse_group_weights_average_one():
    weights = inverse_group_weights([0, 0, 0, 1])
    assert np.allclose(weights, [2 / 3, 2 / 3, 2 / 3, 2.0])
    assert weights.mean() == pytest.approx(1.0)


def test_metrics_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord("ERM", average_accuracy=0.5, worst_group_accuracy=0.7)
    with pytest.raises(ValueError):
        MetricsRecord("ERM", average_accuracy=1.5, worst_group_accuracy=0.7)
    record = MetricsRecord("ERM", 0.8, 0.6, group_accuracy={0: 0.9, 1: 0.6}, wall_clock=2.5)
    assert "wall_clock" not in record.to_row("abc", 0)
    assert json.loads(record.to_json("abc", 0))["wall_clock"] == 2.5
    assert record.to_row("abc", 0)["group_1_accuracy"] == 0.6


def test_evaluate_reports_worst_group():
    model = ModelSpec(ModelKind.LINEAR, input_dim=1)
    data = AnnotatedDataset(Batch([[1.0], [2.0], [-1.0], [-3.0]], [1.0, 0.0, 0.0, 0.0]),
                            group_ids=[0, 0, 1, 1], env_ids=[0, 1, 0, 1])
    record = evaluate("ERM", model, np.array([1.0]), data, LossFamily.LOGISTIC_BCE)
    assert record.average_accuracy == 0.75
    assert record.group_accuracy == {0: 0.5, 1: 1.0}
    assert record.worst_group_accuracy == 0.5
    assert record.env_accuracy == {0: 1.0, 1: 0.5}
    unannotated = evaluate("ERM", model, np.array([1.0]), AnnotatedDataset(data.batch), LossFamily.LOGISTIC_BCE)
    assert unannotated.worst_group_accuracy == unannotated.average_accuracy


def test_weight_histograms():
    frame = weight_histograms([0.0, 1.0, 2.0, 3.0], groups=[0, 0, 1, 1], bins=2)
    assert list(frame.columns) == ["group", "bin_left", "bin_right", "count"]
    assert frame["count"].tolist() == [2, 0, 0, 2]
    assert weight_histograms(np.ones(5), bins=3)["group"].unique().tolist() == [-1]


@pytest.mark.parametrize("name", [b.value for b in Baseline])
def test_every_baseline_runs(name):
    cfg = RunConfig.model_validate(small_config())
    bundle = cfg.dataset.build(0)
    model = cfg.model.to_spec(bundle.train.batch.dim)
    record = run_baseline(name, bundle, model, cfg.model.loss, InnerConfig(steps=10))
    assert record.method == name
    assert 0.0 <= record.worst_group_accuracy <= record.average_accuracy <= 1.0


def test_cvar_baseline_at_full_level_is_erm():
    cfg = RunConfig.model_validate(small_config())
    bundle = cfg.dataset.build(0)
    model = cfg.model.to_spec(bundle.train.batch.dim)
    inner = InnerConfig(steps=15, learning_rate=0.1, weight_decay=0.01)
    cvar = minimize_risk(RiskSpec(RiskKind.CVAR, alpha=1.0), bundle.train, model, cfg.model.loss, inner)
    erm = train_weighted_erm(bundle.train, np.ones(bundle.train.n), model, cfg.model.loss, inner).theta_T
    assert np.allclose(cvar, erm)


def test_direct_baselines_on_group_shift():
    cfg = RunConfig.model_validate(small_config(
        dataset={"kind": "group", "group": {"n_train": 120, "n_val": 40, "n_test": 80}},
        outer={"iterations": 0, "risk": {"kind": "CVaR", "alpha": 0.3}},
        baselines=["ERM", "CVaR-direct", "GroupDRO-direct"]))
    assert [r.method for r in execute(cfg, write=False).records] == ["ERM", "CVaR-direct", "GroupDRO-direct"]


def test_baselines_only_run(output_root):
    cfg = RunConfig.model_validate(small_config())
    result = execute(cfg)
    out = output_root / "runs" / "test"
    metrics = pd.read_csv(out / "metrics.csv", dtype={"config_hash": str})
    assert metrics["method"].tolist() == ["ERM"]
    assert metrics["config_hash"].tolist() == [config_hash(cfg)]
    assert not (out / "history.csv").exists()
    assert not (out / "weights.jsonl").exists()
    assert (out / "data" / "train.csv").exists()
    assert result.state is None
    metadata = json.loads((out / "metadata.json").read_text(encoding="utf-8"))
    assert metadata["methods"] == ["ERM"] and metadata["seed"] == 0


def test_full_run_writes_artifacts(output_root):
    cfg = RunConfig.model_validate(small_config(
        outer={"iterations": 3, "risk": {"kind": "IRMv1", "lam": 1.0}, "keep_fraction": 0.75},
        eval_model={"kind": "MLP", "hidden_dims": [4], "loss": "LogisticBCE"}))
    result = execute(cfg)
    out = result.output_dir
    methods = pd.read_csv(out / "metrics.csv")["method"].tolist()
    assert methods == ["ERM", "MAPLE-IRMv1", "MAPLE-IRMv1@transfer"]

    history = pd.read_csv(out / "history.csv")
    assert len(history) == 3
    assert {"val_risk", "s_saturation", "group_0_fraction", "config_hash", "seed"} <= set(history.columns)
    assert "inner_seconds" not in history.columns
    timings = pd.read_csv(out / "timings.csv")
    assert timings.columns.tolist() == ["outer_iter", "kept", "inner_seconds"]
    assert len(timings) == 3 and (timings["inner_seconds"] >= 0).all()

    weights = read_weights(out / "weights.jsonl")
    assert weights["sample_index"].tolist() == list(range(80))
    assert (weights["w"] >= 0).all() and weights["s"].between(0, 1).all()
    assert weights["s"].sum() <= 60 + 1e-9
    assert set(weights["m"].unique()) <= {0, 1}
    assert (out / "weight_histograms.csv").exists()


def test_reruns_are_byte_identical(tmp_path, monkeypatch):
    payload = small_config(outer={"iterations": 2, "risk": {"kind": "REx", "lam": 2.0}})
    roots = [tmp_path / "first", tmp_path / "second"]
    for root in roots:
        monkeypatch.setenv("REWEIGH_OUTPUT_ROOT", str(root))
        execute(RunConfig.model_validate(payload))
    for name in ("metrics.csv", "history.csv", "weights.jsonl", "weight_histograms.csv", "metadata.json",
                 "data/train.csv"):
        first = (roots[0] / "runs" / "test" / name).read_bytes()
        assert first == (roots[1] / "runs" / "test" / name).read_bytes()


def test_eval_with_unit_weights_matches_erm(output_root):
    cfg = RunConfig.model_validate(small_config())
    erm = execute(cfg).records[0]
    out = output_root / "runs" / "test"
    weights_file = out / "unit_weights.jsonl"
    pd.DataFrame({"sample_index": np.arange(80), "w": 1.0, "m": 1}).to_json(
        weights_file, orient="records", lines=True)

    model_config = {"model": small_config()["model"], "inner": small_config()["inner"]}
    record = eval_weighted_erm(out / "data", weights_file, model_config)
    assert record.method == "WeightedERM"
    assert record.average_accuracy == erm.average_accuracy
    assert record.worst_group_accuracy == erm.worst_group_accuracy

    pd.DataFrame({"sample_index": np.arange(79), "w": 1.0}).to_json(weights_file, orient="records", lines=True)
    with pytest.raises(ValueError):
        eval_weighted_erm(out / "data", weights_file, model_config)


def test_zero_weight_group_is_left_untrained(tmp_path):
    bundle = DatasetSection.model_validate(
        {"kind": "group", "group": {"n_train": 400, "n_val": 40, "n_test": 400}}).build(3)
    save_dataset(bundle, tmp_path / "data")
    weights = np.where(bundle.train.group_ids == 2, 0.0, 1.0)
    weights_file = tmp_path / "weights.jsonl"
    pd.DataFrame({"sample_index": np.arange(400), "w": weights}).to_json(weights_file, orient="records", lines=True)

    model_config = {"model": {"kind": "Linear", "loss": "LogisticBCE"},
                    "inner": {"steps": 200, "learning_rate": 0.1, "weight_decay": 0.01}}
    record = eval_weighted_erm(tmp_path / "data", weights_file, model_config)
    # sans poids, le groupe étiquette 1 / attribut 0 suit l'attribut : pas mieux que le hasard
    assert record.group_accuracy[2] <= 0.6
    assert record.group_accuracy[0] >= 0.9 and record.group_accuracy[3] >= 0.9


def test_loglog_slope():
    assert fit_loglog_slope([100, 400], [0.1, 0.05]) == pytest.approx(-0.5)
    assert np.isnan(fit_loglog_slope([100], [0.1]))


def test_single_seed_sweep_is_flagged():
    cfg = RunConfig.model_validate(small_config(
        dataset={"kind": "toy_2d", "toy_2d": {"n": 40, "n_val": 10, "n_test": 10}},
        outer={"iterations": 2, "risk": {"kind": "CVaR", "alpha": 0.5}}))
    result = sweep_generalization_gap(cfg, n_vals=(10, 20), repeats=1, max_workers=2)
    assert result.table["n_val"].tolist() == [10, 20]
    assert result.table["single_seed"].all()
    assert (result.table["repeats"] == 1).all()
    assert (result.table["std_gap"] == 0).all()
    assert len(result.gaps) == 2


def test_dataset_section_builds_every_kind():
    for payload in ({"kind": "two_env", "two_env": {"n_train_per_env": 10, "n_val": 4, "n_test": 6}},
                    {"kind": "group", "group": {"n_train": 40, "n_val": 20, "n_test": 20}},
                    {"kind": "toy_2d", "toy_2d": {"n": 10, "n_val": 5, "n_test": 5}}):
        bundle = DatasetSection.model_validate(payload).build(1)
        assert bundle.train.group_ids is not None
        assert bundle.metadata["seed"] == 1
