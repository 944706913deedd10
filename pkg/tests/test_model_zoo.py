import numpy as np
import pytest

from backend.models.model_zoo import (
    Activation,
    Batch,
    DimensionError,
    InvalidLabelError,
    LossFamily,
    ModelKind,
    ModelSpec,
    forward,
    init_params,
    loss_derivatives,
    per_sample_loss_grads,
    per_sample_output_grads,
    predict_labels,
)
from tests.helpers import finite_difference, relative_error

SPECS = [
    ModelSpec(ModelKind.LINEAR, input_dim=3),
    ModelSpec(ModelKind.LOGISTIC, input_dim=3),
    ModelSpec(ModelKind.MLP, input_dim=3, hidden_dims=(4,), activation=Activation.TANH),
    ModelSpec(ModelKind.MLP, input_dim=3, hidden_dims=(5, 3), activation=Activation.TANH),
    ModelSpec(ModelKind.MLP, input_dim=3, hidden_dims=(4,), activation=Activation.RELU),
]


def test_linear_forward_examples():
    spec = ModelSpec(ModelKind.LINEAR, input_dim=2)
    batch = Batch([[3.0, 5.0]], [0.0])
    assert forward(spec, np.array([1.0, 0.0]), batch)[0] == 3.0
    assert forward(spec, np.zeros(2), batch)[0] == 0.0


def test_mlp_forward_matches_hand_evaluation():
    spec = ModelSpec(ModelKind.MLP, input_dim=2, hidden_dims=(2,), activation=Activation.RELU)
    # W1 ligne par ligne, b1, v, c
    params = np.array([0.5, -1.0, 1.0, 1.0, 0.1, -0.5, 2.0, -1.0, 0.3])
    f = forward(spec, params, Batch([[1.0, 1.0]], [0.0]))
    # couche cachée : relu(-0.4, 1.5) = (0, 1.5) ; sortie 1.5 * -1 + 0.3
    assert f[0] == pytest.approx(-1.2)


def test_parameter_counts():
    assert ModelSpec(ModelKind.LINEAR, input_dim=7).n_params == 7
    assert ModelSpec(ModelKind.MLP, input_dim=3, hidden_dims=(4,)).n_params == 3 * 4 + 4 + 4 + 1
    assert ModelSpec(ModelKind.MLP, input_dim=3, hidden_dims=(5, 2)).n_params == 15 + 5 + 10 + 2 + 2 + 1


def test_invalid_specs():
    with pytest.raises(ValueError):
        ModelSpec(ModelKind.LINEAR, input_dim=2, hidden_dims=(3,))
    with pytest.raises(ValueError):
        ModelSpec(ModelKind.MLP, input_dim=2)
    with pytest.raises(ValueError):
        ModelSpec(ModelKind.LINEAR, input_dim=0)


def test_dimension_errors():
    spec = ModelSpec(ModelKind.LINEAR, input_dim=2)
    with pytest.raises(DimensionError):
        forward(spec, np.zeros(3), Batch([[1.0, 2.0]], [0.0]))
    with pytest.raises(DimensionError):
        forward(spec, np.zeros(2), Batch([[1.0, 2.0, 3.0]], [0.0]))
    with pytest.raises(DimensionError):
        Batch(np.zeros((3, 2)), np.zeros(2))


def test_init_params():
    assert np.all(init_params(ModelSpec(ModelKind.LOGISTIC, input_dim=4), seed=3) == 0.0)
    spec = ModelSpec(ModelKind.MLP, input_dim=4, hidden_dims=(8,))
    first, second = init_params(spec, seed=3), init_params(spec, seed=3)
    assert np.array_equal(first, second)
    assert not np.array_equal(first, init_params(spec, seed=4))
    assert np.max(np.abs(first[:32])) <= 1.0 / np.sqrt(4)


@pytest.mark.parametrize("family, f, y, expected", [
    (LossFamily.SQUARE, 1.3, 1.3, (0.0, 0.0, 2.0)),
    (LossFamily.SQUARE, 0.5, 1.0, (0.25, -1.0, 2.0)),
    (LossFamily.LOGISTIC_BCE, 0.0, 1.0, (np.log(2.0), -0.5, 0.25)),
])
def test_loss_derivatives_examples(family, f, y, expected):
    assert np.allclose(loss_derivatives(family, f, y), expected)


def test_bce_rejects_non_binary_labels():
    with pytest.raises(InvalidLabelError):
        loss_derivatives(LossFamily.LOGISTIC_BCE, np.zeros(2), np.array([0.0, 0.5]))


def test_bce_is_stable_for_large_logits():
    loss, d1, d2 = loss_derivatives(LossFamily.LOGISTIC_BCE, np.array([800.0, -800.0]), np.array([0.0, 0.0]))
    assert np.all(np.isfinite(loss)) and loss[0] == pytest.approx(800.0)
    assert np.all(d2 >= 0.0)


def test_per_sample_loss_grad_examples():
    spec = ModelSpec(ModelKind.LINEAR, input_dim=2)
    losses, grads = per_sample_loss_grads(spec, np.zeros(2), Batch([[1.0, 0.0]], [0.0]), LossFamily.SQUARE)
    assert losses[0] == 0.0 and np.all(grads == 0.0)
    losses, grads = per_sample_loss_grads(spec, np.zeros(2), Batch([[1.0, 0.0]], [1.0]), LossFamily.SQUARE)
    assert losses[0] == 1.0
    assert np.allclose(grads[0], [-2.0, 0.0])


def test_output_grads_of_linear_models_are_inputs():
    batch = Batch([[3.0, 5.0]], [1.0])
    for kind in (ModelKind.LINEAR, ModelKind.LOGISTIC):
        spec = ModelSpec(kind, input_dim=2)
        assert np.array_equal(per_sample_output_grads(spec, np.array([0.2, -0.1]), batch)[0], [3.0, 5.0])


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind.value}-{s.hidden_dims}-{s.activation.value}")
@pytest.mark.parametrize("family", [LossFamily.SQUARE, LossFamily.LOGISTIC_BCE])
def test_gradients_match_finite_differences(spec, family):
    rng = np.random.default_rng(7)
    scale = 2.0 if spec.activation == Activation.RELU and spec.kind == ModelKind.MLP else 10.0
    for _ in range(5):
        batch = Batch(rng.uniform(-scale, scale, size=(6, spec.input_dim)), rng.integers(0, 2, size=6))
        params = rng.uniform(-1.0, 1.0, size=spec.n_params)

        jac = per_sample_output_grads(spec, params, batch)
        _, grads = per_sample_loss_grads(spec, params, batch, family)
        for i in range(batch.n):
            single = batch.take([i])
            fd_output = finite_difference(lambda p: forward(spec, p, single)[0], params)
            fd_loss = finite_difference(
                lambda p: per_sample_loss_grads(spec, p, single, family)[0][0], params)
            assert relative_error(jac[i], fd_output) <= 1e-6
            assert relative_error(grads[i], fd_loss) <= 1e-6


def test_forward_is_deterministic():
    spec = SPECS[3]
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(4, 3)), np.zeros(4))
    params = init_params(spec, seed=1)
    assert np.array_equal(forward(spec, params, batch), forward(spec, params, batch))


def test_predict_labels_thresholds():
    spec = ModelSpec(ModelKind.LINEAR, input_dim=1)
    batch = Batch([[-1.0], [0.2], [0.7]], [0.0, 0.0, 1.0])
    assert np.array_equal(predict_labels(spec, np.array([1.0]), batch, LossFamily.LOGISTIC_BCE), [0.0, 1.0, 1.0])
    assert np.array_equal(predict_labels(spec, np.array([1.0]), batch, LossFamily.SQUARE), [0.0, 0.0, 1.0])


def test_non_finite_params_are_rejected():
    spec = ModelSpec(ModelKind.LINEAR, input_dim=2)
    batch = Batch([[1.0, 2.0]], [0.0])
    with pytest.raises(ValueError):
        forward(spec, np.array([np.nan, 0.0]), batch)
    with pytest.raises(ValueError):
        forward(spec, np.array([np.inf, 0.0]), batch)
