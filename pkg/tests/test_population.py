import numpy as np
import pytest

from backend.data.synthetic import MixingMatrix, make_mixing
from backend.oracle.population import (
    AssumptionViolation,
    DiscreteJoint,
    WeightTable,
    closed_form_weight,
    conditional_entropy,
    independence_gap,
    load_joint,
    optimal_debiased_predictor,
    population_risk,
    population_wls,
    random_joint,
    sample_joint,
    save_joint,
    weighted_moments,
)
from backend.reweighting.inner_trainer import SingularSystemError, solve_weighted_least_squares


def binary_joint(core_agreement=0.75, spurious_agreement=0.85, y_values=(-1.0, 1.0)):
    """y uniforme sur ±1 ; z_c et z_s recopient y avec les probabilités données."""
    p = np.zeros((2, 2, 2))
    for y, c, s in np.ndindex(2, 2, 2):
        pc = core_agreement if c == y else 1.0 - core_agreement
        ps = spurious_agreement if s == y else 1.0 - spurious_agreement
        p[y, c, s] = 0.5 * pc * ps
    return DiscreteJoint(p=p, y_values=y_values, zc_values=[-1.0, 1.0], zs_values=[-1.0, 1.0])


def test_joint_validation():
    with pytest.raises(ValueError):
        DiscreteJoint(p=np.full((2, 2, 2), 0.2), y_values=[0, 1], zc_values=[0, 1], zs_values=[0, 1])
    with pytest.raises(ValueError):
        DiscreteJoint(p=np.full((2, 2, 2), 0.125), y_values=[0, 1, 2], zc_values=[0, 1], zs_values=[0, 1])
    joint = binary_joint(core_agreement=1.0)
    assert not joint.strictly_positive
    assert joint.dim == 2 and joint.shape == (2, 2, 2)


def test_factorized_joint_needs_no_reweighting():
    rng = np.random.default_rng(0)
    p_core = rng.dirichlet(np.ones(6)).reshape(2, 3)
    p_spurious = rng.dirichlet(np.ones(3))
    joint = DiscreteJoint(p=p_core[:, :, None] * p_spurious[None, None, :], y_values=[-1.0, 1.0],
                          zc_values=rng.normal(size=3), zs_values=rng.normal(size=3))
    assert np.max(np.abs(closed_form_weight(joint).w - 1.0)) <= 1e-12


def test_closed_form_weight_on_binary_example():
    joint = binary_joint()
    weight = closed_form_weight(joint)
    assert independence_gap(joint, weight) <= 1e-14
    assert independence_gap(joint) > 1e-2
    assert abs(weight.mean_under(joint) - 1.0) <= 1e-12


def test_closed_form_weight_on_random_joints():
    rng = np.random.default_rng(1)
    for _ in range(100):
        joint = random_joint(rng, n_zc=int(rng.integers(2, 4)), n_zs=int(rng.integers(2, 4)))
        weight = closed_form_weight(joint)
        assert abs(weight.mean_under(joint) - 1.0) <= 1e-12
        moments, base = weighted_moments(joint, weight), weighted_moments(joint)
        assert np.max(np.abs(moments.joint_core - base.joint_core)) <= 1e-12
        assert np.max(np.abs(moments.marginal_spurious - base.marginal_spurious)) <= 1e-12
        assert np.max(np.abs(moments.cov_core_spurious)) <= 1e-12
        spurious_cross = moments.z_cross[joint.d_c:]
        assert np.max(np.abs(spurious_cross - moments.mean_spurious * moments.mean_y)) <= 1e-12


def test_zero_cell_violates_positivity():
    with pytest.raises(AssumptionViolation):
        closed_form_weight(binary_joint(core_agreement=1.0))


def test_factorized_joint_has_no_cross_covariance():
    joint = binary_joint(spurious_agreement=0.5)
    assert np.max(np.abs(weighted_moments(joint).cov_core_spurious)) <= 1e-15


def test_weighted_moments_follow_mixing():
    joint = binary_joint()
    mixing = make_mixing(2, seed=3)
    plain, mixed = weighted_moments(joint), weighted_moments(joint, mixing=mixing)
    assert np.allclose(mixed.second_moment, mixing.S @ plain.second_moment @ mixing.S.T, atol=1e-12)
    assert np.allclose(mixed.cross, mixing.S @ plain.cross, atol=1e-12)
    assert np.array_equal(mixed.z_second_moment, plain.z_second_moment)


def test_identifiability_on_random_joints():
    rng = np.random.default_rng(2)
    for _ in range(100):
        joint = random_joint(rng, n_zc=int(rng.integers(2, 4)), n_zs=int(rng.integers(2, 4)))
        mixing = make_mixing(joint.dim, int(rng.integers(0, 2 ** 31)))
        solution = population_wls(joint, closed_form_weight(joint), mixing)
        debiased = optimal_debiased_predictor(joint, mixing)
        assert np.max(np.abs(solution.beta_spurious)) <= 1e-8
        assert np.max(np.abs(solution.theta - debiased.theta_bar)) <= 1e-8
        assert np.allclose(solution.beta_core, debiased.theta_bar_c, atol=1e-8)


def test_unweighted_fit_uses_the_spurious_feature():
    solution = population_wls(binary_joint())
    assert abs(solution.beta_spurious[0]) > 1e-3
    reweighted = population_wls(binary_joint(), closed_form_weight(binary_joint()))
    assert abs(reweighted.beta_spurious[0]) <= 1e-10


def test_deterministic_core():
    joint = binary_joint(core_agreement=1.0, spurious_agreement=0.8)
    solution = population_wls(joint, WeightTable.uniform(joint))
    assert solution.beta_core[0] == pytest.approx(1.0, abs=1e-12)
    assert solution.beta_spurious[0] == pytest.approx(0.0, abs=1e-12)
    assert optimal_debiased_predictor(joint).theta_bar_c[0] == pytest.approx(1.0, abs=1e-12)
    assert conditional_entropy(joint, ("z_c",)) == pytest.approx(0.0, abs=1e-15)


def test_intercept_flag():
    joint = binary_joint(core_agreement=1.0, spurious_agreement=0.8, y_values=(2.0, 4.0))
    solution = population_wls(joint, intercept=True)
    assert solution.beta_core[0] == pytest.approx(1.0, abs=1e-10)
    assert solution.intercept == pytest.approx(3.0, abs=1e-10)
    debiased = optimal_debiased_predictor(joint, intercept=True)
    assert debiased.intercept == pytest.approx(3.0, abs=1e-10)


def test_debiased_predictor_has_literal_zeros_without_mixing():
    joint = random_joint(np.random.default_rng(4), n_zc=3, n_zs=3, d_c=1, d_s=2)
    predictor = optimal_debiased_predictor(joint, MixingMatrix.identity(joint.dim))
    assert np.all(predictor.theta_bar[joint.d_c:] == 0.0)


def test_singular_second_moment():
    joint = DiscreteJoint(p=np.full((2, 2, 2), 0.125), y_values=[-1.0, 1.0],
                          zc_values=[0.0, 0.0], zs_values=[-1.0, 1.0])
    with pytest.raises(SingularSystemError):
        population_wls(joint)


def test_entropy_identities_under_closed_form_weight():
    rng = np.random.default_rng(5)
    for _ in range(50):
        joint = random_joint(rng, n_zc=int(rng.integers(2, 4)), n_zs=int(rng.integers(2, 4)))
        weight = closed_form_weight(joint)
        h_core = conditional_entropy(joint, ("z_c",), weight)
        assert abs(conditional_entropy(joint, ("z_c", "z_s"), weight) - h_core) <= 1e-12
        assert abs(h_core - conditional_entropy(joint, ("z_c",))) <= 1e-12


def test_entropy_of_independent_uniform_label():
    rng = np.random.default_rng(6)
    p_latent = rng.dirichlet(np.ones(6)).reshape(2, 3)
    joint = DiscreteJoint(p=0.5 * np.stack([p_latent, p_latent]), y_values=[-1.0, 1.0],
                          zc_values=[0.0, 1.0], zs_values=[0.0, 1.0, 2.0])
    for conditioning in ((), ("z_c",), ("z_s",), ("z_c", "z_s")):
        assert conditional_entropy(joint, conditioning) == pytest.approx(np.log(2.0), abs=1e-12)
    with pytest.raises(ValueError):
        conditional_entropy(joint, ("x",))


def test_population_risk_is_minimal_at_debiased_predictor():
    rng = np.random.default_rng(7)
    joint = random_joint(rng, n_zc=3, n_zs=2)
    mixing = make_mixing(joint.dim, seed=11)
    weight = closed_form_weight(joint)
    theta_bar = optimal_debiased_predictor(joint, mixing).theta_bar
    best = population_risk(joint, mixing, theta_bar, weight)
    for _ in range(20):
        assert best <= population_risk(joint, mixing, theta_bar + 0.1 * rng.normal(size=joint.dim), weight)


def test_finite_sample_bridge():
    joint = binary_joint()
    mixing = make_mixing(2, seed=5)
    X, y, w = sample_joint(joint, 100_000, np.random.default_rng(8), mixing, closed_form_weight(joint))
    theta = solve_weighted_least_squares(X, y, w)
    beta = mixing.S.T @ theta
    assert abs(beta[1]) <= 0.05
    assert abs(beta[0] - optimal_debiased_predictor(joint).theta_bar_c[0]) <= 0.05
    with pytest.raises(ValueError):
        sample_joint(joint, 0, np.random.default_rng(0))


def test_joint_file_round_trip(tmp_path):
    joint = random_joint(np.random.default_rng(9), n_zc=3, n_zs=2, d_c=2, d_s=1)
    loaded = load_joint(save_joint(joint, tmp_path / "joint.txt"))
    assert np.array_equal(loaded.p, joint.p)
    assert np.array_equal(loaded.y_values, joint.y_values)
    assert np.array_equal(loaded.zc_values, joint.zc_values)
    assert np.array_equal(loaded.zs_values, joint.zs_values)


def test_joint_file_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("[values.w]\n1.0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_joint(path)
