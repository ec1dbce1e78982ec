import math

import numpy as np
import pytest

from screwfit.factors import (
    FLOW_THETA,
    XI,
    AffordanceFactor,
    ArticulationFactor,
    DegenerateForce,
    ForceMeasurement,
    ForcePlaneFactor,
    KinematicFactor,
    NoiseModel,
    PriorFactor,
    affordance_residual,
    articulation_residual,
    force_plane_residual,
    kinematic_residual,
    linearize,
    pose_a_var,
    pose_b_var,
    prior_residual,
    rotate_into_plane,
    theta_var,
)
from screwfit.screw import ArticulationState, Twist, point_velocity
from screwfit.se3 import Pose, exp_se3, rotation_angle, se3_log

from conftest import jacobian_relative_error, random_pose, random_twist


def state(xi, theta):
    return ArticulationState(Twist.from_array(np.asarray(xi, dtype=float)), theta)


# ---------------------------------------------------------------------------
# Residual definitions
# ---------------------------------------------------------------------------


def test_prior_residual_examples(rng):
    s = state([0.2, 0, 0, 0, 0, 1], 0.4)
    np.testing.assert_array_equal(prior_residual(s, s), np.zeros(7))
    np.testing.assert_array_equal(
        prior_residual(state([1, 0, 0, 0, 0, 0], 0.0), state(np.zeros(6), 0.0)),
        [1, 0, 0, 0, 0, 0, 0],
    )
    a, b = rng.normal(size=7), rng.normal(size=7)
    np.testing.assert_allclose(
        prior_residual(state(a[:6], a[6]), state(b[:6], b[6])), a - b, atol=1e-15
    )


def test_affordance_residual_zero_for_consistent_flow(rng):
    for _ in range(30):
        xi = Twist.from_array(random_twist(rng))
        p = rng.normal(size=3)
        f = exp_se3(xi.array, FLOW_THETA).act(p) - p
        np.testing.assert_allclose(affordance_residual(xi, p, f), np.zeros(3), atol=1e-12)


def test_affordance_residual_prismatic():
    xi = Twist(np.array([1.0, 0, 0]), np.zeros(3))
    r = affordance_residual(xi, np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(r, [0.05, 0, 0], atol=1e-15)


def test_affordance_residual_revolute_frozen_value():
    # Quarter-percent arc of the unit circle: (cos(0.05) - 1, sin(0.05), 0).
    xi = Twist(np.zeros(3), np.array([0.0, 0.0, 1.0]))
    r = affordance_residual(xi, np.array([1.0, 0, 0]), np.zeros(3))
    np.testing.assert_allclose(
        r, [-0.0012497396050337, 0.0499791692706783, 0.0], atol=1e-15
    )


def test_rotate_into_plane_preserves_magnitude_and_lands_in_plane(rng):
    for _ in range(50):
        v = rng.normal(size=3)
        F = rng.normal(size=3)
        if np.linalg.norm(np.cross(v, F)) < 1e-6:
            continue
        out = rotate_into_plane(v, F)
        assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-12
        assert abs(out @ F) / np.linalg.norm(F) < 1e-12 * max(1, np.linalg.norm(v))


def test_force_plane_residual_already_orthogonal():
    xi = Twist(np.array([1.0, 0, 0]), np.zeros(3))
    m = ForceMeasurement(force=[0, 0, 1.0], point=[0, 0, 0])
    np.testing.assert_allclose(force_plane_residual(xi, m), np.zeros(3), atol=1e-15)


def test_force_plane_residual_projection_example():
    s = 1.0 / math.sqrt(2)
    xi = Twist(np.array([s, 0.0, s]), np.zeros(3))
    m = ForceMeasurement(force=[0, 0, 1.0], point=[0, 0, 0])
    np.testing.assert_allclose(
        force_plane_residual(xi, m), [s - 1.0, 0.0, s], atol=1e-12
    )


def test_force_plane_residual_antiparallel_fallback():
    # Pull-back against a sliding door: velocity anti-parallel to the force.
    xi = Twist(np.array([0.0, 0.0, -1.0]), np.zeros(3))
    m = ForceMeasurement(force=[0, 0, 1.0], point=[0, 0, 0])
    r = force_plane_residual(xi, m)
    target = np.array([0, 0, -1.0]) - r
    assert abs(target @ np.array([0, 0, 1.0])) < 1e-12
    assert abs(np.linalg.norm(target) - 1.0) < 1e-12


def test_force_plane_zero_iff_orthogonal(rng):
    m_base = np.array([0.3, -0.2, 0.1])
    for _ in range(50):
        xi = Twist.from_array(random_twist(rng))
        F = rng.normal(size=3)
        m = ForceMeasurement(force=F, point=m_base)
        v = point_velocity(xi, m_base)
        if np.linalg.norm(v) < 1e-6 or np.linalg.norm(F) < 1e-6:
            continue
        r = force_plane_residual(xi, m)
        orthogonal = abs(v @ F) < 1e-12 * np.linalg.norm(v) * np.linalg.norm(F)
        assert (np.linalg.norm(r) < 1e-9) == orthogonal
    # Construct exact orthogonality and check the forward direction.
    v = np.array([1.0, 2.0, 0.5])
    F = np.cross(v, [0.0, 0.0, 1.0])
    m = ForceMeasurement(force=F, point=np.zeros(3))
    np.testing.assert_allclose(
        force_plane_residual(Twist(v, np.zeros(3)), m), np.zeros(3), atol=1e-12
    )


def test_force_degenerate_raises():
    xi = Twist(np.array([1.0, 0, 0]), np.zeros(3))
    with pytest.raises(DegenerateForce):
        force_plane_residual(xi, ForceMeasurement(force=[0, 0, 1e-12], point=[0, 0, 0]))


def test_kinematic_residual_examples(rng):
    T = random_pose(rng)
    np.testing.assert_allclose(kinematic_residual(T, T), np.zeros(6), atol=1e-12)
    shifted = T @ Pose.from_translation([0.001, 0, 0])
    np.testing.assert_allclose(
        kinematic_residual(shifted, T), [0.001, 0, 0, 0, 0, 0], atol=1e-12
    )
    A, B = random_pose(rng), random_pose(rng)
    np.testing.assert_allclose(
        kinematic_residual(A, B), se3_log(B.inverse() @ A), atol=1e-12
    )


def test_articulation_residual_examples(rng):
    xi = Twist.from_array(random_twist(rng, scale=0.5))
    theta = 0.7
    T_B = Pose.identity()
    T_A = exp_se3(xi.array, theta)
    np.testing.assert_allclose(
        articulation_residual(xi, theta, T_A, T_B), np.zeros(6), atol=1e-12
    )
    T = random_pose(rng)
    np.testing.assert_allclose(
        articulation_residual(xi, 0.0, T, T), np.zeros(6), atol=1e-12
    )


def test_articulation_residual_prismatic_offset():
    xi = Twist(np.array([1.0, 0, 0]), np.zeros(3))
    T_B = Pose.identity()
    T_A = T_B @ Pose.from_translation([0.12, 0, 0])
    r = articulation_residual(xi, 0.1, T_A, T_B)
    np.testing.assert_allclose(r, [-0.02, 0, 0, 0, 0, 0], atol=1e-12)


# ---------------------------------------------------------------------------
# Whitening
# ---------------------------------------------------------------------------


def test_whitened_cost_equals_mahalanobis(rng):
    sigmas = rng.uniform(0.1, 2.0, size=5)
    model = NoiseModel.from_sigmas(sigmas)
    r = rng.normal(size=5)
    white = model.whiten(r)
    np.testing.assert_allclose(white @ white, r @ np.diag(1.0 / sigmas**2) @ r)

    A = rng.normal(size=(4, 4))
    cov = A @ A.T + 4 * np.eye(4)
    dense = NoiseModel.from_covariance(cov)
    r = rng.normal(size=4)
    white = dense.whiten(r)
    np.testing.assert_allclose(white @ white, r @ np.linalg.solve(cov, r), rtol=1e-10)


def test_linearize_prior_is_whitened_identity():
    noise = NoiseModel.isotropic(math.sqrt(10.0), 7)
    factor = PriorFactor(state(np.zeros(6), 0.0), noise)
    values = {XI: np.zeros(6), theta_var(0): 0.0}
    r, Js = linearize(factor, values)
    np.testing.assert_allclose(r, np.zeros(7))
    J = np.hstack([Js[XI], Js[theta_var(0)]])
    np.testing.assert_allclose(J, np.eye(7) / math.sqrt(10.0))


def test_linearize_kinematic_at_measurement_is_whitened_identity(rng):
    T = random_pose(rng)
    factor = KinematicFactor(pose_a_var(3), T, NoiseModel.isotropic(1e-3, 6))
    _, Js = linearize(factor, {pose_a_var(3): T})
    np.testing.assert_allclose(Js[pose_a_var(3)], np.eye(6) * 1e3, atol=1e-6)


def test_affordance_jacobian_full_rank_at_consistent_flow(rng):
    xi = random_twist(rng)
    p = rng.normal(size=3)
    f = exp_se3(xi, FLOW_THETA).act(p) - p
    factor = AffordanceFactor(p, f, log_sigma=np.zeros(3))
    r, Js = linearize(factor, {XI: xi})
    np.testing.assert_allclose(r, np.zeros(3), atol=1e-12)
    assert np.linalg.matrix_rank(Js[XI]) == 3


# ---------------------------------------------------------------------------
# Finite-difference validation of every factor type
# ---------------------------------------------------------------------------


def _random_prior_factor(rng):
    factor = PriorFactor(state(rng.normal(size=6), rng.normal()), NoiseModel.isotropic(1.0, 7))
    values = {XI: rng.normal(size=6), theta_var(0): float(rng.normal())}
    return factor, values


def _random_affordance_factor(rng):
    factor = AffordanceFactor(rng.normal(size=3), 0.05 * rng.normal(size=3), rng.normal(size=3))
    return factor, {XI: rng.normal(size=6)}


def _random_force_factor(rng):
    m = ForceMeasurement(force=rng.normal(size=3) + [0, 0, 2.0], point=rng.normal(size=3))
    factor = ForcePlaneFactor.from_estimate(m, rng.normal(size=6), NoiseModel.isotropic(1e-3, 3))
    return factor, {XI: rng.normal(size=6)}


def _random_kinematic_factor(rng):
    var = pose_b_var(int(rng.integers(0, 5)))
    factor = KinematicFactor(var, random_pose(rng, max_angle=2.0), NoiseModel.isotropic(1e-3, 6))
    return factor, {var: random_pose(rng, max_angle=2.0)}


def _random_articulation_factor(rng):
    k = int(rng.integers(0, 5))
    factor = ArticulationFactor(k, NoiseModel.isotropic(1e-2, 6))
    while True:
        xi = random_twist(rng)
        theta = rng.uniform(-1.0, 1.0)
        if np.linalg.norm(xi[3:]) * abs(theta) > 2.6:
            continue
        T_A = random_pose(rng, max_angle=1.2)
        T_B = random_pose(rng, max_angle=1.2)
        M = exp_se3(xi, theta)
        D = T_A.inverse() @ T_B @ M
        if rotation_angle(D.R) > 2.6:
            continue
        values = {XI: xi, theta_var(k): theta, pose_a_var(k): T_A, pose_b_var(k): T_B}
        return factor, values


FACTOR_BUILDERS = {
    "prior": _random_prior_factor,
    "affordance": _random_affordance_factor,
    "force": _random_force_factor,
    "kinematic": _random_kinematic_factor,
    "articulation": _random_articulation_factor,
}


@pytest.mark.parametrize("kind", sorted(FACTOR_BUILDERS))
def test_jacobians_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(100):
        factor, values = FACTOR_BUILDERS[kind](rng)
        assert jacobian_relative_error(factor, values) < 1e-5


def test_force_factor_target_is_in_plane(rng):
    for _ in range(30):
        m = ForceMeasurement(force=rng.normal(size=3) * 5, point=rng.normal(size=3))
        if np.linalg.norm(m.force) < 1e-3:
            continue
        factor = ForcePlaneFactor.from_estimate(m, rng.normal(size=6), NoiseModel.isotropic(1e-3, 3))
        assert abs(factor.target @ m.force) < 1e-9 * np.linalg.norm(m.force)


def test_force_factor_optimum_satisfies_plane_constraint(rng):
    # Blocked pull-back: the single-factor least-squares optimum must put the
    # contact velocity exactly in the reaction plane.
    m = ForceMeasurement(force=np.array([8.0, 0.0, 0.0]), point=np.zeros(3))
    xi0 = np.array([1.0, 0, 0, 0, 0, 0])
    factor = ForcePlaneFactor.from_estimate(m, xi0, NoiseModel.isotropic(1e-3, 3))
    # Residual is affine in v: optimum velocity equals the in-plane target.
    v_opt = factor.target
    assert abs(v_opt @ m.force) < 1e-12
    assert abs(np.linalg.norm(v_opt) - 1.0) < 1e-12
