import numpy as np
import pytest

from screwfit.se3 import Pose, rot_exp, se3_exp


def random_rotvec(rng, max_angle=2.8):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_pose(rng, max_angle=2.8, trans_scale=1.0) -> Pose:
    return Pose(rot_exp(random_rotvec(rng, max_angle)), rng.normal(scale=trans_scale, size=3))


def random_twist(rng, scale=1.0) -> np.ndarray:
    return rng.normal(scale=scale, size=6)


def _perturbed(value, delta):
    if isinstance(value, Pose):
        return value @ se3_exp(delta)
    if np.isscalar(value) or np.ndim(value) == 0:
        return float(value) + float(delta[0])
    return np.asarray(value, dtype=float) + delta


def numeric_jacobians(factor, values, step=1e-6):
    """Central-difference Jacobians of a factor's raw residual.

    Vector variables are perturbed additively, poses by right retraction
    T * exp(d^), matching the analytic convention.
    """
    from screwfit.factors import VAR_DIMS

    out = {}
    for var in factor.vars:
        dim = VAR_DIMS[var.kind]
        cols = []
        for i in range(dim):
            delta = np.zeros(dim)
            delta[i] = step
            plus = dict(values)
            plus[var] = _perturbed(values[var], delta)
            minus = dict(values)
            minus[var] = _perturbed(values[var], -delta)
            cols.append((factor.residual(plus) - factor.residual(minus)) / (2 * step))
        out[var] = np.stack(cols, axis=1)
    return out


def jacobian_relative_error(factor, values, step=1e-6) -> float:
    """Worst relative Frobenius mismatch between analytic and numeric blocks."""
    analytic = factor.jacobians(values)
    numeric = numeric_jacobians(factor, values, step)
    worst = 0.0
    for var, J_num in numeric.items():
        diff = np.linalg.norm(analytic[var] - J_num)
        rel = diff / max(np.linalg.norm(J_num), 1e-6)
        worst = max(worst, rel)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
