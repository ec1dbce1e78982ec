"""Residual factors of the articulation estimation problem.

Five factor types: a prior on the initial (xi, theta) state, per-point visual
flow factors, force-plane factors from blocked pulls, unary pose factors from
kinematic measurements, and the screw-model factor tying part poses to
(xi, theta_k).

Pose-variable Jacobians use the right-perturbation convention T * exp(d^),
matching `se3.boxminus`. Each factor exposes analytic Jacobians; the test
suite validates all of them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .screw import ArticulationState, Twist, point_velocity
from .se3 import (
    Pose,
    adjoint,
    boxminus,
    exp_se3,
    hat3,
    se3_left_jacobian,
    se3_left_jacobian_inv,
    se3_log,
    se3_right_jacobian,
    se3_right_jacobian_inv,
)

# Configuration increment the flow prior is expressed at. The same increment
# is used when synthesizing flow clouds, so a flow generated from a twist
# zeroes the corresponding residual exactly.
FLOW_THETA = 0.05


class DegenerateForce(ValueError):
    """Force or velocity magnitude too small to define the plane constraint."""


class Var(NamedTuple):
    """Variable key: kind in {"xi", "theta", "pose_a", "pose_b"} plus the
    measurement index k. The single shared twist is XI."""

    kind: str
    k: int


XI = Var("xi", 0)


def theta_var(k: int) -> Var:
    return Var("theta", k)


def pose_a_var(k: int) -> Var:
    return Var("pose_a", k)


def pose_b_var(k: int) -> Var:
    return Var("pose_b", k)


VAR_DIMS = {"xi": 6, "theta": 1, "pose_a": 6, "pose_b": 6}


class NoiseModel:
    """Gaussian noise model; whitens residuals and Jacobians by cov^(-1/2).

    Diagonal models store the per-axis inverse sigmas; dense models whiten
    through the Cholesky factor of the covariance. Either way the whitened
    squared norm equals the Mahalanobis form r^T cov^-1 r.
    """

    def __init__(self, inv_sigmas=None, chol=None):
        self._inv_sigmas = None if inv_sigmas is None else np.asarray(inv_sigmas, float)
        self._chol = chol

    @staticmethod
    def isotropic(sigma: float, dim: int) -> "NoiseModel":
        return NoiseModel(inv_sigmas=np.full(dim, 1.0 / sigma))

    @staticmethod
    def from_sigmas(sigmas) -> "NoiseModel":
        return NoiseModel(inv_sigmas=1.0 / np.asarray(sigmas, dtype=float))

    @staticmethod
    def from_covariance(cov) -> "NoiseModel":
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 1:
            return NoiseModel(inv_sigmas=1.0 / np.sqrt(cov))
        return NoiseModel(chol=np.linalg.cholesky(cov))

    @property
    def dim(self) -> int:
        if self._inv_sigmas is not None:
            return self._inv_sigmas.shape[0]
        return self._chol.shape[0]

    def whiten(self, r: np.ndarray) -> np.ndarray:
        if self._inv_sigmas is not None:
            return r * self._inv_sigmas
        return np.linalg.solve(self._chol, r)

    def whiten_jacobian(self, J: np.ndarray) -> np.ndarray:
        if self._inv_sigmas is not None:
            return J * self._inv_sigmas[:, None]
        return np.linalg.solve(self._chol, J)


@dataclass(frozen=True)
class ForceMeasurement:
    """An above-threshold reaction force at a contact point (estimation frame)."""

    force: np.ndarray
    point: np.ndarray
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))


# ---------------------------------------------------------------------------
# Residual functions (pure, used by the factor classes and by tests)
# ---------------------------------------------------------------------------


def prior_residual(x0: ArticulationState, prior: ArticulationState) -> np.ndarray:
    """Componentwise difference of the 7-dimensional initial state."""
    return x0.array - prior.array


def affordance_residual(xi: Twist, p_i, f_hat_i) -> np.ndarray:
    """Mismatch between the screw-predicted displacement of a surface point
    over the fixed FLOW_THETA increment and the predicted flow."""
    p_i = np.asarray(p_i, dtype=float)
    return exp_se3(xi.array, FLOW_THETA).act(p_i) - np.asarray(f_hat_i, float) - p_i


def rotate_into_plane(v, force) -> np.ndarray:
    """Rotate v onto the plane with normal `force`, preserving its magnitude.

    Implemented as the orthogonal projection rescaled to ||v||. When v is
    (anti-)parallel to the force the projection vanishes; the in-plane
    direction is then built from the cross product of the normal with the
    first standard basis vector not aligned with it.
    """
    force = np.asarray(force, dtype=float)
    fn = float(np.linalg.norm(force))
    if fn <= 1e-9:
        raise DegenerateForce("force magnitude below 1e-9")
    n = force / fn
    v = np.asarray(v, dtype=float)
    mag = float(np.linalg.norm(v))
    if np.linalg.norm(np.cross(v, n)) < 1e-9:
        e = next(b for b in np.eye(3) if abs(float(n @ b)) < 0.9)
        t = np.cross(n, e)
        t /= np.linalg.norm(t)
        d = np.cross(t, n)
        return mag * d / np.linalg.norm(d)
    p = v - n * float(n @ v)
    return mag * p / np.linalg.norm(p)


def force_plane_residual(xi: Twist, m: ForceMeasurement) -> np.ndarray:
    """Deviation of the contact-point velocity from its in-plane rotation.

    Zero exactly when the velocity already lies in the plane orthogonal to
    the measured force (v_est . F = 0), nonzero otherwise.
    """
    v_est = point_velocity(xi, m.point)
    return v_est - rotate_into_plane(v_est, m.force)


def kinematic_residual(T_var: Pose, T_meas: Pose) -> np.ndarray:
    """Manifold difference between a pose variable and its measurement."""
    return boxminus(T_var, T_meas)


def articulation_residual(xi: Twist, theta_k: float, T_A: Pose, T_B: Pose) -> np.ndarray:
    """Screw-model consistency: exp(xi^ theta_k) differenced against the
    relative part pose T_B^-1 T_A."""
    return boxminus(exp_se3(xi.array, theta_k), T_B.inverse() @ T_A)


# ---------------------------------------------------------------------------
# Vectorized affordance evaluation (shared by the factor and the solver)
# ---------------------------------------------------------------------------


def affordance_batch_residual(xi: np.ndarray, points: np.ndarray, flows: np.ndarray) -> np.ndarray:
    """(N, 3) stack of flow residuals for one twist."""
    T = exp_se3(xi, FLOW_THETA)
    moved = points @ T.R.T + T.t
    return moved - flows - points


def affordance_batch_jacobian(xi: np.ndarray, points: np.ndarray) -> np.ndarray:
    """(N, 3, 6) stack of flow-residual Jacobians with respect to xi."""
    T = exp_se3(xi, FLOW_THETA)
    moved = points @ T.R.T + T.t
    Jl = se3_left_jacobian(FLOW_THETA * xi)
    top, bottom = Jl[:3, :], Jl[3:, :]
    # hat(y) @ bottom, per point: column j is y x bottom[:, j].
    crossed = np.cross(moved[:, None, :], bottom.T[None, :, :]).transpose(0, 2, 1)
    return FLOW_THETA * (top[None, :, :] - crossed)


# ---------------------------------------------------------------------------
# Factor classes
# ---------------------------------------------------------------------------


class Factor:
    """Residual term with a noise model and the variables it touches."""

    vars: tuple[Var, ...] = ()
    noise: NoiseModel

    def residual(self, values: dict) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, values: dict) -> dict[Var, np.ndarray]:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        return self.noise.dim


def linearize(factor: Factor, values: dict) -> tuple[np.ndarray, dict[Var, np.ndarray]]:
    """Whitened residual and whitened Jacobian blocks at the current values."""
    r = factor.noise.whiten(factor.residual(values))
    Js = {v: factor.noise.whiten_jacobian(J) for v, J in factor.jacobians(values).items()}
    return r, Js


class PriorFactor(Factor):
    def __init__(self, mean: ArticulationState, noise: NoiseModel):
        self.mean = mean
        self.noise = noise
        self.vars = (XI, theta_var(0))

    def residual(self, values):
        state = ArticulationState(Twist.from_array(values[XI]), float(values[theta_var(0)]))
        return prior_residual(state, self.mean)

    def jacobians(self, values):
        J_xi = np.zeros((7, 6))
        J_xi[:6, :] = np.eye(6)
        J_th = np.zeros((7, 1))
        J_th[6, 0] = 1.0
        return {XI: J_xi, theta_var(0): J_th}


class AffordanceFactor(Factor):
    """Unary factor on xi from one masked flow point, whitened by the
    per-point predicted covariance diag(e^(2u))."""

    def __init__(self, point, flow, log_sigma):
        self.point = np.asarray(point, dtype=float)
        self.flow = np.asarray(flow, dtype=float)
        self.log_sigma = np.asarray(log_sigma, dtype=float)
        self.noise = NoiseModel(inv_sigmas=np.exp(-self.log_sigma))
        self.vars = (XI,)

    def residual(self, values):
        return affordance_batch_residual(values[XI], self.point[None, :], self.flow[None, :])[0]

    def jacobians(self, values):
        return {XI: affordance_batch_jacobian(values[XI], self.point[None, :])[0]}


class ForcePlaneFactor(Factor):
    """Pulls the contact-point velocity toward a fixed in-plane target.

    The target is the in-plane rotation of the velocity estimate at the time
    the blocked pull was observed; a fresh blocked pull produces a fresh
    factor with a new target. The optimum therefore satisfies the plane
    constraint v_est . F = 0 while keeping the velocity magnitude, instead of
    admitting the all-zero velocity the instantaneous projection would allow.
    """

    def __init__(self, measurement: ForceMeasurement, target, noise: NoiseModel):
        self.measurement = measurement
        self.target = np.asarray(target, dtype=float)
        self.noise = noise
        self.vars = (XI,)

    @staticmethod
    def from_estimate(measurement: ForceMeasurement, xi_estimate, noise: NoiseModel) -> "ForcePlaneFactor":
        v0 = point_velocity(Twist.from_array(xi_estimate), measurement.point)
        if np.linalg.norm(v0) < 1e-9:
            raise DegenerateForce("velocity estimate at the contact point is zero")
        return ForcePlaneFactor(measurement, rotate_into_plane(v0, measurement.force), noise)

    def residual(self, values):
        xi = Twist.from_array(values[XI])
        return point_velocity(xi, self.measurement.point) - self.target

    def jacobians(self, values):
        J = np.zeros((3, 6))
        J[:, :3] = np.eye(3)
        J[:, 3:] = -hat3(self.measurement.point)
        return {XI: J}


class KinematicFactor(Factor):
    """Unary pose factor anchoring a pose variable to a measurement."""

    def __init__(self, var: Var, measured: Pose, noise: NoiseModel):
        self.var = var
        self.measured = measured
        self.noise = noise
        self.vars = (var,)

    def residual(self, values):
        return kinematic_residual(values[self.var], self.measured)

    def jacobians(self, values):
        r = self.residual(values)
        return {self.var: se3_right_jacobian_inv(r)}


class ArticulationFactor(Factor):
    """Ties (xi, theta_k) to the part poses through the screw model."""

    def __init__(self, k: int, noise: NoiseModel):
        self.k = k
        self.noise = noise
        self.vars = (XI, theta_var(k), pose_a_var(k), pose_b_var(k))

    def residual(self, values):
        xi = Twist.from_array(values[XI])
        return articulation_residual(
            xi,
            float(values[theta_var(self.k)]),
            values[pose_a_var(self.k)],
            values[pose_b_var(self.k)],
        )

    def jacobians(self, values):
        xi = np.asarray(values[XI], dtype=float)
        theta = float(values[theta_var(self.k)])
        T_A: Pose = values[pose_a_var(self.k)]
        T_B: Pose = values[pose_b_var(self.k)]
        M = exp_se3(xi, theta)
        r = se3_log(T_A.inverse() @ T_B @ M)
        Jr_inv = se3_right_jacobian_inv(r)
        J_theta = (Jr_inv @ xi).reshape(6, 1)
        J_xi = Jr_inv @ (theta * se3_right_jacobian(theta * xi))
        J_A = -se3_left_jacobian_inv(r)
        J_B = Jr_inv @ adjoint(M.inverse())
        return {
            XI: J_xi,
            theta_var(self.k): J_theta,
            pose_a_var(self.k): J_A,
            pose_b_var(self.k): J_B,
        }
