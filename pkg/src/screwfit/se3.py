"""SO(3)/SE(3) primitives: hat operators, exponential/logarithm maps, pose
algebra and tangent-space Jacobians.

Conventions: tangent vectors are 6-arrays ordered (rho, phi) = (translation,
rotation), matching the (v, w) layout of a twist. Pose perturbations are
right-multiplicative, T * exp(delta^).
"""

from __future__ import annotations

import math

import numpy as np

# Below this angle the trigonometric coefficients of the exponential map are
# evaluated by Taylor series; the closed forms lose digits to cancellation.
_TAYLOR_EPS = 1e-4

# Rotations closer than this to pi are rejected by the logarithm (branch
# ambiguity).
_PI_MARGIN = 1e-6


class AngleNearPi(ValueError):
    """Rotation angle within the exclusion margin of pi; log map is ambiguous."""


def hat3(w) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat3(w) @ x == cross(w, x)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _rot_coeffs(angle: float) -> tuple[float, float]:
    """(sin a / a, (1 - cos a) / a^2) with small-angle Taylor fallback."""
    if angle < _TAYLOR_EPS:
        a2 = angle * angle
        return 1.0 - a2 / 6.0, 0.5 - a2 / 24.0
    return math.sin(angle) / angle, (1.0 - math.cos(angle)) / (angle * angle)


def rot_exp(phi) -> np.ndarray:
    """SO(3) exponential of a rotation vector (Rodrigues formula)."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    c1, c2 = _rot_coeffs(angle)
    K = hat3(phi)
    return np.eye(3) + c1 * K + c2 * (K @ K)


def exp_so3(axis, angle: float) -> np.ndarray:
    """SO(3) exponential in axis/angle form.

    `axis` must be a unit vector or zero; a zero axis yields the identity
    regardless of `angle`.
    """
    axis = np.asarray(axis, dtype=float)
    if np.linalg.norm(axis) < 1e-12:
        return np.eye(3)
    return rot_exp(axis * angle)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    c = 0.5 * (float(np.trace(R)) - 1.0)
    return math.acos(min(1.0, max(-1.0, c)))


def so3_log(R) -> np.ndarray:
    """Rotation vector of R. Raises AngleNearPi within 1e-6 of pi."""
    angle = rotation_angle(R)
    if math.pi - angle < _PI_MARGIN:
        raise AngleNearPi(f"rotation angle {angle:.9f} too close to pi")
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < _TAYLOR_EPS:
        # w = sin(a)/a * phi; invert the coefficient by series.
        return w * (1.0 + angle * angle / 6.0)
    return w * (angle / math.sin(angle))


def so3_left_jacobian(phi) -> np.ndarray:
    """Left Jacobian of SO(3): d exp((phi + d)^) = exp((J_l d)^) exp(phi^)."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    K = hat3(phi)
    if angle < _TAYLOR_EPS:
        a2 = angle * angle
        c1 = 0.5 - a2 / 24.0
        c2 = 1.0 / 6.0 - a2 / 120.0
    else:
        c1 = (1.0 - math.cos(angle)) / (angle * angle)
        c2 = (angle - math.sin(angle)) / (angle ** 3)
    return np.eye(3) + c1 * K + c2 * (K @ K)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    """Inverse of the SO(3) left Jacobian (angle must be below pi)."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    K = hat3(phi)
    if angle < _TAYLOR_EPS:
        c2 = 1.0 / 12.0 + angle * angle / 720.0
    else:
        c2 = 1.0 / (angle * angle) - (1.0 + math.cos(angle)) / (
            2.0 * angle * math.sin(angle)
        )
    return np.eye(3) - 0.5 * K + c2 * (K @ K)


class Pose:
    """Rigid transform: 3x3 rotation and translation in meters.

    Treated as immutable; composition re-orthonormalizes the rotation when
    numerical drift exceeds 1e-7 so long command chains stay on SO(3).
    """

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(np.eye(3), t)

    @staticmethod
    def from_matrix(M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return Pose(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def compose(self, other: "Pose") -> "Pose":
        R = self.R @ other.R
        drift = np.abs(R.T @ R - np.eye(3)).max()
        if drift > 1e-7:
            # Polar decomposition: nearest rotation in Frobenius norm.
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
            if np.linalg.det(R) < 0:
                R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -(Rt @ self.t))

    def act(self, p) -> np.ndarray:
        """Apply the transform to a point (homogeneous action, de-homogenized)."""
        return self.R @ np.asarray(p, dtype=float) + self.t

    def __repr__(self) -> str:
        return f"Pose(t={np.array2string(self.t, precision=4)}, angle={rotation_angle(self.R):.4f})"


def se3_exp(tau) -> Pose:
    """SE(3) exponential of a tangent 6-vector (rho, phi)."""
    tau = np.asarray(tau, dtype=float)
    rho, phi = tau[:3], tau[3:]
    return Pose(rot_exp(phi), so3_left_jacobian(phi) @ rho)


def exp_se3(xi, theta: float) -> Pose:
    """Screw motion exp((xi * theta)^) for a twist xi = (v, w).

    Accepts any finite twist; exp_se3(xi, 0) is the identity, and a zero
    rotation component gives the pure translation v * theta.
    """
    return se3_exp(np.asarray(xi, dtype=float) * theta)


def se3_log(T: Pose) -> np.ndarray:
    """Tangent 6-vector (rho, phi) with se3_exp(se3_log(T)) == T.

    Raises AngleNearPi when the rotation angle is within 1e-6 of pi.
    """
    phi = so3_log(T.R)
    rho = so3_left_jacobian_inv(phi) @ T.t
    return np.concatenate([rho, phi])


def boxminus(Ta: Pose, Tb: Pose) -> np.ndarray:
    """Manifold difference log(Tb^-1 Ta); zero iff the poses coincide."""
    return se3_log(Tb.inverse() @ Ta)


def adjoint(T: Pose) -> np.ndarray:
    """6x6 adjoint: T exp(tau^) T^-1 == exp((adjoint(T) tau)^)."""
    A = np.zeros((6, 6))
    A[:3, :3] = T.R
    A[3:, 3:] = T.R
    A[:3, 3:] = hat3(T.t) @ T.R
    return A


def se3_ad(tau) -> np.ndarray:
    """Adjoint of a tangent vector: ad_tau = d/ds adjoint(exp(s tau^))."""
    tau = np.asarray(tau, dtype=float)
    A = np.zeros((6, 6))
    P = hat3(tau[3:])
    A[:3, :3] = P
    A[3:, 3:] = P
    A[:3, 3:] = hat3(tau[:3])
    return A


def se3_left_jacobian(tau) -> np.ndarray:
    """Left Jacobian of SE(3), by the adjoint series sum ad^n / (n+1)!.

    Converges to machine precision within 40 terms for any tangent this
    package produces (rotation angle below pi).
    """
    A = se3_ad(tau)
    J = np.eye(6)
    term = np.eye(6)
    for n in range(1, 40):
        term = term @ A / (n + 1.0)
        J += term
        if np.abs(term).max() < 1e-17:
            break
    return J


def se3_right_jacobian(tau) -> np.ndarray:
    """Right Jacobian: exp((tau + d)^) == exp(tau^) exp((J_r d)^)."""
    return se3_left_jacobian(-np.asarray(tau, dtype=float))


def se3_right_jacobian_inv(tau) -> np.ndarray:
    return np.linalg.inv(se3_right_jacobian(tau))


def se3_left_jacobian_inv(tau) -> np.ndarray:
    return np.linalg.inv(se3_left_jacobian(tau))
