"""Screw-joint model: twists, joint classification, instantaneous point
velocities and the direction-agreement metric used for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Relative weight of the rotation component below which a twist is treated as
# purely prismatic (the rotation part is zeroed before normalization).
PRISMATIC_OMEGA_RATIO = 0.01

# Residual pitch |w . v| above which a unit-omega twist is labeled helical
# rather than revolute.
HELICAL_PITCH_TOL = 1e-3


class DegenerateTwist(ValueError):
    """Both twist components are numerically zero; no direction is defined."""


class ZeroVector(ValueError):
    """A direction metric received a vector with no direction."""


class JointClass(Enum):
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"
    HELICAL = "helical"


@dataclass(frozen=True)
class Twist:
    """Screw parameters (v, w): linear and angular motion per unit of the
    joint configuration."""

    v: np.ndarray
    w: np.ndarray

    @staticmethod
    def from_array(xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return Twist(xi[:3].copy(), xi[3:].copy())

    @property
    def array(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))


@dataclass(frozen=True)
class ArticulationState:
    """Joint model plus configuration: the 7-dimensional estimation target."""

    xi: Twist
    theta: float

    @property
    def array(self) -> np.ndarray:
        return np.concatenate([self.xi.array, [self.theta]])


def normalize(xi: Twist) -> tuple[Twist, float]:
    """Rescale a twist to the unit convention, returning (normalized, scale).

    A twist whose rotation carries at least 1% of the total magnitude is
    scaled to unit ||w||; otherwise w is zeroed and v scaled to unit norm.
    The screw motion is preserved: exp_se3(normalized, scale * theta) equals
    exp_se3(xi, theta), exactly in the first case and up to the dropped
    rotation in the second.
    """
    v, w = xi.v, xi.w
    nv, nw = float(np.linalg.norm(v)), float(np.linalg.norm(w))
    total = nv + nw
    if total < 1e-12:
        raise DegenerateTwist("twist magnitude below 1e-12")
    if nw >= PRISMATIC_OMEGA_RATIO * total:
        return Twist(v / nw, w / nw), nw
    if nv < 1e-12:
        raise DegenerateTwist("rotation dropped and translation is zero")
    return Twist(v / nv, np.zeros(3)), nv


def classify(xi: Twist, pitch_tol: float = HELICAL_PITCH_TOL) -> JointClass:
    """Joint class of a twist (normalized first, so scale does not matter)."""
    unit, _ = normalize(xi)
    if np.linalg.norm(unit.w) < 0.5:
        return JointClass.PRISMATIC
    if abs(float(unit.w @ unit.v)) > pitch_tol:
        return JointClass.HELICAL
    return JointClass.REVOLUTE


def point_velocity(xi: Twist, c) -> np.ndarray:
    """Instantaneous velocity v + w x c of the point c under the screw motion
    (per unit configuration; not normalized)."""
    return xi.v + np.cross(xi.w, np.asarray(c, dtype=float))


def tangent_similarity(v_gt, v_est) -> float:
    """Mean cosine between paired ground-truth and estimated velocities.

    1 when the directions agree at every sample, 0 when everywhere
    perpendicular. Both sequences must be equal-length, nonempty and free of
    zero vectors.
    """
    v_gt = np.atleast_2d(np.asarray(v_gt, dtype=float))
    v_est = np.atleast_2d(np.asarray(v_est, dtype=float))
    if v_gt.shape != v_est.shape or v_gt.shape[0] < 1 or v_gt.shape[1] != 3:
        raise ValueError(f"mismatched sample shapes {v_gt.shape} vs {v_est.shape}")
    n_gt = np.linalg.norm(v_gt, axis=1)
    n_est = np.linalg.norm(v_est, axis=1)
    if n_gt.min() < 1e-12 or n_est.min() < 1e-12:
        raise ZeroVector("zero vector in tangent similarity input")
    cosines = np.sum(v_gt * v_est, axis=1) / (n_gt * n_est)
    return float(np.mean(cosines))
