"""Deterministic kinematic world: one single-joint articulated object with a
compliant rigid grasp.

The part pose always satisfies T_WA = T_WB exp(xi^ theta) exactly; a
commanded end-effector pose is projected onto that constraint manifold.
First-order spring compliance (no dynamics): the reaction force is the
stiffness times the uncancelled spring stretch between the commanded and the
achieved grasp position. Friction is a scalar breakaway threshold on the
driving force along the joint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .screw import JointClass, Twist, classify, normalize, point_velocity
from .se3 import Pose, exp_se3

_MIN_MOTION = 1e-12


class NotAttached(RuntimeError):
    """step() called without an attached grasp."""


class GraspOnHinge(ValueError):
    """Grasp point within 1 mm of a revolute axis; no lever arm exists."""


@dataclass
class ArticulatedObject:
    """Ground-truth object: normalized twist in the base frame, base pose in
    the world, configuration range and static friction resistance."""

    xi: Twist
    base_pose: Pose = field(default_factory=Pose.identity)
    theta_range: tuple[float, float] = (0.0, 1.0)
    friction: float = 0.0

    def __post_init__(self):
        unit, scale = normalize(self.xi)
        if not math.isclose(scale, 1.0, rel_tol=1e-6):
            self.xi = unit
        self.joint_class = classify(self.xi)
        if self.joint_class is JointClass.HELICAL:
            raise ValueError("helical ground-truth joints are not supported")
        if self.theta_range[0] > self.theta_range[1]:
            raise ValueError("theta_range must be ordered")

    def axis_point(self) -> np.ndarray:
        """Point on the revolute axis closest to the base-frame origin."""
        return np.cross(self.xi.w, self.xi.v)


@dataclass
class GraspContact:
    """Rigid attachment of the end-effector to the articulated part.

    `point` and `orientation` place the end-effector frame on the part (frame
    A); the end-effector origin sits at the grasp point. `stiffness` is the
    spring constant of the compliant positioning in N/m.
    """

    point: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    rigid: bool = True
    stiffness: float = 400.0

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.orientation = np.asarray(self.orientation, dtype=float)

    def offset(self) -> Pose:
        return Pose(self.orientation, self.point)


@dataclass
class StepResult:
    achieved_pose: Pose
    reaction_force: np.ndarray
    theta: float
    moved: bool


class World:
    """One object, one grasp, strictly sequential stepping."""

    def __init__(self, obj: ArticulatedObject):
        self.obj = obj
        self.grasp: GraspContact | None = None
        self.theta = 0.0

    # ------------------------------------------------------------------

    def reset(self, grasp: GraspContact) -> None:
        """Attach the grasp at theta = 0.

        Rejects grasp points within 1 mm of a revolute axis: the contact
        would have no lever arm on the joint.
        """
        if self.obj.joint_class is JointClass.REVOLUTE:
            c = np.asarray(grasp.point, dtype=float)
            q = self.obj.axis_point()
            radial = (c - q) - self.obj.xi.w * float(self.obj.xi.w @ (c - q))
            if np.linalg.norm(radial) < 1e-3:
                raise GraspOnHinge("grasp point within 1 mm of the revolute axis")
        self.grasp = grasp
        self.theta = 0.0

    # ------------------------------------------------------------------

    def part_pose(self, theta: float | None = None) -> Pose:
        theta = self.theta if theta is None else theta
        return self.obj.base_pose @ exp_se3(self.obj.xi.array, theta)

    def ee_pose(self, theta: float | None = None) -> Pose:
        self._require_attached()
        return self.part_pose(theta) @ self.grasp.offset()

    def grasp_point_world(self, theta: float | None = None) -> np.ndarray:
        return self.ee_pose(theta).t

    def valid_direction_world(self, theta: float | None = None) -> np.ndarray:
        """Unit direction of grasp-point motion for increasing theta."""
        v = self._grasp_velocity_world(theta)
        return v / np.linalg.norm(v)

    def _grasp_velocity_world(self, theta=None) -> np.ndarray:
        self._require_attached()
        theta = self.theta if theta is None else theta
        c_base = exp_se3(self.obj.xi.array, theta).act(self.grasp.point)
        return self.obj.base_pose.R @ point_velocity(self.obj.xi, c_base)

    def opening_fraction(self) -> float:
        lo, hi = self.obj.theta_range
        if hi - lo <= 0.0:
            return 0.0
        return (self.theta - lo) / (hi - lo)

    def _require_attached(self):
        if self.grasp is None:
            raise NotAttached("no grasp attached; call reset() first")

    # ------------------------------------------------------------------

    def step(self, commanded: Pose) -> StepResult:
        """Move toward a commanded end-effector pose.

        The commanded grasp-point displacement is projected onto the joint
        orbit (exactly, so feasible command sequences are reversible without
        hysteresis); theta moves iff the along-joint driving force exceeds
        the friction threshold, clamped to the configuration range. The
        reaction force is the spring stretch left between the commanded and
        achieved grasp positions.
        """
        self._require_attached()
        K = self.grasp.stiffness
        p_now = self.grasp_point_world()
        p_cmd = commanded.t
        delta = p_cmd - p_now

        vel = self._grasp_velocity_world()
        speed = float(np.linalg.norm(vel))
        d_hat = vel / speed
        s_along = float(delta @ d_hat)

        d_theta = 0.0
        if K * abs(s_along) > self.obj.friction:
            d_theta = self._project_onto_orbit(p_cmd, speed)
        lo, hi = self.obj.theta_range
        new_theta = min(max(self.theta + d_theta, lo), hi)
        moved = abs(new_theta - self.theta) > _MIN_MOTION

        if not moved:
            reaction = -K * delta
            return StepResult(self.ee_pose(), reaction, self.theta, False)

        self.theta = new_theta
        achieved = self.ee_pose()
        reaction = K * (achieved.t - p_cmd)
        return StepResult(achieved, reaction, self.theta, True)

    def _project_onto_orbit(self, p_cmd: np.ndarray, speed: float) -> float:
        """Signed configuration increment whose orbit point is nearest to the
        commanded grasp position."""
        if self.obj.joint_class is JointClass.PRISMATIC:
            d_hat = self.valid_direction_world()
            return float((p_cmd - self.grasp_point_world()) @ d_hat) / speed
        # Revolute: angle between the radial components around the axis.
        axis_dir = self.obj.base_pose.R @ self.obj.xi.w
        axis_pt = self.obj.base_pose.act(self.obj.axis_point())

        def radial(p):
            r = p - axis_pt
            return r - axis_dir * float(axis_dir @ r)

        r_now = radial(self.grasp_point_world())
        r_cmd = radial(p_cmd)
        if np.linalg.norm(r_cmd) < 1e-9:
            return 0.0
        return math.atan2(float(np.cross(r_now, r_cmd) @ axis_dir), float(r_now @ r_cmd))
