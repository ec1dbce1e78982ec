"""Motion generation: incremental opening schedule, goal-pose synthesis from
the current twist estimate, and inverse kinematics for an optional serial
chain via sequentially linearized quadratic programs.

The closed-loop default is the free-flyer end-effector, which commands the
goal pose directly; the chain path exists for setups that need joint-space
commands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from cvxopt import matrix as _cvx_matrix
from cvxopt import solvers as _cvx_solvers

from .screw import Twist
from .se3 import Pose, exp_so3, exp_se3, hat3

_QP_OPTIONS = {
    "show_progress": False,
    "abstol": 1e-10,
    "reltol": 1e-10,
    "feastol": 1e-10,
    "maxiters": 200,
}


class InconsistentBounds(ValueError):
    """A lower bound exceeds the matching upper bound."""


@dataclass
class OpeningSchedule:
    """Goal-configuration generator: theta advances by sign * gv * dt per tick
    and the sign inverts at the bounds, sweeping open and closed."""

    gv: float
    dt: float
    theta: float = 0.0
    bounds: tuple[float, float] = (0.0, 1.0)
    sign: float = 1.0

    def advance(self) -> float:
        lo, hi = self.bounds
        tentative = self.theta + self.sign * self.gv * self.dt
        if tentative >= hi:
            self.sign = -1.0
        elif tentative <= lo:
            self.sign = 1.0
        self.theta = min(max(tentative, lo), hi)
        return self.theta


def goal_pose(xi_est: Twist, theta_goal: float, T_WB: Pose) -> Pose:
    """Pose of the articulated part at the goal configuration under the
    current twist estimate: T_WB composed with the screw displacement."""
    return T_WB @ exp_se3(xi_est.array, theta_goal)


# ---------------------------------------------------------------------------
# Quadratic program
# ---------------------------------------------------------------------------


@dataclass
class QPProblem:
    """min 1/2 x^T C x  subject to  lb <= x <= ub  and  lb_A <= A x <= ub_A."""

    C: np.ndarray
    A: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    lb_A: np.ndarray
    ub_A: np.ndarray


def solve_qp(problem: QPProblem) -> np.ndarray:
    """Solve a small dense QP (interior point, KKT-accurate).

    Rows of A whose two bounds coincide become equality constraints; infinite
    bounds are dropped. Raises InconsistentBounds for crossed bounds.
    """
    C = np.asarray(problem.C, dtype=float)
    n = C.shape[0]
    lb = np.asarray(problem.lb, dtype=float)
    ub = np.asarray(problem.ub, dtype=float)
    A = np.asarray(problem.A, dtype=float).reshape(-1, n)
    lb_A = np.asarray(problem.lb_A, dtype=float).reshape(-1)
    ub_A = np.asarray(problem.ub_A, dtype=float).reshape(-1)
    if (lb > ub).any() or (lb_A > ub_A).any():
        raise InconsistentBounds("lower bound exceeds upper bound")

    eq = np.isfinite(lb_A) & np.isfinite(ub_A) & (ub_A - lb_A < 1e-12)
    A_eq, b_eq = A[eq], ub_A[eq]

    G_rows, h_vals = [], []
    for i in np.flatnonzero(~eq):
        if np.isfinite(ub_A[i]):
            G_rows.append(A[i])
            h_vals.append(ub_A[i])
        if np.isfinite(lb_A[i]):
            G_rows.append(-A[i])
            h_vals.append(-lb_A[i])
    for i in range(n):
        if np.isfinite(ub[i]):
            row = np.zeros(n)
            row[i] = 1.0
            G_rows.append(row)
            h_vals.append(ub[i])
        if np.isfinite(lb[i]):
            row = np.zeros(n)
            row[i] = -1.0
            G_rows.append(row)
            h_vals.append(-lb[i])

    P = _cvx_matrix(C)
    q = _cvx_matrix(np.zeros(n))
    G = _cvx_matrix(np.array(G_rows)) if G_rows else None
    h = _cvx_matrix(np.array(h_vals)) if h_vals else None
    Aeq = _cvx_matrix(A_eq) if A_eq.size else None
    beq = _cvx_matrix(b_eq) if A_eq.size else None
    sol = _cvx_solvers.qp(P, q, G, h, Aeq, beq, options=_QP_OPTIONS)
    if sol["status"] not in ("optimal", "unknown"):
        raise RuntimeError(f"QP solve failed: {sol['status']}")
    return np.asarray(sol["x"]).ravel()


# ---------------------------------------------------------------------------
# Serial chain and inverse kinematics
# ---------------------------------------------------------------------------


@dataclass
class ChainModel:
    """Generic serial arm: revolute joints about alternating z/y axes with
    fixed links along x. Positions are hard-bounded, steps velocity-bounded."""

    n_joints: int = 7
    link_length: float = 0.25
    axes: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    velocity_limit: float = 0.5

    def __post_init__(self):
        if self.axes is None:
            base = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])]
            self.axes = np.array([base[i % 2] for i in range(self.n_joints)])
        else:
            self.axes = np.asarray(self.axes, dtype=float).reshape(self.n_joints, 3)
        if self.lb is None:
            self.lb = np.full(self.n_joints, -2.9)
        if self.ub is None:
            self.ub = np.full(self.n_joints, 2.9)

    def fk(self, q) -> Pose:
        return self._frames(q)[-1]

    def _frames(self, q) -> list[Pose]:
        """Pose after each joint; the last entry is the end effector."""
        q = np.asarray(q, dtype=float)
        link = Pose.from_translation([self.link_length, 0.0, 0.0])
        frames = []
        T = Pose.identity()
        for i in range(self.n_joints):
            T = T @ Pose(exp_so3(self.axes[i], q[i]), np.zeros(3)) @ link
            frames.append(T)
        return frames

    def jacobian(self, q) -> np.ndarray:
        """Geometric Jacobian (6 x n): linear rows then angular rows."""
        q = np.asarray(q, dtype=float)
        frames = self._frames(q)
        p_e = frames[-1].t
        J = np.zeros((6, self.n_joints))
        T_prev = Pose.identity()
        for i in range(self.n_joints):
            z = T_prev.R @ self.axes[i]
            p = T_prev.t
            J[:3, i] = np.cross(z, p_e - p)
            J[3:, i] = z
            T_prev = frames[i]
        return J


@dataclass
class IkResult:
    q: np.ndarray
    converged: bool
    iterations: int
    pos_residual: float
    rot_residual: float


def solve_ik(
    chain: ChainModel,
    q_start,
    target: Pose,
    *,
    max_iterations: int = 50,
    tol: float = 1e-6,
    slack_weight: float = 1e4,
) -> IkResult:
    """Drive the chain end effector to the target pose.

    Each iteration linearizes the position and rotation-matrix constraints,
    solves the slack-augmented QP for a bounded joint step, and repeats until
    both residual norms drop below `tol`. Position bounds are enforced
    exactly through the step bounds; an unreachable target leaves the slacks
    absorbing the infeasibility and `converged` False.
    """
    n = chain.n_joints
    q = np.clip(np.asarray(q_start, dtype=float).copy(), chain.lb, chain.ub)
    C = np.diag(np.concatenate([np.ones(n), slack_weight * np.ones(12)]))
    pos_res = rot_res = np.inf
    for it in range(max_iterations):
        T = chain.fk(q)
        e_p = target.t - T.t
        e_R = (target.R - T.R).ravel()
        pos_res = float(np.linalg.norm(e_p))
        rot_res = float(np.linalg.norm(e_R))
        if pos_res < tol and rot_res < tol:
            return IkResult(q, True, it, pos_res, rot_res)
        J = chain.jacobian(q)
        # d vec(R)/dq_j = vec(hat(z_j) R): rotation matrices evolve by
        # left-multiplied angular velocity.
        J_R = np.zeros((9, n))
        for j in range(n):
            J_R[:, j] = (hat3(J[3:, j]) @ T.R).ravel()
        A_task = np.hstack([np.vstack([J[:3, :], J_R]), np.eye(12)])
        e = np.concatenate([e_p, e_R])
        step_lb = np.maximum(-chain.velocity_limit, chain.lb - q)
        step_ub = np.minimum(chain.velocity_limit, chain.ub - q)
        problem = QPProblem(
            C=C,
            A=A_task,
            lb=np.concatenate([step_lb, np.full(12, -1e6)]),
            ub=np.concatenate([step_ub, np.full(12, 1e6)]),
            lb_A=e,
            ub_A=e,
        )
        x = solve_qp(problem)
        q = np.clip(q + x[:n], chain.lb, chain.ub)
    T = chain.fk(q)
    pos_res = float(np.linalg.norm(target.t - T.t))
    rot_res = float(np.linalg.norm(target.R - T.R))
    converged = pos_res < tol and rot_res < tol
    return IkResult(q, converged, max_iterations, pos_res, rot_res)
