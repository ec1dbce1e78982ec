"""Factor-graph container and damped Gauss-Newton (Levenberg-Marquardt)
solver for the articulation estimation problem, with marginal covariance
recovery and the measurement-triggering policy.

Variable layout: one shared twist xi plus the initial configuration theta_0,
and per accepted kinematic measurement k a group (theta_k, T_A_k, T_B_k).
Every factor touches either the shared block alone or the shared block plus
one group, so the normal equations have an arrow structure; the solver
eliminates each 13-dimensional group onto the shared block, which keeps a
solve with hundreds of states at a few milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .factors import (
    XI,
    AffordanceFactor,
    ArticulationFactor,
    Factor,
    ForceMeasurement,
    ForcePlaneFactor,
    KinematicFactor,
    NoiseModel,
    PriorFactor,
    affordance_batch_jacobian,
    affordance_batch_residual,
    linearize,
    pose_a_var,
    pose_b_var,
    theta_var,
)
from .screw import ArticulationState, Twist
from .se3 import AngleNearPi, Pose, boxminus, rotation_angle, se3_exp


class EmptyCloud(ValueError):
    """Flow cloud contains no masked articulated-part points."""


class DuplicateAffordance(ValueError):
    """An affordance cloud was already added; only one visual prior is used."""


class BelowThreshold(ValueError):
    """Reaction force does not exceed the configured trigger threshold."""


class MovedSinceGrasp(RuntimeError):
    """Force factors are only valid before the part has moved beyond d."""


@dataclass
class MarginalReport:
    """Outcome of one optimization: marginals at the final linearization."""

    sigma_xi: np.ndarray
    sigma_theta: float
    iterations: int
    final_cost: float
    converged: bool
    singular: bool


# Shared-block layout: xi occupies columns 0..5, theta_0 column 6.
_S_DIM = 7
# Group layout per state k: theta_k column 0, T_A columns 1..6, T_B 7..12.
_G_DIM = 13


class ArticulationGraph:
    """Single-joint articulation smoother.

    Measurement insertion and optimize() must be serialized by the caller;
    estimate queries are safe between calls. Defaults follow the estimation
    pipeline: sigma_kinematic 1e-3, force covariance 1e-6 I, articulation
    covariance 1e-4 I, weak prior covariance 10 I.
    """

    def __init__(
        self,
        prior_mean: ArticulationState | None = None,
        *,
        prior_sigma: float = math.sqrt(10.0),
        sigma_kinematic: float = 1e-3,
        sigma_articulation: float = 1e-2,
        sigma_force: float = 1e-3,
        force_threshold: float = 8.0,
        d_translation: float = 0.002,
        d_rotation: float = math.radians(0.5),
        reoptimize_every: int = 20,
    ):
        self.prior_sigma = prior_sigma
        self.sigma_kinematic = sigma_kinematic
        self.sigma_articulation = sigma_articulation
        self.sigma_force = sigma_force
        self.force_threshold = force_threshold
        self.d_translation = d_translation
        self.d_rotation = d_rotation
        self.reoptimize_every = reoptimize_every

        self._explicit_prior = prior_mean
        xi0 = prior_mean.xi.array if prior_mean is not None else np.zeros(6)
        th0 = prior_mean.theta if prior_mean is not None else 0.0
        self.values: dict = {XI: np.asarray(xi0, dtype=float), theta_var(0): float(th0)}

        self.factors: list[Factor] = []
        self._prior: PriorFactor | None = None
        self._aff_points = None
        self._aff_flows = None
        self._aff_inv_sigmas = None
        self._mean_flow = None

        self._states: list[int] = []
        self._measurements: dict[int, tuple[Pose, Pose]] = {}
        self._virgin_thetas: set = set()
        self._xi_seeded = prior_mean is not None

        self._last_meas_pose: Pose | None = None
        self._moved_beyond_d = False
        self._n_kin_since_opt = 0
        self._force_pending = False
        self._n_force_factors = 0

    # ------------------------------------------------------------------
    # Measurement insertion
    # ------------------------------------------------------------------

    def add_affordance_cloud(self, cloud) -> int:
        """Add one flow factor per masked point; returns the factor count."""
        if self._aff_points is not None:
            raise DuplicateAffordance("a flow cloud was already added")
        mask = np.asarray(cloud.mask, dtype=bool)
        if not mask.any():
            raise EmptyCloud("cloud has no masked articulated-part points")
        points = np.asarray(cloud.points, dtype=float)[mask]
        flows = np.asarray(cloud.flow, dtype=float)[mask]
        log_sigma = np.asarray(cloud.log_sigma, dtype=float)[mask]
        if not (np.isfinite(flows).all() and np.isfinite(log_sigma).all()):
            raise EmptyCloud("masked points carry non-finite flow or log-sigma")
        self._aff_points = points
        self._aff_flows = flows
        self._aff_inv_sigmas = np.exp(-log_sigma)
        self._mean_flow = flows.mean(axis=0)
        for p, f, u in zip(points, flows, log_sigma):
            self.factors.append(AffordanceFactor(p, f, u))
        return len(points)

    def maybe_add_kinematic(self, T_ee: Pose, T_grasp0: Pose, theta_init: float | None = None) -> bool:
        """Add a state for the end-effector pose if it moved at least the
        translation or rotation trigger distance since the last measurement.

        The new state carries an articulation factor plus kinematic factors
        anchoring T_A to the measured pose and T_B to the initial grasp pose.
        """
        rel_grasp = T_grasp0.inverse() @ T_ee
        if (
            np.linalg.norm(rel_grasp.t) >= self.d_translation
            or rotation_angle(rel_grasp.R) >= self.d_rotation
        ):
            self._moved_beyond_d = True

        ref = self._last_meas_pose if self._last_meas_pose is not None else T_grasp0
        rel = ref.inverse() @ T_ee
        if (
            np.linalg.norm(rel.t) < self.d_translation
            and rotation_angle(rel.R) < self.d_rotation
        ):
            return False

        k = len(self._states) + 1
        if theta_init is None:
            prev = self._states[-1] if self._states else 0
            theta_init = float(self.values[theta_var(prev)])
        self.values[theta_var(k)] = float(theta_init)
        self.values[pose_a_var(k)] = T_ee
        self.values[pose_b_var(k)] = T_grasp0
        noise_k = NoiseModel.isotropic(self.sigma_kinematic, 6)
        noise_a = NoiseModel.isotropic(self.sigma_articulation, 6)
        self.factors.append(ArticulationFactor(k, noise_a))
        self.factors.append(KinematicFactor(pose_a_var(k), T_ee, noise_k))
        self.factors.append(KinematicFactor(pose_b_var(k), T_grasp0, noise_k))
        self._states.append(k)
        self._measurements[k] = (T_ee, T_grasp0)
        self._virgin_thetas.add(theta_var(k))
        self._last_meas_pose = T_ee
        self._n_kin_since_opt += 1
        return True

    def add_force_factor(self, m: ForceMeasurement) -> None:
        """Append a force-plane factor built from the current twist estimate."""
        if np.linalg.norm(m.force) <= self.force_threshold:
            raise BelowThreshold(
                f"|F| = {np.linalg.norm(m.force):.3f} <= threshold {self.force_threshold}"
            )
        if self._states or self._moved_beyond_d:
            raise MovedSinceGrasp("part moved beyond d since grasp")
        noise = NoiseModel.isotropic(self.sigma_force, 3)
        self.factors.append(ForcePlaneFactor.from_estimate(m, self.values[XI], noise))
        self._n_force_factors += 1
        self._force_pending = True

    def should_reoptimize(self) -> bool:
        return self._n_kin_since_opt >= self.reoptimize_every or self._force_pending

    # ------------------------------------------------------------------
    # Estimate access
    # ------------------------------------------------------------------

    def xi_estimate(self) -> Twist:
        return Twist.from_array(self.values[XI])

    def theta_estimate(self, k: int | None = None) -> float:
        if k is None:
            k = self._states[-1] if self._states else 0
        return float(self.values[theta_var(k)])

    @property
    def n_states(self) -> int:
        return len(self._states)

    @property
    def n_force_factors(self) -> int:
        return self._n_force_factors

    @property
    def n_affordance_factors(self) -> int:
        return 0 if self._aff_points is None else len(self._aff_points)

    @property
    def moved_beyond_trigger(self) -> bool:
        """True once the part has moved at least the trigger distance since
        grasp; force factors are no longer admissible then."""
        return self._moved_beyond_d

    # ------------------------------------------------------------------
    # Initialization
    # ------------------------------------------------------------------

    def _measured_taus(self) -> dict[int, np.ndarray]:
        taus = {}
        for k in self._states:
            T_ee, T_g0 = self._measurements[k]
            try:
                taus[k] = boxminus(T_ee, T_g0)
            except AngleNearPi:
                continue
        return taus

    def _kinematic_seed(self) -> np.ndarray | None:
        """Unit twist from the principal direction of the measured relative
        poses, sign-aligned with the largest displacement.

        For a screw motion every log(T_B^-1 T_A) is exactly theta_k * xi, so
        the leading singular vector is the total-least-squares direction and
        improves as measurements accumulate. Unit scale keeps the weak prior
        as a meaningful anchor of the xi <-> theta scale gauge (a seed at
        millimeter scale would leave the gauge nearly flat and let the solver
        drift toward xi = 0 with exploding thetas).
        """
        taus = self._measured_taus()
        if not taus:
            return None
        M = np.stack(list(taus.values()))
        norms = np.linalg.norm(M, axis=1)
        if norms.max() < 1e-9:
            return None
        _, _, Vt = np.linalg.svd(M, full_matrices=False)
        u = Vt[0]
        if float(u @ M[int(np.argmax(norms))]) < 0.0:
            u = -u
        return u

    def _seed(self) -> None:
        # Without a flow prior, a force factor or an explicit prior, nothing
        # anchors the (xi, theta) <-> (-xi, -theta) gauge or its scale, so the
        # seed is recomputed from all data each solve; otherwise the first
        # seed stands and later solves warm-start.
        anchored = (
            self._aff_points is not None
            or self._n_force_factors > 0
            or self._explicit_prior is not None
        )
        seed = None
        if not self._xi_seeded or (not anchored and self._states):
            if self._mean_flow is not None:
                from .factors import FLOW_THETA

                v = self._mean_flow / FLOW_THETA
                if np.linalg.norm(v) > 1e-9:
                    seed = np.concatenate([v, np.zeros(3)])
            if seed is None:
                seed = self._kinematic_seed()
            if seed is not None:
                self.values[XI] = seed
                self._virgin_thetas = {theta_var(k) for k in self._states}
            self._xi_seeded = True
        if self._prior is None:
            mean = self._explicit_prior
            if mean is None:
                # Weak prior anchored at the data-derived seed: fixes the
                # scale gauge without adding directional information.
                mean = ArticulationState(Twist.from_array(self.values[XI].copy()), 0.0)
            self._prior = PriorFactor(mean, NoiseModel.isotropic(self.prior_sigma, 7))
            self.factors.append(self._prior)
        elif seed is not None and self._explicit_prior is None:
            self._prior.mean = ArticulationState(Twist.from_array(seed.copy()), 0.0)
        xi = self.values[XI]
        xi_sq = float(xi @ xi)
        if xi_sq > 1e-12 and self._virgin_thetas:
            taus = self._measured_taus()
            for var in sorted(self._virgin_thetas, key=lambda v: v.k):
                if var.k in taus:
                    self.values[var] = float(taus[var.k] @ xi) / xi_sq
        self._virgin_thetas.clear()

    # ------------------------------------------------------------------
    # Linearization and cost
    # ------------------------------------------------------------------

    def _iter_regular_factors(self):
        for f in self.factors:
            if not isinstance(f, AffordanceFactor):
                yield f

    def whitened_cost(self, values=None) -> float:
        values = self.values if values is None else values
        cost = 0.0
        if self._aff_points is not None:
            r = affordance_batch_residual(values[XI], self._aff_points, self._aff_flows)
            cost += float(((r * self._aff_inv_sigmas) ** 2).sum())
        for f in self._iter_regular_factors():
            r = f.noise.whiten(f.residual(values))
            cost += float(r @ r)
        return cost

    def _assemble(self, values):
        """Normal-equation blocks at `values`.

        Returns (cost, H_SS, g_S, {k: (H_GG, H_SG, g_G)}).
        """
        H_SS = np.zeros((_S_DIM, _S_DIM))
        g_S = np.zeros(_S_DIM)
        groups: dict[int, list] = {
            k: [np.zeros((_G_DIM, _G_DIM)), np.zeros((_S_DIM, _G_DIM)), np.zeros(_G_DIM)]
            for k in self._states
        }
        cost = 0.0

        if self._aff_points is not None:
            r = affordance_batch_residual(values[XI], self._aff_points, self._aff_flows)
            J = affordance_batch_jacobian(values[XI], self._aff_points)
            rw = r * self._aff_inv_sigmas
            Jw = J * self._aff_inv_sigmas[:, :, None]
            H_SS[:6, :6] += np.einsum("nij,nik->jk", Jw, Jw)
            g_S[:6] += np.einsum("nij,ni->j", Jw, rw)
            cost += float((rw**2).sum())

        for f in self._iter_regular_factors():
            r, Js = linearize(f, values)
            cost += float(r @ r)
            J_S = None
            J_G = None
            k_group = None
            for var, J in Js.items():
                if var.kind == "xi":
                    if J_S is None:
                        J_S = np.zeros((r.shape[0], _S_DIM))
                    J_S[:, 0:6] = J
                elif var.kind == "theta" and var.k == 0:
                    if J_S is None:
                        J_S = np.zeros((r.shape[0], _S_DIM))
                    J_S[:, 6:7] = J
                else:
                    k_group = var.k
                    if J_G is None:
                        J_G = np.zeros((r.shape[0], _G_DIM))
                    if var.kind == "theta":
                        J_G[:, 0:1] = J
                    elif var.kind == "pose_a":
                        J_G[:, 1:7] = J
                    elif var.kind == "pose_b":
                        J_G[:, 7:13] = J
            if J_S is not None:
                H_SS += J_S.T @ J_S
                g_S += J_S.T @ r
            if J_G is not None:
                H_GG, H_SG, g_G = groups[k_group]
                H_GG += J_G.T @ J_G
                g_G += J_G.T @ r
                if J_S is not None:
                    H_SG += J_S.T @ J_G
        return cost, H_SS, g_S, groups

    def _retract(self, values, d_S, d_groups):
        new = dict(values)
        new[XI] = values[XI] + d_S[0:6]
        new[theta_var(0)] = float(values[theta_var(0)]) + d_S[6]
        for k, dk in d_groups.items():
            new[theta_var(k)] = float(values[theta_var(k)]) + dk[0]
            new[pose_a_var(k)] = values[pose_a_var(k)] @ se3_exp(dk[1:7])
            new[pose_b_var(k)] = values[pose_b_var(k)] @ se3_exp(dk[7:13])
        return new

    def _solve_damped(self, H_SS, g_S, groups, lam):
        """One damped normal-equation solve via group elimination."""
        damp_S = np.maximum(np.diag(H_SS), 1e-12)
        A_SS = H_SS + lam * np.diag(damp_S)
        rhs_S = -g_S.copy()
        eliminated = {}
        for k, (H_GG, H_SG, g_G) in groups.items():
            damp_G = np.maximum(np.diag(H_GG), 1e-12)
            A_GG = H_GG + lam * np.diag(damp_G)
            sol = np.linalg.solve(A_GG, np.hstack([g_G[:, None], H_SG.T]))
            AinvG_g, AinvG_HGS = sol[:, 0], sol[:, 1:]
            A_SS -= H_SG @ AinvG_HGS
            rhs_S += H_SG @ AinvG_g
            eliminated[k] = (A_GG, AinvG_g, AinvG_HGS)
        d_S = np.linalg.solve(A_SS, rhs_S)
        d_groups = {}
        for k, (A_GG, AinvG_g, AinvG_HGS) in eliminated.items():
            d_groups[k] = -AinvG_g - AinvG_HGS @ d_S
        return d_S, d_groups

    # ------------------------------------------------------------------
    # Optimization
    # ------------------------------------------------------------------

    def optimize(self, max_iterations: int = 100) -> MarginalReport:
        """Levenberg-Marquardt on the whitened cost.

        Terminates on relative cost decrease below 1e-9, gradient infinity
        norm below 1e-10, or `max_iterations` linear solves. A rank-deficient
        system beyond damping rescue is reported via the `singular` flag; the
        best damped iterate is kept.
        """
        self._seed()
        lam = 1e-4
        iterations = 0
        converged = False
        singular = False

        cost, H_SS, g_S, groups = self._assemble(self.values)
        while iterations < max_iterations:
            g_inf = max(
                float(np.abs(g_S).max(initial=0.0)),
                max((float(np.abs(g[2]).max(initial=0.0)) for g in groups.values()), default=0.0),
            )
            if g_inf < 1e-10:
                converged = True
                break
            try:
                d_S, d_groups = self._solve_damped(H_SS, g_S, groups, lam)
            except np.linalg.LinAlgError:
                lam *= 10.0
                iterations += 1
                if lam > 1e12:
                    singular = True
                    break
                continue
            iterations += 1
            try:
                candidate = self._retract(self.values, d_S, d_groups)
                new_cost = self.whitened_cost(candidate)
            except AngleNearPi:
                new_cost = np.inf
            if np.isfinite(new_cost) and new_cost < cost:
                decrease = cost - new_cost
                self.values = candidate
                lam = max(lam * 0.1, 1e-12)
                if decrease < 1e-9 * max(cost, 1e-300):
                    cost = new_cost
                    converged = True
                    break
                cost = new_cost
                _, H_SS, g_S, groups = self._assemble(self.values)
            else:
                lam *= 10.0
                if lam > 1e12:
                    singular = True
                    break

        self._n_kin_since_opt = 0
        self._force_pending = False
        sigma_xi, sigma_theta, marg_singular = self._marginals()
        return MarginalReport(
            sigma_xi=sigma_xi,
            sigma_theta=sigma_theta,
            iterations=iterations,
            final_cost=self.whitened_cost(),
            converged=converged,
            singular=singular or marg_singular,
        )

    def _marginals(self):
        """Marginal sigmas of xi and the newest theta from the undamped
        Gauss-Newton Hessian at the final linearization point."""
        _, H_SS, _, groups = self._assemble(self.values)
        A_SS = H_SS.copy()
        cached = {}
        singular = False
        for k, (H_GG, H_SG, _) in groups.items():
            try:
                AinvG_HGS = np.linalg.solve(H_GG, H_SG.T)
            except np.linalg.LinAlgError:
                AinvG_HGS = np.linalg.pinv(H_GG) @ H_SG.T
                singular = True
            A_SS -= H_SG @ AinvG_HGS
            cached[k] = (H_GG, H_SG)
        try:
            cov_S = np.linalg.inv(A_SS)
        except np.linalg.LinAlgError:
            cov_S = np.linalg.pinv(A_SS)
            singular = True
        diag_S = np.maximum(np.diag(cov_S), 0.0)
        sigma_xi = np.sqrt(diag_S[0:6])
        if self._states:
            k = self._states[-1]
            H_GG, H_SG = cached[k]
            try:
                H_GG_inv = np.linalg.inv(H_GG)
            except np.linalg.LinAlgError:
                H_GG_inv = np.linalg.pinv(H_GG)
                singular = True
            B = H_GG_inv @ H_SG.T
            cov_kk = H_GG_inv + B @ cov_S @ B.T
            sigma_theta = math.sqrt(max(float(cov_kk[0, 0]), 0.0))
        else:
            sigma_theta = math.sqrt(max(float(diag_S[6]), 0.0))
        return sigma_xi, sigma_theta, singular
