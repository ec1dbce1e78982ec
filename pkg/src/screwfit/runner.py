"""Closed-loop orchestration: scenario configs, the estimate-command-sense
loop wiring the flow prior, factor graph, motion generation and simulated
world together, plus trace logging, summaries and batch evaluation.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .factors import ForceMeasurement
from .flow import FlowCloud, FlowCloudSpec, generate
from .graph import ArticulationGraph
from .motion import ChainModel, OpeningSchedule, goal_pose, solve_ik
from .screw import Twist, classify, normalize, point_velocity, tangent_similarity
from .se3 import Pose, adjoint, rot_exp
from .sim import ArticulatedObject, GraspContact, World

SUMMARY_SCHEMA_VERSION = 1

TRACE_COLUMNS = [
    "step",
    "opt_index",
    "xi_vx",
    "xi_vy",
    "xi_vz",
    "xi_wx",
    "xi_wy",
    "xi_wz",
    "theta",
    "sigma3_vx",
    "sigma3_vy",
    "sigma3_vz",
    "sigma3_wx",
    "sigma3_wy",
    "sigma3_wz",
    "cost",
    "tangent_sim",
    "n_kin",
    "n_force",
    "class",
]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ObjectConfig:
    joint: str = "prismatic"
    axis: tuple = (1.0, 0.0, 0.0)
    axis_point: tuple = (0.0, 0.0, 0.0)
    theta_max: float = 0.3
    friction: float = 0.0
    base_position: tuple = (0.0, 0.0, 0.0)
    base_rotvec: tuple = (0.0, 0.0, 0.0)
    grasp_point: tuple = (0.0, 0.0, 0.0)
    stiffness: float = 400.0


@dataclass
class OracleConfig:
    n_points: int = 1000
    panel_center: tuple = (0.0, 0.0, 0.0)
    panel_extents: tuple = (0.6, 0.8)
    noise_sigma: tuple = (0.0, 0.0, 0.0)
    log_sigma: tuple = (-2.0, -2.0, -2.0)
    reported: str = "true"
    reported_v: tuple = (1.0, 0.0, 0.0)
    reported_w: tuple = (0.0, 0.0, 0.0)


@dataclass
class ThresholdConfig:
    force: float = 8.0
    translation: float = 0.002
    rotation_deg: float = 0.5
    reoptimize_every: int = 20


@dataclass
class MotionConfig:
    gv: float = 0.1
    dt: float = 0.05
    mode: str = "freeflyer"
    theta_goal_max: float | None = None
    chain_joints: int = 7


@dataclass
class NoiseConfig:
    sigma_kinematic: float = 1e-3
    sigma_articulation: float = 1e-2
    sigma_force: float = 1e-3
    prior_sigma: float = math.sqrt(10.0)


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    max_steps: int = 400
    success_fraction: float = 0.9
    run_closing_phase: bool = False
    object: ObjectConfig = field(default_factory=ObjectConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if not 0.0 < self.success_fraction <= 1.0:
            raise ValueError("success_fraction must be in (0, 1]")
        if self.object.joint not in ("prismatic", "revolute"):
            raise ValueError(f"unknown joint type {self.object.joint!r}")
        if self.oracle.reported not in ("true", "twist"):
            raise ValueError(f"unknown reported mode {self.oracle.reported!r}")
        if self.motion.mode not in ("freeflyer", "chain"):
            raise ValueError(f"unknown motion mode {self.motion.mode!r}")
        for label, value in (
            ("thresholds.force", self.thresholds.force),
            ("thresholds.translation", self.thresholds.translation),
            ("thresholds.rotation_deg", self.thresholds.rotation_deg),
            ("thresholds.reoptimize_every", self.thresholds.reoptimize_every),
        ):
            if value <= 0:
                raise ValueError(f"{label} must be positive")


_SECTION_TYPES = {
    "object": ObjectConfig,
    "oracle": OracleConfig,
    "thresholds": ThresholdConfig,
    "motion": MotionConfig,
    "noise": NoiseConfig,
}
_TOP_LEVEL_KEYS = {"name", "seed", "max_steps", "success_fraction", "run_closing_phase"}


def config_from_dict(data: dict) -> ScenarioConfig:
    """Build a ScenarioConfig from parsed TOML; unknown keys are hard errors."""
    top = {}
    sections = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            cls = _SECTION_TYPES[key]
            allowed = set(cls.__dataclass_fields__)
            unknown = set(value) - allowed
            if unknown:
                raise ValueError(f"unknown key(s) {sorted(unknown)} in [{key}]")
            sections[key] = cls(**{k: _coerce(v) for k, v in value.items()})
        elif key in _TOP_LEVEL_KEYS:
            top[key] = value
        else:
            raise ValueError(f"unknown top-level key {key!r}")
    return ScenarioConfig(**top, **sections)


def _coerce(value):
    return tuple(value) if isinstance(value, list) else value


def load_config(path) -> ScenarioConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


# ---------------------------------------------------------------------------
# Trace and summary records
# ---------------------------------------------------------------------------


@dataclass
class TraceRecord:
    step: int
    opt_index: int
    xi: np.ndarray
    xi_normalized: np.ndarray
    joint_class: str
    theta: float
    sigma3: np.ndarray
    sigma_theta: float
    cost: float
    tangent_sim: float
    n_kin: int
    n_force: int


@dataclass
class RunSummary:
    success: bool
    opening_fraction: float
    n_force_factors: int
    n_optimizations: int
    avg_opt_ms: float
    worst_opt_ms: float
    steps: int = 0
    error: str | None = None


def export_trace(records: list[TraceRecord], path) -> None:
    """Write the per-optimization trace CSV (header always present)."""
    lines = [",".join(TRACE_COLUMNS)]
    for r in records:
        cells = [
            str(r.step),
            str(r.opt_index),
            *(_fmt(v) for v in r.xi),
            _fmt(r.theta),
            *(_fmt(v) for v in r.sigma3),
            _fmt(r.cost),
            _fmt(r.tangent_sim),
            str(r.n_kin),
            str(r.n_force),
            r.joint_class,
        ]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v: float) -> str:
    return repr(float(v))


def load_trace(path) -> list[dict]:
    """Parse an exported trace CSV back into dicts (floats exact)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    if header != TRACE_COLUMNS:
        raise ValueError("unexpected trace header")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for col, cell in zip(header, cells):
            if col in ("step", "opt_index", "n_kin", "n_force"):
                row[col] = int(cell)
            elif col == "class":
                row[col] = cell
            else:
                row[col] = float(cell)
        out.append(row)
    return out


def export_summary(summary: RunSummary, path) -> None:
    payload = {
        "schema": SUMMARY_SCHEMA_VERSION,
        "success": summary.success,
        "opening_fraction": summary.opening_fraction,
        "n_force_factors": summary.n_force_factors,
        "n_optimizations": summary.n_optimizations,
        "avg_opt_ms": summary.avg_opt_ms,
        "worst_opt_ms": summary.worst_opt_ms,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Scenario assembly
# ---------------------------------------------------------------------------


def build_object(cfg: ObjectConfig) -> ArticulatedObject:
    axis = np.asarray(cfg.axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    if cfg.joint == "revolute":
        xi = Twist(-np.cross(axis, np.asarray(cfg.axis_point, dtype=float)), axis)
    else:
        xi = Twist(axis, np.zeros(3))
    base = Pose(rot_exp(np.asarray(cfg.base_rotvec, dtype=float)), np.asarray(cfg.base_position, dtype=float))
    return ArticulatedObject(
        xi=xi, base_pose=base, theta_range=(0.0, cfg.theta_max), friction=cfg.friction
    )


def true_twist_in_grasp_frame(world: World, T_grasp0: Pose) -> Twist:
    """Ground-truth twist expressed in the estimation (initial grasp) frame."""
    xi_w = adjoint(T_grasp0.inverse() @ world.obj.base_pose) @ world.obj.xi.array
    return Twist.from_array(xi_w)


def _build_cloud(cfg: ScenarioConfig, xi_true_est: Twist, seed: int) -> FlowCloud:
    oc = cfg.oracle
    if oc.reported == "true":
        reported = xi_true_est
    else:
        reported = Twist(np.asarray(oc.reported_v, float), np.asarray(oc.reported_w, float))
    spec = FlowCloudSpec(
        true_xi=xi_true_est,
        reported_xi=reported,
        panel_pose=Pose.from_translation(np.asarray(oc.panel_center, dtype=float)),
        panel_extents=tuple(oc.panel_extents),
        n_points=oc.n_points,
        noise_sigma=np.asarray(oc.noise_sigma, dtype=float),
        log_sigma=np.asarray(oc.log_sigma, dtype=float),
        seed=seed,
    )
    return generate(spec)


def build_flow_cloud(cfg: ScenarioConfig, seed: int | None = None) -> FlowCloud:
    """The cloud this scenario's run would start from (for export tooling)."""
    world = World(build_object(cfg.object))
    world.reset(GraspContact(point=np.asarray(cfg.object.grasp_point, float), stiffness=cfg.object.stiffness))
    T_g0 = world.ee_pose()
    xi_true = true_twist_in_grasp_frame(world, T_g0)
    return _build_cloud(cfg, xi_true, cfg.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


class _SimilarityTracker:
    """Accumulates ground-truth grasp velocity directions at each accepted
    kinematic measurement; scores the current estimate against them."""

    def __init__(self, T_grasp0: Pose):
        self.T_g0 = T_grasp0
        self.v_gt: list[np.ndarray] = []
        self.c_est: list[np.ndarray] = []

    def record(self, world: World):
        self.v_gt.append(world.valid_direction_world())
        self.c_est.append(self.T_g0.inverse().act(world.grasp_point_world()))

    def score(self, xi_est: Twist) -> float:
        if not self.v_gt:
            return float("nan")
        v_est = [self.T_g0.R @ point_velocity(xi_est, c) for c in self.c_est]
        if min(np.linalg.norm(v) for v in v_est) < 1e-12:
            return float("nan")
        return tangent_similarity(self.v_gt, v_est)


def run_scenario(cfg: ScenarioConfig, seed: int | None = None) -> tuple[RunSummary, list[TraceRecord]]:
    """Run the full pipeline on one scenario.

    Flow prior, affordance-only solve, then the closed loop: advance the goal
    configuration, command the goal pose (directly in free-flyer mode,
    through chain IK otherwise), step the world, feed kinematic measurements
    or an above-threshold blocked-pull force into the graph, re-optimize on
    the trigger policy, and stop at the success fraction or max_steps.
    Deterministic for a fixed config and seed; module errors after setup are
    captured into a failed summary.
    """
    seed = cfg.seed if seed is None else seed
    obj = build_object(cfg.object)
    world = World(obj)
    world.reset(GraspContact(point=np.asarray(cfg.object.grasp_point, float), stiffness=cfg.object.stiffness))
    T_g0 = world.ee_pose()
    xi_true_est = true_twist_in_grasp_frame(world, T_g0)

    graph = ArticulationGraph(
        prior_sigma=cfg.noise.prior_sigma,
        sigma_kinematic=cfg.noise.sigma_kinematic,
        sigma_articulation=cfg.noise.sigma_articulation,
        sigma_force=cfg.noise.sigma_force,
        force_threshold=cfg.thresholds.force,
        d_translation=cfg.thresholds.translation,
        d_rotation=math.radians(cfg.thresholds.rotation_deg),
        reoptimize_every=cfg.thresholds.reoptimize_every,
    )

    tracker = _SimilarityTracker(T_g0)
    records: list[TraceRecord] = []
    opt_times: list[float] = []

    def optimize_and_record(step: int):
        start = time.perf_counter()
        report = graph.optimize()
        opt_times.append((time.perf_counter() - start) * 1e3)
        xi = graph.xi_estimate()
        try:
            unit, _ = normalize(xi)
            xi_norm, klass = unit.array, classify(xi).value
        except ValueError:
            xi_norm, klass = np.full(6, np.nan), "degenerate"
        records.append(
            TraceRecord(
                step=step,
                opt_index=len(records),
                xi=xi.array.copy(),
                xi_normalized=xi_norm,
                joint_class=klass,
                theta=graph.theta_estimate(),
                sigma3=3.0 * report.sigma_xi,
                sigma_theta=report.sigma_theta,
                cost=report.final_cost,
                tangent_sim=tracker.score(xi),
                n_kin=graph.n_states,
                n_force=graph.n_force_factors,
            )
        )
        return report

    goal_max = cfg.motion.theta_goal_max
    if goal_max is None:
        goal_max = cfg.object.theta_max
    schedule = OpeningSchedule(gv=cfg.motion.gv, dt=cfg.motion.dt, bounds=(0.0, goal_max))

    chain = None
    q_chain = None
    if cfg.motion.mode == "chain":
        chain = ChainModel(n_joints=cfg.motion.chain_joints)
        q_chain = np.zeros(chain.n_joints)

    steps_done = 0
    peak_fraction = world.opening_fraction()
    error: str | None = None
    try:
        cloud = _build_cloud(cfg, xi_true_est, seed)
        graph.add_affordance_cloud(cloud)
        optimize_and_record(step=0)

        for step in range(1, cfg.max_steps + 1):
            steps_done = step
            theta_goal = schedule.advance()
            target = goal_pose(graph.xi_estimate(), theta_goal, T_g0)
            if chain is not None:
                ik = solve_ik(chain, q_chain, target)
                q_chain = ik.q
                command = chain.fk(q_chain)
            else:
                command = target
            result = world.step(command)

            if result.moved:
                if graph.maybe_add_kinematic(result.achieved_pose, T_g0):
                    tracker.record(world)
                    if graph.should_reoptimize():
                        optimize_and_record(step)
                        schedule.theta = graph.theta_estimate()
            else:
                force_norm = float(np.linalg.norm(result.reaction_force))
                if force_norm > cfg.thresholds.force and graph.n_states == 0 and not graph.moved_beyond_trigger:
                    m = ForceMeasurement(
                        force=T_g0.R.T @ result.reaction_force,
                        point=T_g0.inverse().act(world.grasp_point_world()),
                        index=graph.n_force_factors,
                    )
                    graph.add_force_factor(m)
                    optimize_and_record(step)
                    schedule.theta = graph.theta_estimate()

            peak_fraction = max(peak_fraction, world.opening_fraction())
            if peak_fraction >= cfg.success_fraction and not cfg.run_closing_phase:
                break
    except Exception as exc:  # noqa: BLE001 - failed runs become failed summaries
        error = f"{type(exc).__name__}: {exc}"

    # Success is judged on opening; a requested closing phase sweeps theta
    # back down afterwards without forfeiting the peak.
    summary = RunSummary(
        success=error is None and peak_fraction >= cfg.success_fraction,
        opening_fraction=peak_fraction,
        n_force_factors=graph.n_force_factors,
        n_optimizations=len(records),
        avg_opt_ms=float(np.mean(opt_times)) if opt_times else 0.0,
        worst_opt_ms=float(np.max(opt_times)) if opt_times else 0.0,
        steps=steps_done,
        error=error,
    )
    return summary, records


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------


@dataclass
class BatchReport:
    summaries: list[tuple[str, RunSummary]]
    success_rate: float
    mean_opt_ms: float
    worst_opt_ms: float

    def as_dict(self) -> dict:
        return {
            "schema": SUMMARY_SCHEMA_VERSION,
            "success_rate": self.success_rate,
            "mean_opt_ms": self.mean_opt_ms,
            "worst_opt_ms": self.worst_opt_ms,
            "scenarios": {name: asdict(s) for name, s in self.summaries},
        }


def _run_one(args):
    cfg, seed = args
    summary, records = run_scenario(cfg, seed=seed)
    return cfg.name, summary, records


def run_batch(
    configs: list[ScenarioConfig], parallelism: int = 1, seed: int | None = None
) -> tuple[BatchReport, dict[str, list[TraceRecord]]]:
    """Run several scenarios, optionally in parallel processes."""
    if not configs:
        raise ValueError("run_batch needs at least one config")
    jobs = [(cfg, seed) for cfg in configs]
    results = []
    if parallelism <= 1:
        results = [_run_one(job) for job in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_one, jobs))
    summaries = [(name, summary) for name, summary, _ in results]
    traces = {name: records for name, _, records in results}
    rate = float(np.mean([1.0 if s.success else 0.0 for _, s in summaries]))
    opt_avgs = [s.avg_opt_ms for _, s in summaries if s.n_optimizations]
    opt_worsts = [s.worst_opt_ms for _, s in summaries if s.n_optimizations]
    report = BatchReport(
        summaries=summaries,
        success_rate=rate,
        mean_opt_ms=float(np.mean(opt_avgs)) if opt_avgs else 0.0,
        worst_opt_ms=float(np.max(opt_worsts)) if opt_worsts else 0.0,
    )
    return report, traces
