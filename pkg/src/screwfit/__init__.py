"""Online screw-joint estimation for single-joint articulated objects.

A factor graph fuses a visual flow prior, force-plane constraints from
blocked pulls, and kinematic pose measurements into a twist + configuration
estimate, which drives a closed-loop opening controller against a simulated
compliant world.
"""

from .factors import FLOW_THETA, ForceMeasurement, NoiseModel
from .flow import FlowCloud, FlowCloudSpec, generate, load_flow_cloud, save_flow_cloud
from .graph import ArticulationGraph, MarginalReport
from .motion import ChainModel, OpeningSchedule, QPProblem, goal_pose, solve_ik, solve_qp
from .screw import ArticulationState, JointClass, Twist, classify, normalize, point_velocity, tangent_similarity
from .se3 import Pose, boxminus, exp_se3, exp_so3, hat3, se3_exp, se3_log
from .sim import ArticulatedObject, GraspContact, StepResult, World
from .runner import RunSummary, ScenarioConfig, TraceRecord, load_config, run_batch, run_scenario

__version__ = "0.1.0"

__all__ = [
    "FLOW_THETA",
    "ArticulatedObject",
    "ArticulationGraph",
    "ArticulationState",
    "ChainModel",
    "FlowCloud",
    "FlowCloudSpec",
    "ForceMeasurement",
    "GraspContact",
    "JointClass",
    "MarginalReport",
    "NoiseModel",
    "OpeningSchedule",
    "Pose",
    "QPProblem",
    "RunSummary",
    "ScenarioConfig",
    "StepResult",
    "TraceRecord",
    "Twist",
    "World",
    "boxminus",
    "classify",
    "exp_se3",
    "exp_so3",
    "generate",
    "goal_pose",
    "hat3",
    "load_config",
    "load_flow_cloud",
    "normalize",
    "point_velocity",
    "run_batch",
    "run_scenario",
    "save_flow_cloud",
    "se3_exp",
    "se3_log",
    "solve_ik",
    "solve_qp",
    "tangent_similarity",
]
