"""Synthetic visual flow prior: generates point clouds with per-point flow
and log-sigma from a (possibly wrong) articulation, and reads/writes the
flow-cloud text format used to ingest externally produced predictions.

Flow vectors are the displacement of each surface point under the fixed
FLOW_THETA configuration increment of the reported twist; the per-axis
log-sigma values feed the per-point diagonal covariance diag(e^(2u)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factors import FLOW_THETA
from .screw import Twist
from .se3 import Pose, exp_se3


class ParseError(ValueError):
    """Malformed flow-cloud file; carries the offending 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InconsistentColumns(ParseError):
    """A data row does not have the required 10 columns."""


_HEADER = "x y z mask fx fy fz ux uy uz"


@dataclass
class FlowCloud:
    """Per-point visual prior: positions (base frame), articulated-part mask,
    predicted flow and per-axis log-sigma."""

    points: np.ndarray
    mask: np.ndarray
    flow: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        self.flow = np.asarray(self.flow, dtype=float).reshape(-1, 3)
        self.log_sigma = np.asarray(self.log_sigma, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class FlowCloudSpec:
    """Recipe for a synthetic cloud.

    `reported_xi` drives the generated flow; `true_xi` records what the
    simulated object actually does, so a mis-prediction scenario simply sets
    the two apart. The moving part is a planar rectangular panel: points are
    sampled uniformly over it, seeded and reproducible.
    """

    true_xi: Twist
    reported_xi: Twist
    panel_pose: Pose = field(default_factory=Pose.identity)
    panel_extents: tuple[float, float] = (0.6, 0.8)
    n_points: int = 1000
    noise_sigma: np.ndarray = field(default_factory=lambda: np.zeros(3))
    log_sigma: np.ndarray = field(default_factory=lambda: np.zeros(3))
    seed: int = 0

    def __post_init__(self):
        self.noise_sigma = np.asarray(self.noise_sigma, dtype=float)
        self.log_sigma = np.asarray(self.log_sigma, dtype=float)
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if (self.noise_sigma < 0).any():
            raise ValueError("noise_sigma must be non-negative")


def generate(spec: FlowCloudSpec) -> FlowCloud:
    """Sample panel points and their flow under the reported twist.

    Deterministic for a fixed seed. With zero noise the flow of every point
    is exactly the FLOW_THETA screw displacement of the reported twist, so
    the corresponding affordance residuals vanish.
    """
    rng = np.random.default_rng(spec.seed)
    w, h = spec.panel_extents
    local = np.zeros((spec.n_points, 3))
    local[:, 1] = rng.uniform(-w / 2, w / 2, size=spec.n_points)
    local[:, 2] = rng.uniform(-h / 2, h / 2, size=spec.n_points)
    points = local @ spec.panel_pose.R.T + spec.panel_pose.t

    T = exp_se3(spec.reported_xi.array, FLOW_THETA)
    flow = points @ T.R.T + T.t - points
    if spec.noise_sigma.any():
        flow = flow + rng.normal(size=(spec.n_points, 3)) * spec.noise_sigma
    log_sigma = np.tile(spec.log_sigma, (spec.n_points, 1))
    return FlowCloud(points, np.ones(spec.n_points, dtype=bool), flow, log_sigma)


def save_flow_cloud(cloud: FlowCloud, path) -> None:
    """Write the space-separated text format (one header line, one row per
    point); floats use repr precision so a round trip is lossless."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_HEADER + "\n")
        for p, m, f, u in zip(cloud.points, cloud.mask, cloud.flow, cloud.log_sigma):
            row = [*p, int(m), *f, *u]
            fh.write(" ".join(f"{v:d}" if isinstance(v, int) else f"{v:.17g}" for v in row))
            fh.write("\n")


def load_flow_cloud(path) -> FlowCloud:
    """Parse a flow-cloud file; raises ParseError with the offending line."""
    points, mask, flow, log_sigma = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split() != _HEADER.split():
        raise ParseError(1, f"expected header '{_HEADER}'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 10:
            raise InconsistentColumns(lineno, f"expected 10 columns, found {len(cols)}")
        try:
            values = [float(c) for c in cols]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if cols[3] not in ("0", "1"):
            raise ParseError(lineno, f"mask must be 0 or 1, found {cols[3]!r}")
        points.append(values[0:3])
        mask.append(bool(int(cols[3])))
        flow.append(values[4:7])
        log_sigma.append(values[7:10])
    return FlowCloud(np.array(points), np.array(mask), np.array(flow), np.array(log_sigma))
