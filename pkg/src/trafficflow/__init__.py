"""Traffic-aware radar scene flow: model, losses, synthetic data and tooling."""

from .geometry import (DegenerateGeometryError, GridSpec, PointCloud, SE3Transform, ShapeError,
                       SizeError)
from .kernels import BACKEND
from .losses import CameraModel, LossConfig, total_loss
from .metrics import MetricReport, ego_metrics, moving_static_metrics, overall_metrics
from .model import ModelConfig, TrafficAwareFlowNet, weighted_kabsch
from .od_stub import PillarBEVStub
from .pipeline import RunConfig, run_eval, run_training
from .synthworld import RadarFrame, ScenarioConfig, simulate_sequence

__version__ = "0.1.0"
