"""Optimal-transport region matching between sketch and photo feature sets."""

from .core import DimensionError, FeatureSet, FormatError, gap, normalize_rows, read_pfs, write_pfs
from .diffgrad import DegeneracyError, flow_jacobian, flow_vjp, grad_check
from .metrics import LossConfig, baseline_distance, combined_distance, d_g, d_w, omega, region_distance
from .retrieval import ExperimentConfig, Gallery, run_experiment, score_gallery
from .synth import SceneObject, SceneSpec, generate_pair, mask_objects
from .train import EmbeddingParams, embed, train_step
from .transport import (ConvergenceError, FlowSolution, TransportProblem, problem_from_features, solve,
                        solve_reference)

__version__ = "0.1.0"
