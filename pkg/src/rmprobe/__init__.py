"""Probe the quality of learned representation manifolds.

Train small encoders, walk their inputs through increasingly strong
alterations, and summarise the resulting representation trajectories with
distance and spikiness statistics (D, D_RC, P_RC) and the combined RMQM score.
"""

from .alterations import AlterationPlan
from .datagen import Dataset, gen_blobs, gen_rings, load_idx
from .downstream import build_report, knn1_accuracy, pearson
from .encoders import EncoderSpec, Model, init_params, load_model, save_model
from .errors import (ConfigError, DegenerateError, FormatError, NumericError, RMProbeError,
                     ShapeError, UnboundVariableError)
from .metrics import measure, rmqm
from .trajectories import TrajectorySet, build_trajectories, read_trajectories, write_trajectories
from .training import OptimizerConfig, TrainConfig, train

__version__ = "0.1.0"
