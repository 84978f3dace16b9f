"""Deep-learning activity detection for grant-free NOMA, with classical baselines."""

from .analysis import calibration_curve, compute_auc, compute_metrics, coverage_bound, flops_dnn
from .baselines import ls_bomp, stomp
from .codes import CodeSet, build_factor_graph, select_musa_sequences
from .config import ExperimentConfig, load_config
from .datagen import ActivityModel, DataConfig, Dataset, generate_dataset
from .neural import Architecture, init_network, predict, train

__version__ = "0.1.0"
