"""Graph neural network surrogates for AC optimal power flow.

Grid cases and per-unit physics, DC/AC optimal power flow solvers, graph
signal processing on the electrical network, four imitation architectures
with exact gradients, a deterministic dataset pipeline and an evaluation
bench.
"""

from .datagen import Dataset, generate_dataset, load_dataset, save_dataset
from .electrical import build_admittance, injections, solve_power_flow
from .errors import CaseParseError, CaseValidationError, ContractError, DatasetError, TrainingError
from .evalbench import compile_predictor, evaluate_model, relative_rmse, run_comparison, timing_bench
from .graph_signal import Gso, build_gso, graph_convolution, graph_shift
from .grid_case import GridCase, bundled_case, load_case, parse_case
from .models import ARCHITECTURES, Model, ModelSpec, forward, backward, init_params, load_model, save_model
from .opf import check_feasibility, solve_acopf, solve_dcopf
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "CaseParseError", "CaseValidationError", "ContractError", "Dataset", "DatasetError",
    "GridCase", "Gso", "Model", "ModelSpec", "TrainConfig", "TrainingError", "backward", "build_admittance",
    "build_gso", "bundled_case", "check_feasibility", "compile_predictor", "evaluate_model", "forward",
    "generate_dataset", "graph_convolution", "graph_shift", "init_params", "injections", "load_case",
    "load_dataset", "load_model", "parse_case", "relative_rmse", "run_comparison", "save_dataset",
    "save_model", "solve_acopf", "solve_dcopf", "solve_power_flow", "timing_bench", "train",
]
