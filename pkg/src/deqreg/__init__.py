"""Deep equilibrium models with regulated neural dynamics, at toy scale.

Numpy implementation of a single-layer DEQ classifier, its fixed-point
solvers, intermediate-state attacks, adversarial training with a
random-intermediate-state loss, and test-time entropy reduction.
"""
from .attacks import AttackSpec, pgd_attack, run_attack_grid, trades_inner_max
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, gen_dataset, load_csv_dataset
from .defense import DefenseConfig, early_state_select, entropy_reduction_solve
from .deq import DeqModel, SolverConfig, init_model, solve, spectral_rescale
from .metrics import EvalReport, build_eval_report, metric_dH, metric_P
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "Checkpoint", "Dataset", "DefenseConfig", "DeqModel", "EvalReport",
    "ExperimentConfig", "SolverConfig", "TrainConfig", "build_eval_report", "early_state_select",
    "entropy_reduction_solve", "gen_dataset", "init_model", "load_checkpoint", "load_config",
    "load_csv_dataset", "metric_P", "metric_dH", "parse_config", "pgd_attack", "run_attack_grid",
    "save_checkpoint", "solve", "spectral_rescale", "train_loop", "trades_inner_max",
]
