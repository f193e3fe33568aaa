"""Forward diffusion bridges via score learning on adjoint trajectories."""

from .adjoint import AdjointSystem, adjoint_expectation, build_adjoint, simulate_adjoint
from .bridge import (ExactBrownianScore, ExactOuScore, NetworkScore,
                     ScoreErrorReport, brownian_exact_score, ou_exact_score,
                     sample_bridge, score_error_report)
from .integrator import (BACKEND, SimulationError, TimeGrid, TrajectoryBatch,
                         read_csv, simulate, simulate_with_drift_offset,
                         write_csv)
from .models import (REGISTRY, SdeModel, UnknownModelError, make_brownian,
                     make_cell_model, make_model, make_ou)
from .scorenet import AdamState, ScoreNetwork
from .training import (EndpointSpec, TrainConfig, TrainingError, batch_loss,
                       em_transition_score, train, write_training_log)

__version__ = "0.1.0"

__all__ = [
    "AdjointSystem", "adjoint_expectation", "build_adjoint", "simulate_adjoint",
    "ExactBrownianScore", "ExactOuScore", "NetworkScore", "ScoreErrorReport",
    "brownian_exact_score", "ou_exact_score", "sample_bridge",
    "score_error_report", "BACKEND", "SimulationError", "TimeGrid",
    "TrajectoryBatch", "read_csv", "simulate", "simulate_with_drift_offset",
    "write_csv", "REGISTRY", "SdeModel", "UnknownModelError", "make_brownian",
    "make_cell_model", "make_model", "make_ou", "AdamState", "ScoreNetwork",
    "EndpointSpec", "TrainConfig", "TrainingError", "batch_loss",
    "em_transition_score", "train", "write_training_log", "__version__",
]
