"""Counterfactual outcome estimation for interacting units on a graph.

The package bundles a confounded trajectory simulator that can replay itself
under altered treatments (giving exact counterfactual ground truth), a latent
graph-dynamics model trained with adversarially balanced representations, and
the training/evaluation harness connecting the two.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DimensionError,
    DomainError,
    GodeflowError,
    GraphConstructionError,
    OptimStateError,
    ParameterError,
    SimulationError,
    SolveError,
    TrainingError,
)
from .graphs import (
    Graph,
    GraphPartition,
    build_graph,
    generate_synthetic_graph,
    interference_summary,
    neighbor_mean,
    partition_graph,
    read_edge_list,
    write_edge_list,
)
from .model import (
    ModelConfig,
    ModelParams,
    Normalization,
    decode_outcome,
    encode_initial,
    euler_solve,
    loss_interference,
    loss_outcome,
    loss_total,
    loss_treatment,
    ode_rhs,
    solve_trajectory,
)
from .simulator import (
    CounterfactualTrajectory,
    InterventionSpec,
    ObservationalDataset,
    SimParams,
    counterfactual_oracle,
    load_dataset,
    pkpd_derivative,
    sample_static_covariates,
    save_dataset,
    simulate_trajectory,
    treatment_probability,
    update_dose,
)
from .training import (
    EvalReport,
    TrainConfig,
    balance_diagnostics,
    evaluate_counterfactual,
    export_latents,
    generalization_eval,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
