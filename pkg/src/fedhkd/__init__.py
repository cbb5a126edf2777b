"""Deterministic federated-learning simulator with hyper-knowledge distillation."""

from ._accel import BACKEND
from .data import Dataset, PartitionSpec, gen_blobs, load_idx, partition_dirichlet, split_local
from .federation import (
    AlgoSpec,
    ClientUpdate,
    FederationState,
    OptimConfig,
    RoundConfig,
    aggregate_models,
    evaluate,
    local_loss,
    local_update,
    run_round,
    select_clients,
)
from .harness import (
    ExperimentConfig,
    RoundMetrics,
    load_checkpoint,
    parse_config,
    run_experiment,
    save_checkpoint,
    write_metrics,
)
from .hyperknowledge import (
    ClassHyperKnowledge,
    DpConfig,
    GlobalHyperKnowledge,
    aggregate_hk,
    compute_local_hk,
    min_sigma,
    privatize,
    sensitivity,
)
from .model import SplitModel, build_model, classify, clip_representation, extract, soft_target

__version__ = "0.1.0"
