"""Dynamic filter-group pruning for small convolutional networks.

Learn filter groups with a Gumbel-softmax relaxation and a one-step unrolled
gradient, prune group channels in one shot, and compile the result into
grouped convolutions.
"""
from .compiler import CompiledModel, compile_model, count_pruned_params_flops, load, save
from .data import DatasetHandle, load_mnist
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DivergenceError,
    DomainError,
    DynPruneError,
    StructuralError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .grouping import (
    GroupLearnConfig,
    GroupParameters,
    alpha_gradient,
    group_learning_phase,
    group_regularizer,
    one_step_adapt,
    sample_alpha,
)
from .model import Model, NetworkSpec, build_toy_net, count_dense_params_flops
from .oracle import brute_force_study, channel_prune_baseline, enumerate_partitions, evaluate_partition
from .pipeline import PipelineConfig, run_pipeline
from .pruning import (
    GroupAssignment,
    PrunedStructure,
    compute_importance,
    discretize_alpha,
    find_redundant_channels,
    prune,
    prune_filters,
)
from .tensor import Tensor, backward

__version__ = "0.1.0"
