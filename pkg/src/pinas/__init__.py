"""Weight-sharing supernet training with cross-path consistency, linear
evaluation, architecture search, and ranking diagnostics on a numpy core.

Set PINAS_KERNEL_BACKEND=numpy to force the pure-numpy convolution kernels
(default "numba" uses the jit-compiled kernels when numba is importable).
"""

from .baselines import ModeOutcome, TrainerMode, apply_mode, mode_flags, run_mode, run_sweep
from .config import SCHEMA, RunConfig
from .diagnostics import (
    DriftSeries,
    SimilarityMatrix,
    default_probe_paths,
    feature_shift_matrix,
    parameter_drift,
    wasserstein1,
)
from .errors import (
    CollapseError,
    ConfigError,
    ContractError,
    GuardViolation,
    IngestionError,
    NumericError,
    PinasError,
    StateError,
)
from .linear_eval import LinearEvalConfig, eval_linear, make_head, train_linear
from .optim import SgdState, cosine_lr, sgd_step, step_decay_lr, zero_grads
from .pi import (
    AblationFlags,
    FeatureQueue,
    LossBreakdown,
    TeacherState,
    collapse_metric,
    collapse_threshold,
    cross_path_loss,
    ema_update,
    pi_train_step,
)
from .pipeline import run_pipeline
from .rundir import RunDirectory
from .search import (
    BenchmarkTable,
    OracleConfig,
    TrialRecord,
    evaluate_candidates,
    evolutionary_search,
    kendall_tau,
    ranking_report,
    select_ranking_set,
    skip_sensitivity,
    threshold_query,
    train_oracle,
)
from .seeding import step_stream, stream
from .space import (
    ArchEncoding,
    CellSpace,
    ChainSpace,
    arch_from_id,
    arch_id,
    enumerate_space,
    mutate,
    op_filter,
    parse_arch,
    render_arch,
    sample_uniform,
    space_size,
    toy_chain_space,
)
from .store import ParameterStore
from .supernet import (
    PathContext,
    Supernet,
    SupernetConfig,
    build_subnet,
    count_params,
    extract_subnet,
    recalibrate_bn,
)

__version__ = "0.1.0"
