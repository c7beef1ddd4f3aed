"""Dual-form token pruning for softmax attention."""

__version__ = "0.1.0"

from .attention import (  # noqa: E402
    DualGram,
    KernelParams,
    RopeParams,
    apply_rope,
    dual_weight_linear,
    dual_weight_relative_error,
    exp_kernel_log,
    gram,
    linear_attention_primal,
    softmax_attention,
)
from .errors import (  # noqa: E402
    ConfigError,
    ConsistencyError,
    DataError,
    DegenerateInputError,
    DualPruneError,
    FormatError,
    NumericRangeError,
    UnsupportedError,
)
from .metrics import (  # noqa: E402
    QueryMode,
    Scorer,
    ScoreVector,
    SimilarityBlock,
    SimilaritySpace,
    aggregate_query,
    duplication_block,
    magnitude_scores,
)
from .selection import (  # noqa: E402
    PruneConfig,
    SelectionResult,
    pc_mmr,
    random_select,
    sequential_mmr_additive,
    top_k,
)
from .tensor_io import (  # noqa: E402
    SynthSpec,
    TokenBatch,
    generate_synthetic_batch,
    load_batch,
    read_npy,
    save_batch,
    write_npy,
)
