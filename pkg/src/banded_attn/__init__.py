"""Multi-head attention with an exclusive, balanced band of causal distances per head."""

from .autograd import Tensor, finite_difference_check, masked_softmax_rows
from .bench import BenchResult, run_bench
from .errors import (
    CorpusError,
    InvalidArgumentError,
    NumericError,
    ShapeError,
    StateError,
    TrainingDivergedError,
    UnsupportedMaskError,
)
from .kernels import (
    AttentionConfig,
    AttentionOutput,
    banded_attention,
    banded_backward,
    banded_forward,
    dense_mha_forward,
    flops_count,
    masked_dense_forward,
)
from .lm import ModelConfig, TrainState, evaluate, load_checkpoint, load_corpus, save_checkpoint, train
from .metrics import MetricsReport, attention_entropy, entropy_bound, head_diversity, support_overlap
from .partition import (
    BandPartition,
    BandSpec,
    HeadMask,
    MaskVariant,
    allow,
    build_mask,
    compute_partition,
    eball_partition,
    head_support,
    pair_count,
    render_mask,
    verify_coverage,
)

__version__ = "0.1.0"
