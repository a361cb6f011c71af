"""Fast CPU text matching with stacked encode/align/fuse blocks."""

from .data import (
    Batch,
    EmbeddingTable,
    Example,
    LoadedData,
    Vocabulary,
    accuracy,
    build_vocab,
    builtin_dataset_spec,
    load_dataset,
    load_embeddings,
    make_batches,
    map_mrr,
    tokenize,
)
from .model import ModelConfig, Occlusion, TextMatcher, prediction_features
from .tensor import (
    MaskError,
    NonFiniteError,
    Parameter,
    RngTree,
    ShapeError,
    Tape,
    Tensor,
    backward,
    conv1d_same,
    dropout,
    gelu,
    he_init,
    masked_max,
    matmul,
    softmax_masked,
    weight_norm,
)
from .training import (
    Adam,
    DivergenceError,
    TrainConfig,
    clip_gradients,
    cross_entropy,
    ensemble_vote,
    evaluate,
    lr_at,
    train,
)
from .analysis import (
    BenchmarkReport,
    OcclusionResult,
    ablation_matrix,
    benchmark_inference,
    export_attention,
    occlusion_run,
    robustness_sweep,
)

__version__ = "0.1.0"
