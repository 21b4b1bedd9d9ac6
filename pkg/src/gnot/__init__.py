"""Operator-learning transformer with softmax-free linear attention,
heterogeneous cross-attention over multiple input functions, and a
geometry-gated mixture-of-experts."""

from .attention import (
    merge_heads,
    normalized_attention_direct,
    normalized_attention_factored,
    softmax_attention_oracle,
    split_heads,
)
from .data import (
    Batch,
    DataStats,
    Dataset,
    Normalizer,
    Sample,
    batch_from_samples,
    gen_antiderivative,
    gen_multiscale,
    load_dataset,
    make_batches,
    make_dataset,
    save_dataset,
    split_samples,
)
from .encoding import (
    BoundaryShape,
    ConditionalEmbedding,
    DistributedFunction,
    Edges,
    ExtraFeatures,
    ParamVector,
    SlotSpec,
    encode_input,
    encode_queries,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    GnotError,
    ShapeError,
)
from .model import (
    GateNetwork,
    GnotBlock,
    GnotModel,
    ModelConfig,
    gate_weights,
    register_handcrafted_gate,
)
from .tensor import Tensor, concat, gelu, matmul, no_grad, softmax_lastdim, tensor
from .training import (
    AdamW,
    MetricReport,
    TrainConfig,
    TrainState,
    evaluate_model,
    load_checkpoint,
    mse_loss,
    one_cycle_lr,
    relative_l2,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
