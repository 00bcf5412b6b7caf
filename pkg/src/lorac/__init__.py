"""Contrastive pre-training laboratory with a low-rank-promoting prior.

A desk-scale, fully deterministic stack: a small reverse-mode tensor core
with a differentiable nuclear norm (backward U V^T), momentum query/key
encoders, a FIFO negative queue, the multi-query contrastive loss family
with pluggable priors over the stacked view matrix, a training harness,
and evaluation tooling (linear probe, held-out view-stack statistics).
"""

__version__ = "0.1.0"

from .data import (
    AugmentPolicy,
    Dataset,
    StreamKey,
    augment,
    gen_synthetic,
    load_dataset,
    make_views,
    save_dataset,
)
from .encoder import (
    EncoderPair,
    EncoderParams,
    forward_key,
    forward_query,
    make_encoder_pair,
    momentum_update,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    FormatError,
    GenerationError,
    NumericalError,
    ShapeError,
    TapeError,
)
from .evaluation import (
    ProbeConfig,
    ProbeResult,
    QHatStats,
    encode_dataset,
    grad_stationarity_report,
    linear_probe,
    qhat_stats,
)
from .linalg import SvdResult, jacobi_svd, nuclear_norm_value
from .losses import (
    PriorConfig,
    QMatrix,
    build_p,
    build_q,
    info_nce,
    lorac_batch_loss,
    lorac_bs_loss,
    lorac_instance_loss,
    loss_given_penalty,
    prior_log_penalty,
    prior_penalty_value,
    rewrite_consistency,
)
from .memory import NegativeQueue
from .tensor import (
    Tape,
    Tensor,
    backward,
    l2_normalize_rows,
    matmul,
    nuclear_norm,
    svd,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    TrainResult,
    TrainState,
    beta_at,
    cosine_lr,
    load_checkpoint,
    resume,
    save_checkpoint,
    train,
    train_step,
)
