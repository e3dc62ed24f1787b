"""Collaborative local/non-local attention network for image restoration."""

from .attention import (
    AttentionTrace,
    ChannelAttentionParams,
    FusionParams,
    LocalAttentionParams,
    NonlocalParams,
    channel_attention,
    fuse_branches,
    heat_map,
    local_attention_submodule,
    nonlocal_attention,
)
from .config import (
    Paths,
    RunConfig,
    load_run_config,
    parse_run_config,
    save_run_config,
    serialize_run_config,
)
from .degrade import (
    DegradationSpec,
    Rng,
    add_awgn,
    add_hetero_gaussian,
    apply_degradation,
    jpeg_degrade,
    quality_scaled_table,
)
from .errors import (
    ColanetError,
    ConfigError,
    CorruptFileError,
    DegenerateStatisticsError,
    FormatError,
    GraphError,
    NumericError,
    ShapeError,
    UnsupportedVersionError,
)
from .imageio import load_image, save_image
from .metrics import MetricReport, evaluate_pairs, psnr, ssim
from .network import (
    ModelConfig,
    ModelWeights,
    build_weights,
    cab_forward,
    cola_forward,
    fem_basic,
    fem_enhanced,
    l2_loss,
    model_config_from_text,
    model_config_to_text,
    param_census,
    run_tiled,
)
from .patches import PatchGeometry, PatchSet, coverage_counts, fold, unfold
from .tensor import (
    GradCheckReport,
    ParamTensor,
    Tensor,
    activate,
    backward,
    batch_norm,
    conv2d,
    global_avg_pool,
    grad_check,
    linear,
    matmul,
    no_grad,
    softmax,
    zero_grads,
)
from .training import (
    Checkpoint,
    TrainConfig,
    adam_step,
    augment,
    augment_inverse,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
