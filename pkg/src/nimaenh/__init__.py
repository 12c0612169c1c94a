"""Perceptual image enhancement with a learned no-reference quality penalty."""

__version__ = "0.1.0"

from .autodiff import (
    Expression,
    ShapeMismatchError,
    Tensor,
    const,
    evaluate,
    grad_check,
    gradient,
    inp,
    param,
)
from .checkpoint import (
    load_can,
    load_checkpoint,
    load_nima,
    save_can,
    save_checkpoint,
    save_nima,
)
from .data import (
    DatasetPair,
    RatedImage,
    degrade,
    haze_pair,
    make_datasets,
    read_image,
    synth_rating,
    tone_operator,
    write_image,
)
from .enhance import (
    CanConfig,
    CanModel,
    build_can,
    can_forward,
    perceptual_loss,
    receptive_field,
)
from .layers import (
    ConvLayer,
    InitSpec,
    conv2d,
    fully_connected,
    global_average_pool,
    init_parameters,
    leaky_relu,
    softmax,
    symmetric_pad,
)
from .optim import OptimizerState, adam_step, lr_schedule, momentum_step
from .quality import (
    EvalReport,
    NimaConfig,
    NimaModel,
    RatingDistribution,
    build_tiny_nima,
    emd,
    emd_train_loss,
    eval_metrics,
    nima_score,
    quality_penalty,
)
from .report import psnr
from .train import DivergenceError, TrainConfig, train_can, train_nima
