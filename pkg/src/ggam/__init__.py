"""Grad-CAM guided channel-spatial attention lab.

A small double-precision autodiff engine, the channel-spatial attention
module, the gradient-guided attention loss, a synthetic fine-grained benchmark
with ground-truth part masks, and a seeded training/ablation harness.
"""

from .tensor import (
    Tensor,
    GradReport,
    create,
    no_grad,
    backward,
    zero_grad,
    grad_check,
)
from .attention import (
    AttentionParams,
    channel_weights,
    apply_channel,
    spatial_map,
    apply_spatial,
    attention_forward,
)
from .guidance import (
    GuidanceTarget,
    LossBreakdown,
    class_score,
    gradcam_weights,
    kl,
    ggam_loss,
    cross_entropy,
    total_loss,
    heatmap,
)
from .model import Model, ModelConfig, ForwardTrace, build
from .data import Dataset, DatasetSpec, Sample, generate, batches
from .trainer import (
    Hyperparams,
    RunMetrics,
    cosine_lr,
    sgd_step,
    train,
    evaluate,
    localization_score,
    ablation_grid,
    lambda_sweep,
)

__version__ = "0.1.0"
