"""Minimal numpy tensor engine: layers with explicit backward passes, optimizers, grad checking."""
from .functional import (
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    fc_backward,
    fc_forward,
    global_avgpool_backward,
    global_avgpool_forward,
    grl_backward,
    grl_forward,
    maxpool1d_backward,
    maxpool1d_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy,
)
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    BatchNorm,
    Conv1D,
    GlobalAvgPool,
    GradientReversal,
    LayerSpec,
    Linear,
    MaxPool1D,
    Module,
    Param,
    ReLU,
    ResidualBlock,
    Sequential,
    build_stack,
)
from .optim import SGD, Adam, Optimizer, make_optimizer
