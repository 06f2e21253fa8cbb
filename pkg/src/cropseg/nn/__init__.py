"""Minimal channels-last tensor engine: the layers the segmentation network needs."""
from .functional import (
    PoolIndices,
    ShapeError,
    batch_norm_backward,
    batch_norm_forward,
    conv2d_backward,
    conv2d_forward,
    max_pool_2x2,
    max_pool_2x2_backward,
    relu_backward,
    relu_forward,
    softmax_pixelwise,
    unpool_2x2,
    unpool_2x2_backward,
    weighted_cross_entropy,
)
from .layers import BatchNorm2d, Bottleneck, Conv2d, ConvBNReLU, Layer, ReLU
