"""Central finite-difference verification of analytic gradients (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .layers import Layer

DENOM_FLOOR = 1e-8


class MaxPool(Layer):
    """2x2 max pool as a layer so it can go through the checker."""

    def forward(self, x, train=False):
        out, self._idx = F.max_pool_2x2(x)
        return out

    def backward(self, dout):
        return F.max_pool_2x2_backward(dout, self._idx)


class Unpool(Layer):
    """Unpool with a fixed set of indices."""

    def __init__(self, indices: F.PoolIndices):
        super().__init__()
        self.indices = indices

    def forward(self, x, train=False):
        return F.unpool_2x2(x, self.indices)

    def backward(self, dout):
        return F.unpool_2x2_backward(dout, self.indices)


class SoftmaxCrossEntropy(Layer):
    """Softmax followed by weighted cross-entropy, reduced to a (1,) output."""

    def __init__(self, labels, weights):
        super().__init__()
        self.labels = labels
        self.weights = np.asarray(weights, dtype=np.float64)

    def forward(self, logits, train=False):
        loss, self._dlogits = F.weighted_cross_entropy(F.softmax_pixelwise(logits), self.labels,
                                                       self.weights)
        return np.array([loss])

    def backward(self, dout):
        return self._dlogits * dout[0]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> float:
    """Largest absolute deviation over the larger of the two tensors' magnitudes.

    Scaling by the whole tensor keeps entries whose true gradient is tiny
    (where central differences lose most of their digits to cancellation)
    from dominating the verdict.
    """
    if analytic.size == 0:
        return 0.0
    denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / denom


@dataclass
class GradCheckResult:
    max_error: float
    errors: dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return self.max_error


def finite_difference_check(layer: Layer, x: np.ndarray, perturbation: float = 1e-6, *,
                            train: bool = True, seed: int = 0) -> GradCheckResult:
    """Compare analytic input/parameter gradients with central differences.

    The scalar under test is ``sum(layer(x) * g)`` for a fixed random ``g``.
    Layer and input must be float64.
    """
    if not 1e-7 <= perturbation <= 1e-4:
        raise ValueError(f"perturbation must lie in [1e-7, 1e-4], got {perturbation}")
    x = np.array(x, dtype=np.float64)
    params = dict(layer.named_parameters())
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"parameter {name} is {p.dtype}; convert the layer with astype(np.float64)")

    out = layer.forward(x, train)
    # a stream of its own, so g never coincides with an input drawn from the same seed
    g = np.random.default_rng([seed, 7919]).standard_normal(out.shape)
    layer.zero_grad()
    dx = layer.backward(g)
    analytic = {"input": dx}
    analytic.update({k: v.copy() for k, v in layer.named_grads()})

    def objective() -> float:
        return float(np.sum(layer.forward(x, train) * g))

    def numeric(arr: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            up = objective()
            flat[i] = orig - perturbation
            down = objective()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * perturbation)
        return grad

    errors = {"input": relative_error(dx, numeric(x))}
    for name, p in params.items():
        errors[name] = relative_error(analytic[name], numeric(p))
    layer.clear_cache()
    return GradCheckResult(max(errors.values()), errors)
