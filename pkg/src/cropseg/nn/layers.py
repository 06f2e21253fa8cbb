"""Stateful layers wrapping the kernels in :mod:`cropseg.nn.functional`.

A layer owns named parameter arrays (``params``), their gradients (``grads``)
and non-learnable state (``buffers``).  ``forward`` caches what ``backward``
needs; ``backward`` fills ``grads`` and returns the gradient w.r.t. the input.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads.get(k)
        for cname, child in self.children():
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.buffers.items():
            yield prefix + k, v
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        self.grads = {}
        for _, child in self.children():
            child.zero_grad()

    def astype(self, dtype) -> "Layer":
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.grads = {}
        for _, child in self.children():
            child.astype(dtype)
        return self

    def clear_cache(self) -> None:
        self._cache = None
        for _, child in self.children():
            child.clear_cache()


class Conv2d(Layer):
    name = "conv"

    def __init__(self, in_ch: int, out_ch: int, kh: int, kw: int | None = None, *,
                 bias: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        kw = kh if kw is None else kw
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kh * kw
        std = np.sqrt(2.0 / fan_in)
        self.params["weight"] = (rng.standard_normal((out_ch, in_ch, kh, kw)) * std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.need_input_grad = True
        self._cache = None

    @property
    def kernel(self) -> tuple[int, int]:
        return self.params["weight"].shape[2:]

    @property
    def in_ch(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def out_ch(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x, train=False):
        out, self._cache = F.conv2d_forward(x, self.params["weight"], self.params.get("bias"))
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache, self.need_input_grad)
        self.grads["weight"] = dw
        if db is not None:
            self.grads["bias"] = db
        return dx

    def __repr__(self):
        kh, kw = self.kernel
        return f"Conv2d({self.in_ch}->{self.out_ch}, {kh}x{kw})"


class BatchNorm2d(Layer):
    name = "bn"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.batch_norm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train=train, eps=self.eps, momentum=self.momentum)
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = F.batch_norm_backward(dout, self._cache)
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        return dx


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        out, self._cache = F.relu_forward(x)
        return out

    def backward(self, dout):
        return F.relu_backward(dout, self._cache)


class ConvBNReLU(Layer):
    """Convolution, batch normalization and optional ReLU as one unit."""

    def __init__(self, in_ch, out_ch, kh, kw=None, *, relu=True, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kh, kw, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.relu = ReLU() if relu else None

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def forward(self, x, train=False):
        x = self.bn.forward(self.conv.forward(x, train), train)
        return self.relu.forward(x, train) if self.relu else x

    def backward(self, dout):
        if self.relu:
            dout = self.relu.backward(dout)
        return self.conv.backward(self.bn.backward(dout))

    def clear_cache(self):
        super().clear_cache()
        if self.relu:
            self.relu.clear_cache()


class Bottleneck(Layer):
    """Residual separable bottleneck.

    1x1 reduce -> BN -> ReLU -> kx1 -> BN -> ReLU -> 1xk -> BN -> ReLU
    -> 1x1 expand -> BN -> (+ input) -> ReLU
    """

    name = "bottleneck"

    def __init__(self, depth: int = 16, mid: int | None = None, kernel: int = 5, *,
                 residual: bool = True, separable: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        mid = depth // 2 if mid is None else mid
        self.depth, self.mid, self.kernel = depth, mid, kernel
        self.residual, self.separable = residual, separable
        self.reduce = ConvBNReLU(depth, mid, 1, rng=rng, dtype=dtype)
        if separable:
            self.vertical = ConvBNReLU(mid, mid, kernel, 1, rng=rng, dtype=dtype)
            self.horizontal = ConvBNReLU(mid, mid, 1, kernel, rng=rng, dtype=dtype)
        else:
            self.spatial = ConvBNReLU(mid, mid, kernel, kernel, rng=rng, dtype=dtype)
        self.expand = ConvBNReLU(mid, depth, 1, relu=False, rng=rng, dtype=dtype)
        self.out_relu = ReLU()

    def children(self):
        if self.separable:
            middle = [("vertical", self.vertical), ("horizontal", self.horizontal)]
        else:
            middle = [("spatial", self.spatial)]
        return [("reduce", self.reduce), *middle, ("expand", self.expand)]

    def convs(self) -> list[Conv2d]:
        return [c.conv for _, c in self.children()]

    def forward(self, x, train=False):
        y = x
        for _, unit in self.children():
            y = unit.forward(y, train)
        if self.residual:
            y = y + x
        return self.out_relu.forward(y, train)

    def backward(self, dout):
        d = self.out_relu.backward(dout)
        dy = d
        for _, unit in reversed(self.children()):
            dy = unit.backward(dy)
        return dy + d if self.residual else dy

    def clear_cache(self):
        super().clear_cache()
        self.out_relu.clear_cache()
