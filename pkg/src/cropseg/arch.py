"""Encoder-decoder segmentation network and its analytic cost model.

Default layout (B = residual separable bottleneck, 16 channels)::

    encoder: conv5x5 B B B | pool | B B B | pool | B B B | pool | B B B | pool
    decoder: unpool | B B B | unpool | B B B | unpool | B B B | unpool | B B B
    head:    1x1 linear -> softmax

Pool ``i`` of the encoder hands its argmax indices to unpool ``5 - i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn import weights
from .nn.layers import Bottleneck, Conv2d, ConvBNReLU, Layer

PARAM_BUDGET = 30_000


class SpecError(ValueError):
    """A NetworkSpec violates one of its structural constraints."""


@dataclass(frozen=True)
class BottleneckSpec:
    depth_in: int = 16
    depth_mid: int = 8
    kernel: int = 5
    residual: bool = True

    def validate(self) -> None:
        if self.depth_mid * 2 != self.depth_in:
            raise SpecError(f"bottleneck mid depth {self.depth_mid} must halve {self.depth_in}")
        if self.kernel % 2 == 0:
            raise SpecError(f"bottleneck kernel must be odd, got {self.kernel}")


@dataclass(frozen=True)
class NetworkSpec:
    input_channels: int = 14
    num_classes: int = 3
    first_kernel: int = 5
    bottleneck: BottleneckSpec = field(default_factory=BottleneckSpec)
    # bottlenecks per encoder stage; the plain first conv sits in front of stage 0
    encoder_stages: tuple[int, ...] = (3, 3, 3, 3)
    decoder_stages: tuple[int, ...] = (3, 3, 3, 3)

    @property
    def depth(self) -> int:
        return self.bottleneck.depth_in

    def encoder_convs(self) -> int:
        return 1 + sum(self.encoder_stages)

    def decoder_convs(self) -> int:
        return sum(self.decoder_stages)

    def analytic_parameter_count(self) -> int:
        d, m, k = self.depth, self.bottleneck.depth_mid, self.bottleneck.kernel
        first = self.input_channels * d * self.first_kernel ** 2 + 2 * d
        block = (d * m + 2 * m * m * k + m * d) + 2 * (3 * m + d)
        head = d * self.num_classes + self.num_classes
        return first + block * (self.encoder_convs() - 1 + self.decoder_convs()) + head

    def validate(self, *, strict: bool = True) -> None:
        """Raise :class:`SpecError` naming the first violated constraint.

        ``strict`` additionally enforces the fixed 13/12 layer totals and
        the parameter budget; switch it off for ablation-sized variants.
        """
        self.bottleneck.validate()
        if self.input_channels < 1:
            raise SpecError("input_channels must be positive")
        if len(self.encoder_stages) != len(self.decoder_stages):
            raise SpecError("encoder and decoder must have the same number of levels "
                            "(each pool needs its symmetric unpool)")
        if self.first_kernel % 2 == 0:
            raise SpecError("first conv kernel must be odd")
        if not strict:
            return
        if self.encoder_convs() != 13:
            raise SpecError(f"encoder must have 13 conv layers, has {self.encoder_convs()}")
        if self.decoder_convs() != 12:
            raise SpecError(f"decoder must have 12 conv layers, has {self.decoder_convs()}")
        if len(self.encoder_stages) != 4:
            raise SpecError(f"expected 4 pool/unpool pairs, got {len(self.encoder_stages)}")
        n_bottlenecks = sum(self.encoder_stages) + sum(self.decoder_stages)
        if n_bottlenecks != 24:
            raise SpecError(f"24 of the 25 conv layers must be bottlenecks, got {n_bottlenecks}")
        if self.analytic_parameter_count() >= PARAM_BUDGET:
            raise SpecError(f"parameter count {self.analytic_parameter_count()} "
                            f"exceeds the budget of {PARAM_BUDGET}")


class SegmentationNetwork(Layer):
    """The network instance; activations are ``(batch, channels, height, width)``."""

    name = "network"

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        b = spec.bottleneck
        d = spec.depth

        def block():
            return Bottleneck(d, b.depth_mid, b.kernel, residual=b.residual, rng=rng, dtype=dtype)

        self.first = ConvBNReLU(spec.input_channels, d, spec.first_kernel, rng=rng, dtype=dtype)
        self.encoder = [[block() for _ in range(n)] for n in spec.encoder_stages]
        self.decoder = [[block() for _ in range(n)] for n in spec.decoder_stages]
        self.head = Conv2d(d, spec.num_classes, 1, bias=True, rng=rng, dtype=dtype)
        self._indices = []

    @property
    def levels(self) -> int:
        return len(self.encoder)

    def children(self):
        out: list[tuple[str, Layer]] = [("first", self.first)]
        for s, stage in enumerate(self.encoder):
            out += [(f"enc{s}.{i}", blk) for i, blk in enumerate(stage)]
        for s, stage in enumerate(self.decoder):
            out += [(f"dec{s}.{i}", blk) for i, blk in enumerate(stage)]
        out.append(("head", self.head))
        return out

    def bottlenecks(self) -> list[Bottleneck]:
        return [blk for stage in self.encoder + self.decoder for blk in stage]

    def set_residual(self, enabled: bool) -> None:
        for blk in self.bottlenecks():
            blk.residual = enabled

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise F.ShapeError(f"network expects (N, {self.spec.input_channels}, H, W) input, "
                               f"got {x.shape}")
        div = 2 ** self.levels
        if x.shape[2] % div or x.shape[3] % div:
            raise F.ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {div}")

    def features(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Decoder output just before the head."""
        self.check_input(x)
        y = self.first.forward(x, train)
        self._indices = []
        for stage in self.encoder:
            for blk in stage:
                y = blk.forward(y, train)
            y, idx = F.max_pool_2x2(y)
            self._indices.append(idx)
        for stage, idx in zip(self.decoder, reversed(self._indices)):
            y = F.unpool_2x2(y, idx, validate=False)
            for blk in stage:
                y = blk.forward(y, train)
        return y

    def logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.head.forward(self.features(x, train), train)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Per-pixel class probabilities, shape ``(N, num_classes, H, W)``."""
        return F.softmax_pixelwise(self.logits(x, train))

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Backpropagate a gradient w.r.t. the logits through the whole network."""
        d = self.head.backward(dlogits)
        for stage, idx in zip(reversed(self.decoder), self._indices):
            for blk in reversed(stage):
                d = blk.backward(d)
            d = F.unpool_2x2_backward(d, idx)
        for stage, idx in zip(reversed(self.encoder), reversed(self._indices)):
            d = F.max_pool_2x2_backward(d, idx)
            for blk in reversed(stage):
                d = blk.backward(d)
        return self.first.backward(d)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode probabilities; drops the backward caches afterwards."""
        probs = self.forward(x, train=False)
        self.clear_cache()
        return probs

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(unexpected)}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise F.ShapeError(f"{name}: expected {arr.shape}, got {state[name].shape}")
            arr[...] = state[name]


def build_network(spec: NetworkSpec | None = None, seed: int = 0, *,
                  dtype=np.float32, strict: bool = True) -> SegmentationNetwork:
    spec = spec or NetworkSpec()
    spec.validate(strict=strict)
    return SegmentationNetwork(spec, np.random.default_rng(seed), dtype=dtype)


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------

def _convs(layer: Layer) -> list[Conv2d]:
    if isinstance(layer, Conv2d):
        return [layer]
    return [c for _, child in layer.children() for c in _convs(child)]


def layer_macs(layer: Layer) -> int:
    """Multiply-accumulates per output position: sum of kh*kw*in*out over the convs."""
    total = 0
    for conv in _convs(layer):
        o, c, kh, kw = conv.params["weight"].shape
        total += kh * kw * c * o
    return total


def conv_weight_count(layer: Layer) -> int:
    return sum(conv.params["weight"].size for conv in _convs(layer))


def learnable_count(layer: Layer) -> int:
    return sum(arr.size for _, arr in layer.named_parameters())


def _extent(layer: Layer) -> tuple[int, int]:
    """Growth of the receptive field (rows, cols) from one layer at unit jump."""
    gh = gw = 0
    for conv in _convs(layer):
        kh, kw = conv.kernel
        gh += kh - 1
        gw += kw - 1
    return gh, gw


@dataclass
class LayerRecord:
    name: str
    kind: str
    out_shape: tuple[int, int, int]
    params: int
    macs_per_position: int
    rf: tuple[int, int]

    @property
    def macs(self) -> int:
        return self.macs_per_position * self.out_shape[0] * self.out_shape[1]


def layer_table(net: SegmentationNetwork, input_h: int = 384, input_w: int = 512) -> list[LayerRecord]:
    """Walk the network in execution order, tracking resolution and receptive field.

    The receptive field follows the encoder only; decoder rows repeat the
    final encoder value.
    """
    rows: list[LayerRecord] = []
    h, w = input_h, input_w
    rh = rw = 1
    jump = 1

    def add(name, kind, layer=None, channels=net.spec.depth, grow=True):
        nonlocal rh, rw
        if layer is not None and grow:
            gh, gw = _extent(layer)
            rh += gh * jump
            rw += gw * jump
        rows.append(LayerRecord(
            name, kind, (h, w, channels),
            learnable_count(layer) if layer is not None else 0,
            layer_macs(layer) if layer is not None else 0,
            (rh, rw)))

    add("first", "conv", net.first)
    for s, stage in enumerate(net.encoder):
        for i, blk in enumerate(stage):
            add(f"enc{s}.{i}", "bottleneck", blk)
        h, w = h // 2, w // 2
        rh += jump
        rw += jump
        jump *= 2
        add(f"pool{s + 1}", "pool")
    for s, stage in enumerate(net.decoder):
        h, w = h * 2, w * 2
        add(f"unpool{net.levels - s}", "unpool", grow=False)
        for i, blk in enumerate(stage):
            add(f"dec{s}.{i}", "bottleneck", blk, grow=False)
    add("head", "linear", net.head, channels=net.spec.num_classes, grow=False)
    return rows


def count_parameters(net: Layer) -> tuple[int, list[tuple[str, int]]]:
    """Learnable parameters (conv weights, biases, BN gamma/beta), total and per layer."""
    if isinstance(net, SegmentationNetwork):
        per_layer = [(name, learnable_count(layer)) for name, layer in net.children()]
    else:
        per_layer = [(net.name, learnable_count(net))]
    return sum(n for _, n in per_layer), per_layer


def count_flops(net: Layer, input_h: int = 384, input_w: int = 512):
    """Total multiply-accumulates for one image of the given size.

    Returns ``(total, per_layer)`` where ``per_layer`` holds
    ``(name, macs_per_position, macs)`` tuples.
    """
    if not isinstance(net, SegmentationNetwork):
        per_pos = layer_macs(net)
        total = per_pos * input_h * input_w
        return total, [(net.name, per_pos, total)]
    table = layer_table(net, input_h, input_w)
    per_layer = [(r.name, r.macs_per_position, r.macs) for r in table]
    return sum(r.macs for r in table), per_layer


def receptive_field_of(ops) -> tuple[int, int]:
    """Receptive field of a chain of ``(kernel_h, kernel_w, stride)`` operations.

    Uses ``r <- r + (k - 1) * j`` followed by ``j <- j * s``.
    """
    rh = rw = 1
    jump = 1
    for kh, kw, stride in ops:
        rh += (kh - 1) * jump
        rw += (kw - 1) * jump
        jump *= stride
    return rh, rw


def encoder_ops(net: SegmentationNetwork) -> list[tuple[int, int, int]]:
    ops = [(*c.kernel, 1) for c in _convs(net.first)]
    for stage in net.encoder:
        for blk in stage:
            ops += [(*c.kernel, 1) for c in _convs(blk)]
        ops.append((2, 2, 2))
    return ops


def receptive_field(net: SegmentationNetwork) -> tuple[int, int]:
    """Receptive field (height, width) of the encoder in input pixels."""
    return receptive_field_of(encoder_ops(net))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def spec_from_state(state: dict[str, np.ndarray]) -> NetworkSpec:
    """Recover the layout of a saved network from its tensor names and shapes."""
    try:
        first = state["first.conv.weight"]
        head = state["head.weight"]
        reduce_w = state["enc0.0.reduce.conv.weight"]
    except KeyError as exc:
        raise SpecError(f"weights lack tensor {exc}") from None
    kernel = next((v.shape[2] for k, v in state.items()
                   if k.startswith("enc0.0.") and k.endswith("conv.weight") and v.shape[2] > 1), 1)
    separable = "enc0.0.vertical.conv.weight" in state

    def stages(prefix):
        counts: dict[int, set[int]] = {}
        for k in state:
            if k.startswith(prefix):
                s, i = k[len(prefix):].split(".")[:2]
                counts.setdefault(int(s), set()).add(int(i))
        return tuple(len(counts[s]) for s in sorted(counts))

    if not separable:
        raise SpecError("only the factorized 5x1/1x5 bottleneck layout can be loaded")
    return NetworkSpec(input_channels=first.shape[1], num_classes=head.shape[0],
                       first_kernel=first.shape[2],
                       bottleneck=BottleneckSpec(depth_in=reduce_w.shape[1],
                                                 depth_mid=reduce_w.shape[0], kernel=kernel),
                       encoder_stages=stages("enc"), decoder_stages=stages("dec"))


def save_network(path, net: SegmentationNetwork) -> None:
    weights.save(path, net.state_dict())


def load_network(path, *, strict: bool = False) -> SegmentationNetwork:
    state = weights.load(path)
    net = build_network(spec_from_state(state), strict=strict)
    net.load_state_dict(state)
    return net
