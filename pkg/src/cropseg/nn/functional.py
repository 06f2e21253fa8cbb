"""Forward/backward kernels for the layer types the segmentation network uses.

Tensors are ``(batch, channels, height, width)`` arrays.  Each ``*_forward``
returns ``(output, cache)`` and the matching ``*_backward`` consumes the cache.

Convolutions are evaluated as a sum of ``kh * kw`` channel-mixing matrix
products over shifted views of the zero-padded input, flattened per channel.
Working on the padded grid keeps every shifted operand a strided view (no
im2col copy); the ``kw - 1`` junk columns per row are cropped at the end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _channel_sums(x: np.ndarray) -> np.ndarray:
    # matmul with a ones vector is an order of magnitude faster than sum(axis=(0, 2, 3))
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    return (flat @ np.ones(flat.shape[-1], dtype=x.dtype)).sum(axis=0)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _padded_flat(x: np.ndarray, kh: int, kw: int):
    n, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    wp = w + 2 * pw
    flat = np.zeros((n, c, (h + 2 * ph) * wp + kw - 1), dtype=x.dtype)
    flat[:, :, :(h + 2 * ph) * wp].reshape(n, c, h + 2 * ph, wp)[:, :, ph:ph + h, pw:pw + w] = x
    return flat, wp


def _taps(weight: np.ndarray) -> np.ndarray:
    # contiguous (kh, kw, out, in); strided 2-d operands drop matmul off the BLAS path
    return np.ascontiguousarray(weight.transpose(2, 3, 0, 1))


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None):
    """Stride-1 cross-correlation (no kernel flip) with ``(k - 1) / 2`` zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-d tensor, got shape {x.shape}")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
    n, _, h, w = x.shape
    if kh == 1 and kw == 1:
        out = np.ascontiguousarray(weight[:, :, 0, 0]) @ x.reshape(n, c, h * w)
        if bias is not None:
            out += bias[:, None]
        return out.reshape(n, o, h, w), (x, None, weight, bias is not None)
    flat, wp = _padded_flat(x, kh, kw)
    length = h * wp
    taps = _taps(weight)
    out = np.zeros((n, o, length), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            out += taps[i, j] @ flat[:, :, s:s + length]
    out = out.reshape(n, o, h, wp)[..., :w]
    if bias is not None:
        out = out + bias[:, None, None]
    else:
        out = np.ascontiguousarray(out)
    return out, (flat, wp, weight, bias is not None)


def conv2d_backward(dout: np.ndarray, cache, need_input_grad: bool = True):
    """Returns ``(dx, dweight, dbias)``; ``dbias`` is None for bias-free convs."""
    src, wp, weight, has_bias = cache
    o, c, kh, kw = weight.shape
    n, _, h, w = dout.shape
    dbias = _channel_sums(dout) if has_bias else None
    if wp is None:
        x = src.reshape(n, c, h * w)
        d = dout.reshape(n, o, h * w)
        dweight = (d @ x.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 1, 1)
        wt = np.ascontiguousarray(weight[:, :, 0, 0].T)
        dx = (wt @ d).reshape(n, c, h, w) if need_input_grad else None
        return dx, dweight, dbias
    flat = src
    length = h * wp
    dpad = np.zeros((n, o, h, wp), dtype=dout.dtype)
    dpad[..., :w] = dout
    dpad = dpad.reshape(n, o, length)
    taps_t = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    dtaps = np.empty((kh, kw, o, c), dtype=weight.dtype)
    dflat = np.zeros_like(flat) if need_input_grad else None
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            view = flat[:, :, s:s + length]
            dtaps[i, j] = (dpad @ view.transpose(0, 2, 1)).sum(axis=0)
            if need_input_grad:
                dflat[:, :, s:s + length] += taps_t[i, j] @ dpad
    dweight = dtaps.transpose(2, 3, 0, 1).copy()
    dx = None
    if need_input_grad:
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        hp = h + 2 * ph
        dx = dflat[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, ph:ph + h, pw:pw + w]
        dx = np.ascontiguousarray(dx)
    return dx, dweight, dbias


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batch_norm_forward(x, gamma, beta, running_mean, running_var, *, train: bool,
                       eps: float = 1e-5, momentum: float = 0.1):
    """Per-channel normalization over (batch, height, width).

    Train mode normalizes with batch statistics and updates the running
    statistics in place (unbiased variance); infer mode uses the running ones.
    """
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"batch norm expects {gamma.shape[0]} channels, got {c}")
    if train:
        m = x.size // c
        mean = _channel_sums(x) / m
        centered = x - mean[:, None, None]
        var = _channel_sums(centered * centered) / m
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        centered = x - running_mean[:, None, None]
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[:, None, None]
    out = xhat * gamma[:, None, None] + beta[:, None, None]
    return out, (xhat, inv_std, gamma, train)


def batch_norm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, train = cache
    c = dout.shape[1]
    dbeta = _channel_sums(dout)
    dgamma = _channel_sums(dout * xhat)
    scale = (gamma * inv_std)[:, None, None]
    if not train:
        return dout * scale, dgamma, dbeta
    m = dout.size // c
    dx = scale * (dout - (dbeta / m)[:, None, None] - xhat * (dgamma / m)[:, None, None])
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# relu
# --------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    # gradient at exactly zero is zero
    return dout * mask


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions recorded by a 2x2/stride-2 max pool.

    ``flat[n, c, i, j]`` is the row-major index ``row * width + col`` of the
    maximum of window ``(i, j)`` in the pooled input plane.
    """

    flat: np.ndarray
    input_hw: tuple[int, int]

    @property
    def output_hw(self) -> tuple[int, int]:
        return self.flat.shape[2], self.flat.shape[3]

    def window_offsets(self) -> np.ndarray:
        """Position 0..3 of each argmax inside its window, row-major."""
        rows, cols = np.divmod(self.flat, self.input_hw[1])
        return (rows % 2) * 2 + (cols % 2)

    def validate(self) -> None:
        h2, w2 = self.output_hw
        h, w = self.input_hw
        if (h2 * 2, w2 * 2) != (h, w):
            raise ShapeError(f"indices of shape {self.flat.shape} cannot come from a {h}x{w} plane")
        rows, cols = np.divmod(self.flat, w)
        ii = np.arange(h2).reshape(1, 1, h2, 1)
        jj = np.arange(w2).reshape(1, 1, 1, w2)
        if np.any(self.flat < 0) or np.any(rows // 2 != ii) or np.any(cols // 2 != jj):
            raise ShapeError("pool index points outside its own window")


def _windows(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)


def _from_windows(win, h, w):
    n, c, h2, w2, _ = win.shape
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def max_pool_2x2(x: np.ndarray):
    """2x2 max pool, stride 2. Ties resolve to the first cell in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even spatial dims, got {h}x{w}")
    win = _windows(x)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ii = np.arange(h // 2).reshape(1, 1, -1, 1)
    jj = np.arange(w // 2).reshape(1, 1, 1, -1)
    flat = (2 * ii + local // 2) * w + 2 * jj + local % 2
    return out, PoolIndices(flat.astype(np.int64), (h, w))


def unpool_2x2(x: np.ndarray, idx: PoolIndices, out_h: int | None = None,
               out_w: int | None = None, *, validate: bool = True) -> np.ndarray:
    """Write each value at its recorded argmax cell; all other cells are zero."""
    h, w = idx.input_hw
    if (out_h is not None and out_h != h) or (out_w is not None and out_w != w):
        raise ShapeError(f"indices were recorded for {h}x{w}, asked for {out_h}x{out_w}")
    if x.shape != idx.flat.shape:
        raise ShapeError(f"unpool input {x.shape} does not match indices {idx.flat.shape}")
    if validate:
        idx.validate()
    win = np.zeros(x.shape + (4,), dtype=x.dtype)
    np.put_along_axis(win, idx.window_offsets()[..., None], x[..., None], axis=-1)
    return _from_windows(win, h, w)


def unpool_2x2_backward(dout: np.ndarray, idx: PoolIndices) -> np.ndarray:
    return np.take_along_axis(_windows(dout), idx.window_offsets()[..., None], axis=-1)[..., 0]


def max_pool_2x2_backward(dout: np.ndarray, idx: PoolIndices) -> np.ndarray:
    return unpool_2x2(dout, idx, validate=False)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def softmax_pixelwise(logits: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_cross_entropy(probs: np.ndarray, labels: np.ndarray, class_weights):
    """Mean over pixels of ``-w[label] * ln p[label]``.

    ``probs`` is ``(N, K, H, W)`` from :func:`softmax_pixelwise`, ``labels`` is
    ``(N, H, W)``.  Returns ``(loss, dlogits)``, the gradient being taken with
    respect to the logits that produced ``probs``.
    """
    weights = np.asarray(class_weights, dtype=probs.dtype)
    k = probs.shape[1]
    if weights.shape != (k,):
        raise ShapeError(f"expected {k} class weights, got {weights.shape}")
    if labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    lab = labels.astype(np.intp)[:, None]
    p_true = np.take_along_axis(probs, lab, axis=1)
    w = weights[labels][:, None]
    n = labels.size
    loss = float(-np.sum(w * np.log(np.maximum(p_true, PROB_FLOOR)), dtype=np.float64) / n)
    dlogits = probs.copy()
    np.put_along_axis(dlogits, lab, p_true - 1.0, axis=1)
    dlogits *= w / n
    return loss, dlogits
