"""RGB image -> standardized 14-channel input volume.

Images are ``(H, W, 3)`` float arrays in [0, 1].  Derived channels are
``(H, W)`` float64 arrays.  The assembled volume is channel-first float32,
ready to be batched for the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .baselines import otsu_threshold

CHANNEL_NAMES = (
    "R", "G", "B",
    "ExG", "ExR", "CIVE", "NDI",
    "HUE", "SAT", "VAL",
    "dx_ExG", "dy_ExG", "lap_ExG", "EDGES",
)
RGB_CHANNELS = CHANNEL_NAMES[:3]
NETWORK_SIZE = (512, 384)  # width, height
CIVE_OFFSET = 18.78745

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
CANNY_LOW_RATIO = 0.4


def check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")
    return img.astype(np.float64, copy=False)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centred sampling and clamped borders."""
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (w, h) == (target_w, target_h):
        return img.copy()
    lo, hi, f = _axis_weights(h, target_h)
    f = f.reshape((-1,) + (1,) * (img.ndim - 1))
    top, bot = img[lo], img[hi]
    # a + f * (b - a) keeps constant regions exactly constant
    rows = top + f * (bot - top)
    lo, hi, f = _axis_weights(w, target_w)
    f = f.reshape((1, -1) + (1,) * (img.ndim - 2))
    left, right = rows[:, lo], rows[:, hi]
    return left + f * (right - left)


def compute_vegetation_indices(img: np.ndarray):
    """Return ``(ExG, ExR, CIVE, NDI)`` computed per pixel on [0, 1] RGB."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    exg = 2.0 * g - r - b
    exr = 1.4 * r - g
    cive = 0.881 * g - 0.441 * r - 0.385 * b - CIVE_OFFSET
    den = g + r
    safe = np.where(den > 0, den, 1.0)
    ndi = np.where(den > 0, (g - r) / safe, 0.0)
    return exg, exr, cive, ndi


def rgb_to_hsv(img: np.ndarray):
    """Return ``(hue, sat, val)``; hue in [0, 1), achromatic pixels get hue 0."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    val = img.max(axis=-1)
    delta = val - img.min(axis=-1)
    sat = np.where(val > 0, delta / np.where(val > 0, val, 1.0), 0.0)
    d = np.where(delta > 0, delta, 1.0)
    hue = np.select(
        [delta == 0, val == r, val == g],
        [0.0, ((g - b) / d) % 6.0, (b - r) / d + 2.0],
        default=(r - g) / d + 4.0,
    ) / 6.0
    hue = np.where(hue >= 1.0, hue - 1.0, hue)
    return hue, sat, val


def to_uint8(ch: np.ndarray) -> np.ndarray:
    """Min-max rescale to 0..255; constant channels map to 0."""
    lo, hi = float(ch.min()), float(ch.max())
    if hi <= lo:
        return np.zeros(ch.shape, dtype=np.uint8)
    return np.round((ch - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def canny_edges(ch: np.ndarray) -> np.ndarray:
    """Binary Canny edges of a channel rescaled to 8 bit.

    Hysteresis thresholds are ``(0.4 t, t)`` with ``t`` the Otsu threshold of
    the rescaled channel, so no global constant has to be tuned per field.
    """
    u8 = to_uint8(ch)
    otsu = otsu_threshold(u8.astype(np.float64))
    if otsu.degenerate:
        return np.zeros(ch.shape, dtype=np.float64)
    high = otsu.threshold
    edges = cv2.Canny(u8, CANNY_LOW_RATIO * high, high, L2gradient=True)
    return (edges > 0).astype(np.float64)


def exg_texture_channels(exg: np.ndarray):
    """Return Sobel x, Sobel y, Laplacian and Canny edges of the ExG channel."""
    exg = np.asarray(exg, dtype=np.float64)
    if exg.ndim != 2 or exg.shape[0] < 3 or exg.shape[1] < 3:
        raise ValueError(f"texture filters need a 2-d channel of at least 3x3, got {exg.shape}")
    dx = ndimage.correlate(exg, SOBEL_X, mode="nearest")
    dy = ndimage.correlate(exg, SOBEL_Y, mode="nearest")
    lap = ndimage.correlate(exg, LAPLACIAN, mode="nearest")
    return dx, dy, lap, canny_edges(exg)


def raw_channels(img: np.ndarray) -> list[np.ndarray]:
    """All 14 unstandardized channels in input-volume order."""
    img = check_rgb(img)
    exg, exr, cive, ndi = compute_vegetation_indices(img)
    hue, sat, val = rgb_to_hsv(img)
    return [img[..., 0], img[..., 1], img[..., 2], exg, exr, cive, ndi,
            hue, sat, val, *exg_texture_channels(exg)]


def _is_constant(ch: np.ndarray) -> bool:
    spread = float(ch.max() - ch.min())
    return spread <= 1e-9 * max(1.0, float(np.abs(ch).max()))


def standardize(ch: np.ndarray):
    """Zero mean / unit variance; constant channels become all zeros."""
    if _is_constant(ch):
        return np.zeros_like(ch), float(ch.mean()), 0.0
    mean = float(ch.mean())
    std = float(ch.std())
    return (ch - mean) / std, mean, std


@dataclass
class InputVolume:
    data: np.ndarray          # (channels, H, W) float32
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray           # 0 marks a constant channel

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]


def assemble_input_volume(img: np.ndarray, size: tuple[int, int] = NETWORK_SIZE,
                          channels: str = "all") -> InputVolume:
    """Resize to ``size`` (width, height) and stack standardized channels.

    ``channels="all"`` yields the 14-channel volume, ``"rgb"`` only R, G, B.
    """
    img = check_rgb(img)
    small = np.clip(resize_bilinear(img, *size), 0.0, 1.0)
    if channels == "all":
        raw, names = raw_channels(small), CHANNEL_NAMES
    elif channels == "rgb":
        raw, names = [small[..., k] for k in range(3)], RGB_CHANNELS
    else:
        raise ValueError(f"channels must be 'all' or 'rgb', got {channels!r}")
    out = np.empty((len(raw),) + raw[0].shape, dtype=np.float32)
    means = np.empty(len(raw))
    stds = np.empty(len(raw))
    for k, ch in enumerate(raw):
        z, means[k], stds[k] = standardize(ch)
        out[k] = z
    return InputVolume(out, names, means, stds)


def channel_count(channels: str) -> int:
    return {"all": len(CHANNEL_NAMES), "rgb": len(RGB_CHANNELS)}[channels]
