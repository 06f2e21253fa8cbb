"""Deterministic synthetic field images with pixel-exact crop/weed/soil labels.

Soil is smooth brown noise; plants are clusters of 3-6 overlapping ellipses.
Crops are large and yellow-green, weeds small and blue-green; the two hue
ranges never overlap.  Plants are painted in random order, so later plants
overwrite earlier ones in both the image and the label mask.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .evaluation import CROP, SOIL, WEED


@dataclass(frozen=True)
class FieldParams:
    width: int = 128
    height: int = 96
    crop_count: tuple[int, int] = (1, 3)          # inclusive range
    crop_radius: tuple[float, float] = (7.0, 11.0)
    weed_count: tuple[int, int] = (2, 5)
    weed_radius: tuple[float, float] = (4.5, 6.5)
    soil_color: tuple[float, float, float] = (0.46, 0.35, 0.25)
    soil_noise: float = 0.06
    crop_hue: tuple[float, float] = (0.20, 0.29)
    weed_hue: tuple[float, float] = (0.36, 0.45)
    saturation: tuple[float, float] = (0.45, 0.75)
    value: tuple[float, float] = (0.35, 0.75)
    illumination: tuple[float, float] = (0.9, 1.1)
    preset: str = "home"
    seed: int = 0

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (self.crop_hue[1] < self.weed_hue[0] or self.weed_hue[1] < self.crop_hue[0]):
            raise ValueError("crop and weed hue ranges must be disjoint")
        for lo, hi in (self.crop_count, self.weed_count, self.crop_radius, self.weed_radius,
                       self.crop_hue, self.weed_hue, self.saturation, self.value,
                       self.illumination):
            if lo > hi:
                raise ValueError(f"empty range ({lo}, {hi})")


PRESETS = {
    "home": FieldParams(),
    # pale, stony grey soil under dimmer light with more weeds; plant hues
    # are unchanged, so only the soil/vegetation contrast moves
    "away": FieldParams(
        soil_color=(0.55, 0.52, 0.45),
        soil_noise=0.12,
        weed_count=(3, 7),
        value=(0.30, 0.62),
        illumination=(0.65, 0.85),
        preset="away",
    ),
}


def preset_params(name: str, seed: int = 0, width: int = 128, height: int = 96,
                  **overrides) -> FieldParams:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], seed=seed, width=width, height=height, **overrides)


@dataclass
class Sample:
    image: np.ndarray        # (H, W, 3) float in [0, 1]
    labels: np.ndarray       # (H, W) uint8 in {0, 1, 2}
    source_id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise ValueError(f"image {self.image.shape[:2]} and labels {self.labels.shape} differ")
        if self.labels.size and self.labels.max() > 2:
            raise ValueError("labels must lie in {0, 1, 2}")


def _soil(p: FieldParams, rng: np.random.Generator) -> np.ndarray:
    h, w = p.height, p.width
    coarse = rng.standard_normal((max(2, h // 12), max(2, w // 12), 3))
    zoom = (h / coarse.shape[0], w / coarse.shape[1], 1)
    smooth = ndimage.zoom(coarse, zoom, order=1)[:h, :w]
    brightness = smooth.mean(axis=-1, keepdims=True)
    fine = rng.standard_normal((h, w, 1))
    soil = np.asarray(p.soil_color) * (1.0 + p.soil_noise * (1.5 * brightness + 0.7 * fine))
    soil += 0.25 * p.soil_noise * smooth
    return np.clip(soil, 0.0, 1.0)


def _plant_shape(h, w, cy, cx, radius, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.8 * radius) ** 2
    for _ in range(int(rng.integers(3, 7))):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.3, 0.7) * radius
        ly, lx = cy + dist * np.sin(ang), cx + dist * np.cos(ang)
        a = rng.uniform(0.45, 0.7) * radius
        b = rng.uniform(0.25, 0.45) * radius
        c, s = np.cos(ang), np.sin(ang)
        u = (xx - lx) * c + (yy - ly) * s
        v = -(xx - lx) * s + (yy - ly) * c
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def _paint(p: FieldParams, hue_range, rng, n_pixels: int) -> np.ndarray:
    hue = rng.uniform(*hue_range)
    sat = rng.uniform(*p.saturation)
    val = rng.uniform(*p.value)
    hues = np.clip(hue + rng.uniform(-0.015, 0.015, n_pixels), *hue_range)
    sats = np.clip(sat * (1 + 0.1 * rng.standard_normal(n_pixels)), 0.05, 1.0)
    vals = np.clip(val * (1 + 0.12 * rng.standard_normal(n_pixels)), 0.05, 1.0)
    return np.array([colorsys.hsv_to_rgb(hh, ss, vv) for hh, ss, vv in zip(hues, sats, vals)])


def generate_field(p: FieldParams) -> Sample:
    """Render one labeled field image; identical params give identical output."""
    p.validate()
    rng = np.random.default_rng(p.seed)
    h, w = p.height, p.width
    image = _soil(p, rng)
    labels = np.full((h, w), SOIL, dtype=np.uint8)

    plants = [(CROP, p.crop_radius, p.crop_hue)] * int(rng.integers(p.crop_count[0], p.crop_count[1] + 1))
    plants += [(WEED, p.weed_radius, p.weed_hue)] * int(rng.integers(p.weed_count[0], p.weed_count[1] + 1))
    order = rng.permutation(len(plants))
    for k in order:
        cls, radius_range, hue_range = plants[k]
        radius = rng.uniform(*radius_range)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        mask = _plant_shape(h, w, cy, cx, radius, rng)
        n = int(mask.sum())
        if n == 0:
            continue
        image[mask] = _paint(p, hue_range, rng, n)
        labels[mask] = cls

    gain = rng.uniform(*p.illumination)
    image = np.clip(image * gain, 0.0, 1.0)
    return Sample(image, labels, f"{p.preset}-{p.seed:06d}")


def generate_dataset(preset: str, count: int, seed: int = 0, width: int = 128,
                     height: int = 96) -> list[Sample]:
    """``count`` samples with per-sample seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    out = []
    for i, s in enumerate(seeds):
        sample = generate_field(preset_params(preset, int(s), width, height))
        sample.source_id = f"{preset}-{seed}-{i:04d}"
        out.append(sample)
    return out
