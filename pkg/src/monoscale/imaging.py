"""Intrinsics normalization to a canonical pinhole camera and paired augmentation.

Pixel values live in [0, 1] as float32; 8-bit inputs are divided by 255. No
mean subtraction is applied anywhere in the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import cv2
import numpy as np

from .geometry import CANONICAL_CAMERA, CameraModel


class ImagingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NormalizedImage:
    pixels: np.ndarray  # float32 [H, W, 3] in [0, 1]
    provenance: Any = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


def to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255.0)
    return np.asarray(image, dtype=np.float32)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image[H, W, C]`` at float pixel coordinates; outside -> 0."""
    h, w = image.shape[:2]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.where(valid, xs - x0, 0).astype(image.dtype)[..., None]
    fy = np.where(valid, ys - y0, 0).astype(image.dtype)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out[~valid] = 0
    return out


def normalization_grid(source: CameraModel, target: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates for every target pixel: ``K_s K_t^-1 (u, v, 1)``.

    The map is axis-aligned, so it is written as scale-and-shift; with equal
    intrinsics the scale is exactly 1 and the grid hits pixel centers.
    """
    sx = source.focal_x / target.focal_x
    sy = source.focal_y / target.focal_y
    u = np.arange(target.width, dtype=np.float64)
    v = np.arange(target.height, dtype=np.float64)
    xs = source.principal_point[0] + sx * (u - target.principal_point[0])
    ys = source.principal_point[1] + sy * (v - target.principal_point[1])
    return np.broadcast_to(xs[None, :], (target.height, target.width)), np.broadcast_to(ys[:, None], (target.height, target.width))


def normalize(image: np.ndarray, source: CameraModel, target: CameraModel = CANONICAL_CAMERA, provenance: Any = None) -> NormalizedImage:
    """Rewarp ``image`` as if taken by ``target`` (pure intrinsic homography)."""
    img = image.pixels if isinstance(image, NormalizedImage) else image
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImagingError(f"expected an RGB image [H, W, 3], got shape {img.shape}")
    if img.shape[:2] != (source.height, source.width):
        raise ImagingError(f"image is {img.shape[1]}x{img.shape[0]} but source camera is {source.width}x{source.height}")
    xs, ys = normalization_grid(source, target)
    out = bilinear_sample(to_float(img), xs, ys)
    np.clip(out, 0.0, 1.0, out=out)
    return NormalizedImage(out.astype(np.float32, copy=False), provenance)


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation: float = math.radians(10.0)
    max_translation_frac: float = 0.10
    brightness_delta_range: tuple[float, float] = (-0.2, 0.2)
    contrast_factor_range: tuple[float, float] = (0.8, 1.2)
    hflip_probability: float = 0.5
    enabled: bool = True

    def __post_init__(self) -> None:
        lo, hi = self.brightness_delta_range
        if lo > hi:
            raise ValueError("brightness range is empty")
        lo, hi = self.contrast_factor_range
        if lo > hi or lo < 0:
            raise ValueError("contrast range is empty or negative")
        if not 0.0 <= self.hflip_probability <= 1.0:
            raise ValueError("hflip_probability must be in [0, 1]")
        if self.max_rotation < 0 or self.max_translation_frac < 0:
            raise ValueError("rotation/translation bounds must be non-negative")

    def to_dict(self) -> dict:
        return {
            "max_rotation": self.max_rotation,
            "max_translation_frac": self.max_translation_frac,
            "brightness_delta_range": list(self.brightness_delta_range),
            "contrast_factor_range": list(self.contrast_factor_range),
            "hflip_probability": self.hflip_probability,
            "enabled": self.enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        for k in ("brightness_delta_range", "contrast_factor_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class AugmentParams:
    contrast: float = 1.0
    brightness: float = 0.0
    flip: bool = False
    angle: float = 0.0  # radians, counter-clockwise
    shift: tuple[float, float] = (0.0, 0.0)  # pixels (x, y)


def derive_seed(global_seed: int, index: int) -> int:
    """Per-sample seed from (global seed, sample index); independent of worker layout."""
    return int(np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, int(index)]).generate_state(1)[0])


def draw_params(cfg: AugmentConfig, rng: np.random.Generator, size: tuple[int, int]) -> AugmentParams:
    """One random draw; ``size`` is (width, height) of the images."""
    if not cfg.enabled:
        return AugmentParams()
    w, h = size
    contrast = rng.uniform(*cfg.contrast_factor_range)
    brightness = rng.uniform(*cfg.brightness_delta_range)
    flip = bool(rng.random() < cfg.hflip_probability)
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    tx = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) * w
    ty = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) * h
    return AugmentParams(float(contrast), float(brightness), flip, float(angle), (float(tx), float(ty)))


def apply_params(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = np.array(image, dtype=np.float32, copy=True)
    if p.contrast != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = (out - mean) * np.float32(p.contrast) + mean
    if p.brightness != 0.0:
        out = out + np.float32(p.brightness)
    np.clip(out, 0.0, 1.0, out=out)
    if p.flip:
        out = np.ascontiguousarray(out[:, ::-1])
    if p.angle != 0.0 or p.shift != (0.0, 0.0):
        h, w = out.shape[:2]
        m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), math.degrees(p.angle), 1.0)
        m[:, 2] += p.shift
        out = cv2.warpAffine(out, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        np.clip(out, 0.0, 1.0, out=out)
    return out


def augment_sequence(images: Sequence[NormalizedImage | np.ndarray], cfg: AugmentConfig, rng_seed: int) -> list[NormalizedImage]:
    """Apply a single augmentation draw to every image (a pair or a whole window)."""
    imgs = [im if isinstance(im, NormalizedImage) else NormalizedImage(np.asarray(im, dtype=np.float32)) for im in images]
    if not cfg.enabled or not imgs:
        return imgs
    h, w = imgs[0].pixels.shape[:2]
    params = draw_params(cfg, np.random.default_rng(rng_seed), (w, h))
    return [NormalizedImage(apply_params(im.pixels, params), im.provenance) for im in imgs]


def augment_pair(a: NormalizedImage, b: NormalizedImage, cfg: AugmentConfig, rng_seed: int) -> tuple[NormalizedImage, NormalizedImage]:
    if a.shape != b.shape:
        raise ImagingError(f"pair images differ in shape: {a.shape} vs {b.shape}")
    out = augment_sequence([a, b], cfg, rng_seed)
    return out[0], out[1]


def stack_pair(a, b) -> np.ndarray:
    """Channel-concatenate two images, earlier frame first: [H, W, 6]."""
    pa = a.pixels if isinstance(a, NormalizedImage) else np.asarray(a)
    pb = b.pixels if isinstance(b, NormalizedImage) else np.asarray(b)
    if pa.shape != pb.shape or pa.ndim != 3 or pa.shape[2] != 3:
        raise ImagingError(f"cannot stack shapes {pa.shape} and {pb.shape}")
    return np.concatenate([pa, pb], axis=2)


def split_pair(stacked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return stacked[..., :3], stacked[..., 3:]
