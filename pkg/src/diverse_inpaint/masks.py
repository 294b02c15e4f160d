"""Mask synthesis and masking algebra.

Masks are ``B x 1 x H x W`` float tensors with 1 marking a valid (kept) pixel
and 0 marking a hole.
"""

import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskParams:
    square_size: int = 85
    stroke_count_range: Tuple[int, int] = (1, 4)
    stroke_width_range: Tuple[int, int] = (9, 20)
    vertex_count_range: Tuple[int, int] = (2, 6)
    target_ratio_bucket: Optional[Tuple[float, float]] = None
    max_retries: int = 200

    def __post_init__(self):
        for name in ("stroke_count_range", "stroke_width_range", "vertex_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise MaskError(f"{name}: empty range {lo}..{hi}")
        if self.stroke_width_range[0] < 1:
            raise MaskError("stroke_width_range: widths must be >= 1")
        if self.target_ratio_bucket is not None:
            lo, hi = self.target_ratio_bucket
            if not 0.0 <= lo <= hi <= 1.0:
                raise MaskError(f"target_ratio_bucket: bad interval {self.target_ratio_bucket}")

    @classmethod
    def for_resolution(cls, resolution: int, **overrides) -> "MaskParams":
        """Defaults tuned at 256 and scaled to ``resolution``."""
        scale = resolution / 256
        params = dict(
            square_size=max(1, round(85 / 256 * resolution)),
            stroke_width_range=(max(1, round(24 * scale)), max(2, round(56 * scale))),
        )
        params.update(overrides)
        return cls(**params)


def _randint(rng, lo, hi):
    """Uniform integer in [lo, hi] inclusive."""
    return int(torch.randint(lo, hi + 1, (1,), generator=rng))


def _uniform(rng, lo, hi):
    return lo + (hi - lo) * float(torch.rand(1, generator=rng, dtype=torch.float64))


def _as_mask(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32))[None, None]


def generate_square_mask(resolution: int, params: MaskParams, rng: torch.Generator) -> torch.Tensor:
    size = params.square_size
    if size >= resolution:
        raise MaskError(f"square_size {size} must be smaller than resolution {resolution}")
    top = _randint(rng, 0, resolution - size)
    left = _randint(rng, 0, resolution - size)
    mask = torch.ones(1, 1, resolution, resolution)
    mask[..., top:top + size, left:left + size] = 0.0
    return mask


def _draw_stroke(draw: ImageDraw.ImageDraw, resolution: int, params: MaskParams, rng) -> None:
    n_vertex = _randint(rng, *params.vertex_count_range)
    width = _randint(rng, *params.stroke_width_range)
    max_len = resolution / 4
    x, y = _uniform(rng, 0, resolution), _uniform(rng, 0, resolution)
    points = [(x, y)]
    angle = _uniform(rng, 0, 2 * math.pi)
    for _ in range(n_vertex):
        angle += _uniform(rng, -math.pi / 3, math.pi / 3)
        length = _uniform(rng, max_len / 4, max_len)
        x = min(max(x + length * math.cos(angle), 0), resolution - 1)
        y = min(max(y + length * math.sin(angle), 0), resolution - 1)
        points.append((x, y))
    draw.line(points, fill=0, width=width)
    r = width / 2
    for px, py in points:
        draw.ellipse((px - r, py - r, px + r, py + r), fill=0)


def generate_stroke_mask(resolution: int, params: MaskParams, rng: torch.Generator) -> torch.Tensor:
    """Free-form polyline strokes, the stand-in for a hand-drawn mask dataset.

    With ``target_ratio_bucket`` set, strokes are added one at a time until the
    hole ratio reaches the bucket floor; overshooting the ceiling discards the
    attempt.
    """
    bucket = params.target_ratio_bucket
    attempts = 1 if bucket is None else params.max_retries
    for _ in range(attempts):
        canvas = Image.new("L", (resolution, resolution), 255)
        draw = ImageDraw.Draw(canvas)
        if bucket is None:
            for _ in range(_randint(rng, *params.stroke_count_range)):
                _draw_stroke(draw, resolution, params, rng)
        else:
            lo, hi = bucket
            while _ratio_of(canvas) < lo:
                _draw_stroke(draw, resolution, params, rng)
        mask = _as_mask(np.asarray(canvas) >= 128)
        if bucket is None or bucket[0] <= mask_ratio(mask) <= bucket[1]:
            return mask
    raise MaskError(f"could not hit hole-ratio bucket [{bucket[0]}, {bucket[1]}] in {attempts} attempts")


def _ratio_of(canvas: Image.Image) -> float:
    return float((np.asarray(canvas) < 128).mean())


def combine_masks(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise MaskError(f"mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.minimum(a, b)


def apply_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if image.shape[-2:] != mask.shape[-2:] or mask.shape[1] != 1:
        raise MaskError(f"cannot apply mask {tuple(mask.shape)} to image {tuple(image.shape)}")
    return image * mask


def reverse_mask(mask: torch.Tensor) -> torch.Tensor:
    return 1.0 - mask


def mask_ratio(mask: torch.Tensor) -> float:
    """Fraction of hole pixels."""
    return float((mask == 0).sum()) / mask.numel()


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Hole-dominant pooling: an output cell is a hole if any covered pixel is."""
    h, w = mask.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise MaskError(f"factor {factor} does not divide mask size {h}x{w}")
    if factor == 1:
        return mask
    return -F.max_pool2d(-mask, factor)


def resize_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Hole-dominant resize to ``size`` (must divide the mask resolution)."""
    h = mask.shape[-1]
    if size <= 0 or h % size:
        raise MaskError(f"mask size {h} not divisible by target {size}")
    return downsample_mask(mask, h // size)


def default_training_mask(resolution: int, params: MaskParams, rng: torch.Generator) -> torch.Tensor:
    """Stroke mask combined with one random square, applied to every sample."""
    stroke = generate_stroke_mask(resolution, params, rng)
    return combine_masks(stroke, generate_square_mask(resolution, params, rng))


def load_mask_file(path, resolution: int = None) -> torch.Tensor:
    """Read an 8-bit single-channel mask image; pixels >= 128 are valid."""
    with Image.open(path) as img:
        img = img.convert("L")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.NEAREST)
        return _as_mask(np.asarray(img) >= 128)


def load_mask_dir(path, resolution: int) -> list:
    names = sorted(n for n in os.listdir(path) if not n.startswith("."))
    return [load_mask_file(os.path.join(path, n), resolution) for n in names]


def save_mask_file(mask: torch.Tensor, path) -> None:
    arr = (mask.reshape(mask.shape[-2:]).numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)
