"""Image folder ingestion, 8-bit image I/O and a procedural toy face generator."""

import os
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter, UnidentifiedImageError

from .core import seeded_rng


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    train: torch.Tensor
    test: torch.Tensor
    train_names: List[str] = field(default_factory=list)
    test_names: List[str] = field(default_factory=list)


def to_tensor(img: Image.Image, resolution: int) -> torch.Tensor:
    """Center-crop to square, resize, map to [-1, 1]; returns 1 x 3 x R x R."""
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != resolution:
        img = img.resize((resolution, resolution), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1)[None].contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """3 x H x W in [-1, 1] -> H x W x 3 uint8 via a linear map."""
    arr = ((image.detach().clamp(-1, 1) + 1) * 127.5).round()
    return arr.permute(1, 2, 0).to(torch.uint8).numpy()


def save_image(image: torch.Tensor, path) -> None:
    if image.dim() == 4:
        image = image[0]
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def load_image(path, resolution: int) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            return to_tensor(img, resolution)
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"cannot decode image {path}: {e}") from None


def ingest_dataset(path, resolution: int, split: float = 0.8) -> Dataset:
    if not os.path.isdir(path):
        raise DatasetError(f"not a directory: {path}")
    names = sorted(n for n in os.listdir(path) if not n.startswith("."))
    if not names:
        raise DatasetError(f"no images in {path}")
    images = torch.cat([load_image(os.path.join(path, n), resolution) for n in names], dim=0)
    n_train = int(round(len(names) * split))
    return Dataset(images[:n_train], images[n_train:], names[:n_train], names[n_train:])


def _rand(rng, lo, hi):
    return lo + (hi - lo) * float(torch.rand(1, generator=rng))


def _color(rng, base, spread):
    return tuple(int(np.clip(c + _rand(rng, -spread, spread), 0, 255)) for c in base)


def draw_toy_face(size: int, rng: torch.Generator) -> Image.Image:
    """A crude frontal 'face': background, hair, skin oval, eyes, brows, nose, mouth."""
    s = size / 64
    img = Image.new("RGB", (size, size), _color(rng, (120, 140, 160), 60))
    d = ImageDraw.Draw(img)
    cx, cy = size / 2 + _rand(rng, -3, 3) * s, size / 2 + _rand(rng, -2, 4) * s
    fw, fh = _rand(rng, 17, 22) * s, _rand(rng, 22, 27) * s
    hair = _color(rng, (70, 50, 35), 50)
    d.ellipse((cx - fw - 3 * s, cy - fh - 5 * s, cx + fw + 3 * s, cy + fh * 0.4), fill=hair)
    d.ellipse((cx - fw, cy - fh, cx + fw, cy + fh), fill=_color(rng, (215, 170, 140), 35))
    eye_y = cy - _rand(rng, 3, 7) * s
    eye_dx = _rand(rng, 6.5, 9) * s
    er = _rand(rng, 2, 3.2) * s
    iris = _color(rng, (60, 80, 90), 50)
    for sign in (-1, 1):
        ex = cx + sign * eye_dx
        d.ellipse((ex - er * 1.4, eye_y - er, ex + er * 1.4, eye_y + er), fill=(240, 240, 235))
        d.ellipse((ex - er * 0.7, eye_y - er * 0.7, ex + er * 0.7, eye_y + er * 0.7), fill=iris)
        by = eye_y - er - _rand(rng, 2, 4) * s
        d.line((ex - er * 1.6, by, ex + er * 1.6, by - sign * _rand(rng, -1, 1) * s), fill=hair,
               width=max(1, round(1.5 * s)))
    d.line((cx, eye_y + 2 * s, cx - 1.5 * s, cy + 5 * s, cx + 1.5 * s, cy + 5 * s),
           fill=_color(rng, (180, 130, 110), 20), width=max(1, round(s)))
    mouth_y = cy + _rand(rng, 10, 14) * s
    mw = _rand(rng, 4, 8) * s
    smile = _rand(rng, -2, 3) * s
    d.chord((cx - mw, mouth_y - 2 * s - smile, cx + mw, mouth_y + 2 * s + smile), 0, 180,
            fill=_color(rng, (170, 70, 80), 30))
    return img.filter(ImageFilter.GaussianBlur(radius=0.6 * s))


def make_toy_faces(path, n: int, size: int = 64, seed: int = 0) -> List[str]:
    os.makedirs(path, exist_ok=True)
    rng = seeded_rng(seed)
    names = []
    for i in range(n):
        name = f"face_{i:05d}.png"
        draw_toy_face(size, rng).save(os.path.join(path, name))
        names.append(name)
    return names
