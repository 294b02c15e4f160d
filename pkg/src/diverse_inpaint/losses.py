"""Training objectives for the inpainting generator and its critic."""

import math
from dataclasses import dataclass, fields
from typing import Callable, List, Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LossWeights
from .masks import resize_mask

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
DATA_RANGE = 2.0  # images live in [-1, 1]


class LossError(ValueError):
    pass


class FeatureExtractor(nn.Module):
    """Fixed random conv pyramid used in place of a pretrained VGG-19.

    Stage 1 runs at input resolution; every later stage halves the spatial
    size (down to 1x1) before its conv. Parameters never receive gradients.
    """

    def __init__(self, width: int = 8, stages: int = 5, layers: Optional[Sequence[int]] = None):
        super().__init__()
        chans = [3] + [width * min(2 ** i, 8) for i in range(stages)]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(stages)
        )
        for conv in self.convs:
            nn.init.normal_(conv.weight, 0.0, math.sqrt(2.0 / (9 * conv.in_channels)))
            nn.init.normal_(conv.bias, 0.0, 0.1)
        self.requires_grad_(False)
        self.layers = tuple(range(stages)) if layers is None else tuple(layers)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for i, conv in enumerate(self.convs):
            if i > 0 and x.shape[-1] > 1:
                x = F.avg_pool2d(x, 2)
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return [feats[i] for i in self.layers]


class IdentityExtractor(nn.Module):
    """Single 'layer' that returns its input; handy for reducing the feature losses to pixel losses."""

    def forward(self, x):
        return [x]


def _masked_mean_abs(a, b, m):
    count = m.sum() * a.shape[1]
    if count == 0:
        return a.new_zeros(())
    return ((a - b).abs() * m).sum() / count


def hole_valid_loss(out, gt, mask):
    """Per-region mean absolute error, normalised by that region's pixel count."""
    if out.shape != gt.shape:
        raise LossError(f"shape mismatch {tuple(out.shape)} vs {tuple(gt.shape)}")
    return _masked_mean_abs(out, gt, 1.0 - mask), _masked_mean_abs(out, gt, mask)


def _check_variants(out_variants, style_variants):
    if len(out_variants) != len(style_variants):
        raise LossError(
            f"{len(out_variants)} output variants but {len(style_variants)} style variants"
        )


def _features(fx, tensors):
    """Run ``fx`` once over a list of equally-shaped batches; returns per-tensor feature lists."""
    n = len(tensors)
    feats = fx(torch.cat(tensors, dim=0))
    return [list(f.chunk(n, dim=0)) for f in feats]


def _scale_masks(mask, feat):
    valid = resize_mask(mask, feat.shape[-1])
    return valid, 1.0 - valid


def perceptual_loss(out_variants, style_variants, out, gt, mask, fx) -> torch.Tensor:
    _check_variants(out_variants, style_variants)
    alpha = len(out_variants)
    per_layer = _features(fx, [out, gt, *out_variants, *style_variants])
    total = out.new_zeros(())
    for f in per_layer:
        valid, hole = _scale_masks(mask, f[0])
        for j in range(alpha):
            total = total + _masked_mean_abs(f[2 + j], f[2 + alpha + j], hole)
        total = total + _masked_mean_abs(f[0], f[1], valid)
    return total


def gram(feature: torch.Tensor) -> torch.Tensor:
    b, c, h, w = feature.shape
    flat = feature.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def style_loss(out_variants, style_variants, out, gt, mask, fx) -> torch.Tensor:
    _check_variants(out_variants, style_variants)
    alpha = len(out_variants)
    per_layer = _features(fx, [out, gt, *out_variants, *style_variants])
    total = out.new_zeros(())
    for f in per_layer:
        valid, hole = _scale_masks(mask, f[0])
        for j in range(alpha):
            total = total + (gram(f[2 + j] * hole) - gram(f[2 + alpha + j] * hole)).abs().mean()
        total = total + (gram(f[0] * valid) - gram(f[1] * valid)).abs().mean()
    return total


# -- structural similarity ----------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords**2 / (2 * sigma**2))
    return g / g.sum()


def _blur(x, win):
    c = x.shape[1]
    k = win.to(x.dtype)
    x = F.conv2d(x, k.reshape(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, k.reshape(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def ssim_terms(x, y, window_size=11, sigma=1.5, data_range=DATA_RANGE):
    """Per-sample mean SSIM and mean contrast-structure term (valid windows only)."""
    if x.shape != y.shape:
        raise LossError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < window_size:
        raise LossError(f"image {tuple(x.shape[-2:])} smaller than SSIM window {window_size}")
    win = gaussian_window(window_size, sigma, dtype=x.dtype)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mu_x**2
    syy = _blur(y * y, win) - mu_y**2
    sxy = _blur(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def max_ms_ssim_scales(resolution: int, window_size: int = 11) -> int:
    if resolution < window_size:
        return 0
    return min(len(MS_SSIM_WEIGHTS), int(math.floor(math.log2(resolution / window_size))) + 1)


def ms_ssim(x, y, scales=None, window_size=11, sigma=1.5) -> torch.Tensor:
    """Per-sample multi-scale SSIM with the first ``scales`` standard weights, renormalised.

    Per-scale terms are clamped to a small positive floor before the weighted
    geometric mean so anti-correlated inputs give ~0 instead of NaN.
    """
    res = min(x.shape[-2:])
    feasible = max_ms_ssim_scales(res, window_size)
    if scales is None:
        scales = feasible
    if scales < 1 or scales > feasible:
        raise LossError(
            f"{scales} MS-SSIM scales infeasible at {res}px with window {window_size}; "
            f"max feasible scales = {feasible}"
        )
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=x.dtype)
    weights = weights / weights.sum()
    log_terms = []
    for i in range(scales):
        s, cs = ssim_terms(x, y, window_size, sigma)
        term = s if i == scales - 1 else cs
        log_terms.append(torch.log(term.clamp(min=1e-6)) * weights[i])
        if i < scales - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return torch.exp(torch.stack(log_terms, 0).sum(0))


def ms_ssim_loss(out, gt, scales=None, window_size=11, sigma=1.5) -> torch.Tensor:
    return 1.0 - ms_ssim(out, gt, scales, window_size, sigma).mean()


# -- adversarial ----------------------------------------------------------------

def adv_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def adv_d_loss(real_scores, fake_scores, gp, lambda_gp: float) -> torch.Tensor:
    return fake_scores.mean() - real_scores.mean() + lambda_gp * gp


def gradient_penalty(critic: Callable, real, fake, rng: torch.Generator) -> torch.Tensor:
    if real.shape != fake.shape:
        raise LossError(f"shape mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=rng, dtype=real.dtype)
    interp = eps * real + (1 - eps) * fake
    if not interp.requires_grad:
        interp.requires_grad_(True)
    scores = critic(interp)
    grad = None
    if scores.requires_grad:
        grad = torch.autograd.grad(scores.sum(), interp, create_graph=True, allow_unused=True)[0]
    if grad is None:
        grad = torch.zeros_like(interp)
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


# -- totals ---------------------------------------------------------------------

GENERATOR_TERMS = ("adv_g", "ms_ssim", "style", "perceptual", "hole", "valid")


def total_loss(terms: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    coeff = {
        "adv_g": weights.lambda_adv,
        "ms_ssim": weights.lambda_ssim,
        "style": weights.lambda_sty,
        "perceptual": 1.0,
        "hole": weights.lambda_hole,
        "valid": weights.lambda_valid,
    }
    total = 0.0
    for name in GENERATOR_TERMS:
        value = torch.as_tensor(terms[name])
        if not torch.isfinite(value).all():
            raise LossError(f"non-finite loss term: {name}")
        total = total + coeff[name] * value
    return torch.as_tensor(total)


@dataclass
class LossReport:
    hole: float = 0.0
    valid: float = 0.0
    perceptual: float = 0.0
    style: float = 0.0
    ms_ssim: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    gp: float = 0.0
    total: float = 0.0

    def log_lines(self, step: int) -> str:
        return "".join(f"{step},{f.name},{getattr(self, f.name)!r}\n" for f in fields(self))
