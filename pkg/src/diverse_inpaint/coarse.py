"""Coarse inpainting stage: a small encoder-decoder biased towards blurry fills."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TrainConfig, build_seeded
from .masks import MaskParams, default_training_mask
from .losses import hole_valid_loss


class ResolutionError(ValueError):
    pass


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.LeakyReLU(0.2),
    )


class CoarseNet(nn.Module):
    """Four-level encoder-decoder with dilated bottleneck convs.

    Input is the masked image concatenated with its mask.
    """

    def __init__(self, resolution: int = 64, width: int = 16):
        super().__init__()
        self.resolution = resolution
        w = width
        self.enc = nn.ModuleList([
            _conv(4, w),
            _conv(w, 2 * w, stride=2),
            _conv(2 * w, 4 * w, stride=2),
            _conv(4 * w, 4 * w, stride=2),
        ])
        self.middle = nn.ModuleList([_conv(4 * w, 4 * w, dilation=d) for d in (2, 4, 2)])
        self.dec = nn.ModuleList([
            _conv(8 * w, 2 * w),
            _conv(4 * w, w),
            _conv(2 * w, w),
        ])
        self.to_rgb = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, masked, mask):
        x = torch.cat([masked, mask], dim=1)
        skips = []
        for layer in self.enc:
            x = layer(x)
            skips.append(x)
        for layer in self.middle:
            x = x + layer(x)
        for layer, skip in zip(self.dec, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = layer(torch.cat([x, skip], dim=1))
        return torch.tanh(self.to_rgb(x))


def coarse_inpaint(net: CoarseNet, masked, mask):
    if masked.shape[-1] != net.resolution or masked.shape[-2] != net.resolution:
        raise ResolutionError(
            f"coarse net expects {net.resolution}px input, got {tuple(masked.shape[-2:])}"
        )
    if mask.shape[-2:] != masked.shape[-2:]:
        raise ResolutionError(f"mask {tuple(mask.shape[-2:])} does not match image {tuple(masked.shape[-2:])}")
    raw = net(masked, mask)
    return raw * (1.0 - mask) + masked


def mask_params_from_config(cfg: TrainConfig) -> MaskParams:
    overrides = dict(
        stroke_count_range=(cfg.stroke_count_min, cfg.stroke_count_max),
        vertex_count_range=(cfg.vertex_count_min, cfg.vertex_count_max),
        max_retries=cfg.mask_retries,
    )
    if cfg.square_size:
        overrides["square_size"] = cfg.square_size
    if cfg.stroke_width_min and cfg.stroke_width_max:
        overrides["stroke_width_range"] = (cfg.stroke_width_min, cfg.stroke_width_max)
    return MaskParams.for_resolution(cfg.resolution, **overrides)


def sample_batch(images: torch.Tensor, batch_size: int, rng: torch.Generator) -> torch.Tensor:
    idx = torch.randint(0, images.shape[0], (batch_size,), generator=rng)
    return images[idx]


def sample_masks(n: int, resolution: int, params: MaskParams, rng) -> torch.Tensor:
    return torch.cat([default_training_mask(resolution, params, rng) for _ in range(n)], dim=0)


def train_coarse(images: torch.Tensor, cfg: TrainConfig, rng: torch.Generator, log=None):
    """Pure reconstruction training (no adversarial term).

    Returns the trained net and a stats dict with the per-step objective
    (``history``) and the hole L1 on a fixed probe set before and after
    training (``probe``).
    """
    if images.shape[0] == 0:
        raise ValueError("train_coarse: empty dataset")
    net = build_seeded(rng, CoarseNet, cfg.resolution, cfg.coarse_width)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.coarse_lr, betas=(0.5, 0.999))
    params = mask_params_from_config(cfg)
    probe_mask = sample_masks(images.shape[0], cfg.resolution, params, rng)
    probe = [probe_hole_l1(net, images, probe_mask)]
    history = []
    for step in range(cfg.coarse_steps):
        gt = sample_batch(images, cfg.batch_size, rng)
        mask = sample_masks(gt.shape[0], cfg.resolution, params, rng)
        raw = net(gt * mask, mask)
        hole, _ = hole_valid_loss(raw, gt, mask)
        loss = cfg.coarse_l1_weight * (raw - gt).abs().mean() + cfg.coarse_hole_weight * hole
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log is not None:
            log.write(f"{step},coarse_loss,{loss.item()!r}\n")
    net.eval()
    probe.append(probe_hole_l1(net, images, probe_mask))
    if log is not None:
        log.write(f"0,probe_hole_l1,{probe[0]!r}\n{cfg.coarse_steps},probe_hole_l1,{probe[1]!r}\n")
    return net, {"history": history, "probe": probe}


def probe_hole_l1(net, gt, mask) -> float:
    with torch.no_grad():
        hole, _ = hole_valid_loss(coarse_inpaint(net, gt * mask, mask), gt, mask)
    return hole.item()
