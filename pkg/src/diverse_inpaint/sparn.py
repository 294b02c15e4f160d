"""Region-normalised, spatially modulated generator and spectrally normalised critic."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .coarse import ResolutionError
from .masks import resize_mask

VARIANTS = ("sparn", "spade_decoder", "no_rn")


def region_standardize(x, mask, eps: float = 1e-5):
    """Standardise valid and hole pixels with their own per-sample, per-channel statistics.

    A region with no pixels in a sample contributes nothing; the other region
    then spans the whole map, so the result equals whole-map standardisation.
    """
    m = mask.detach().to(x.dtype)
    out = torch.zeros_like(x)
    for region in (m, 1.0 - m):
        n = region.sum(dim=(2, 3), keepdim=True).clamp(min=1.0)
        mean = (x * region).sum(dim=(2, 3), keepdim=True) / n
        var = ((x - mean) ** 2 * region).sum(dim=(2, 3), keepdim=True) / n
        out = out + region * (x - mean) * torch.rsqrt(var + eps)
    return out


class RegionNormLayer(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x, mask):
        return region_normalize(x, mask, self)


def region_normalize(features, mask_ds, layer: RegionNormLayer = None):
    if mask_ds.shape[-2:] != features.shape[-2:]:
        raise ResolutionError(
            f"mask {tuple(mask_ds.shape[-2:])} does not match features {tuple(features.shape[-2:])}"
        )
    eps = 1e-5 if layer is None else layer.eps
    out = region_standardize(features, mask_ds, eps)
    if layer is None:
        return out
    return out * layer.weight[None, :, None, None] + layer.bias[None, :, None, None]


class _MaskFree(nn.Module):
    """Adapts a plain norm layer to the ``norm(x, mask)`` call signature."""

    def __init__(self, norm):
        super().__init__()
        self.norm = norm

    def forward(self, x, mask):
        return self.norm(x)


def make_norm(variant: str, channels: int) -> nn.Module:
    if variant == "sparn":
        return RegionNormLayer(channels)
    if variant == "spade_decoder":
        return _MaskFree(nn.InstanceNorm2d(channels, affine=True))
    if variant == "no_rn":
        return _MaskFree(nn.BatchNorm2d(channels, affine=True))
    raise ValueError(f"unknown generator variant {variant!r}")


class Modulation(nn.Module):
    """Per-pixel (gamma, beta) maps predicted from the condition image."""

    def __init__(self, channels: int, cond_channels: int = 3, hidden: int = 32):
        super().__init__()
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, normalized, cond):
        h = self.shared(cond)
        return normalized * (1 + self.gamma(h)) + self.beta(h)


class SparnBlock(nn.Module):
    def __init__(self, cin: int, cout: int, variant: str = "sparn", hidden: int = 32):
        super().__init__()
        mid = min(cin, cout)
        self.norm1, self.mod1 = make_norm(variant, cin), Modulation(cin, hidden=hidden)
        self.conv1 = nn.Conv2d(cin, mid, 3, padding=1)
        self.norm2, self.mod2 = make_norm(variant, mid), Modulation(mid, hidden=hidden)
        self.conv2 = nn.Conv2d(mid, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x, cond, mask):
        h = self.conv1(F.leaky_relu(self.mod1(self.norm1(x, mask), cond), 0.2))
        h = self.conv2(F.leaky_relu(self.mod2(self.norm2(h, mask), cond), 0.2))
        return self.skip(x) + h


def sparn_block_forward(block: SparnBlock, features, condition_ds, mask_ds):
    if condition_ds.shape[-2:] != features.shape[-2:] or mask_ds.shape[-2:] != features.shape[-2:]:
        raise ResolutionError(
            f"condition {tuple(condition_ds.shape[-2:])} / mask {tuple(mask_ds.shape[-2:])} "
            f"must match features {tuple(features.shape[-2:])}"
        )
    return block(features, condition_ds, mask_ds)


class Generator(nn.Module):
    """Downsampling encoder over the masked image, then SPARN blocks from
    ``bottom`` px up to full resolution with encoder features added per scale."""

    def __init__(self, resolution: int = 64, width: int = 64, variant: str = "sparn",
                 bottom: int = 8, hidden: int = None):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown generator variant {variant!r}")
        self.resolution = resolution
        self.variant = variant
        hidden = hidden or width
        n_levels = int(round(math.log2(resolution // bottom))) + 1
        chans = [width * min(2 ** i, 4) for i in range(n_levels)]  # full res first
        self.enc = nn.ModuleList([nn.Conv2d(4, chans[0], 3, padding=1)])
        for i in range(1, n_levels):
            self.enc.append(nn.Conv2d(chans[i - 1], chans[i], 4, stride=2, padding=1))
        dec_chans = chans[::-1]
        self.blocks = nn.ModuleList(
            SparnBlock(dec_chans[i], dec_chans[min(i + 1, n_levels - 1)], variant, hidden)
            for i in range(n_levels)
        )
        self.to_rgb = nn.Conv2d(dec_chans[-1], 3, 3, padding=1)

    def forward(self, masked, cond, mask):
        x = torch.cat([masked, mask], dim=1)
        feats = []
        for conv in self.enc:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        feats = feats[::-1]
        x = feats[0]
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest") + feats[i]
            size = x.shape[-1]
            factor = self.resolution // size
            cond_ds = F.avg_pool2d(cond, factor) if factor > 1 else cond
            x = block(x, cond_ds, resize_mask(mask, size))
        return torch.tanh(self.to_rgb(F.leaky_relu(x, 0.2)))


def generate(gen: Generator, masked, style_condition, mask):
    if masked.shape != style_condition.shape or masked.shape[-2:] != mask.shape[-2:]:
        raise ResolutionError(
            f"shape mismatch: masked {tuple(masked.shape)}, condition "
            f"{tuple(style_condition.shape)}, mask {tuple(mask.shape)}"
        )
    if masked.shape[-1] != gen.resolution:
        raise ResolutionError(f"generator expects {gen.resolution}px, got {masked.shape[-1]}")
    return gen(masked, style_condition, mask)


# -- spectral normalisation ------------------------------------------------------

class SpectralState(nn.Module):
    """Running left/right singular vector estimates for one weight."""

    def __init__(self, rows: int, cols: int):
        super().__init__()
        self.register_buffer("u", F.normalize(torch.randn(rows), dim=0))
        self.register_buffer("v", F.normalize(torch.randn(cols), dim=0))


def _power_iterate(mat, state, iters):
    with torch.no_grad():
        u, v = state.u.to(mat.dtype), state.v.to(mat.dtype)
        for _ in range(iters):
            v = F.normalize(mat.t() @ u, dim=0, eps=1e-12)
            u = F.normalize(mat @ v, dim=0, eps=1e-12)
        state.u.copy_(u)
        state.v.copy_(v)


def estimate_sigma(weight, state):
    mat = weight.reshape(weight.shape[0], -1)
    # clones keep autograd's saved tensors intact when the state is updated later
    u, v = state.u.to(mat.dtype).clone(), state.v.to(mat.dtype).clone()
    return u @ mat @ v


def spectral_normalize(weight, state: SpectralState, iters: int = 1):
    """``weight / sigma_hat`` after ``iters`` power-iteration updates of ``state``."""
    if iters < 1:
        raise ValueError("spectral_normalize needs iters >= 1")
    if not torch.any(weight != 0):
        return weight
    _power_iterate(weight.detach().reshape(weight.shape[0], -1), state, iters)
    return weight / estimate_sigma(weight, state)


class SNConv2d(nn.Conv2d):
    def __init__(self, *args, warmup_iters: int = 50, **kwargs):
        super().__init__(*args, **kwargs)
        self.sn = SpectralState(self.weight.shape[0], self.weight[0].numel())
        _power_iterate(self.weight.detach().reshape(self.weight.shape[0], -1), self.sn, warmup_iters)

    def normalized_weight(self, iters: int = 0):
        if iters:
            return spectral_normalize(self.weight, self.sn, iters)
        if not torch.any(self.weight != 0):
            return self.weight
        return self.weight / estimate_sigma(self.weight, self.sn)

    def forward(self, x):
        w = self.normalized_weight(1 if self.training else 0)
        return F.conv2d(x, w, self.bias, self.stride, self.padding)


class SNLinear(nn.Linear):
    def __init__(self, *args, warmup_iters: int = 50, **kwargs):
        super().__init__(*args, **kwargs)
        self.sn = SpectralState(*self.weight.shape)
        _power_iterate(self.weight.detach(), self.sn, warmup_iters)

    normalized_weight = SNConv2d.normalized_weight

    def forward(self, x):
        return F.linear(x, self.normalized_weight(1 if self.training else 0), self.bias)


class Critic(nn.Module):
    """Unconditional strided conv critic; every weight is spectrally normalised."""

    def __init__(self, resolution: int = 64, width: int = 16):
        super().__init__()
        self.resolution = resolution
        layers, ch, size = [], 3, resolution
        nxt = width
        while size > 4:
            layers += [SNConv2d(ch, nxt, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch, size, nxt = nxt, size // 2, min(nxt * 2, 8 * width)
        self.body = nn.Sequential(*layers)
        self.head = SNLinear(ch * size * size, 1)

    def sn_layers(self):
        return [m for m in self.modules() if isinstance(m, (SNConv2d, SNLinear))]

    def forward(self, image):
        return self.head(self.body(image).flatten(1)).squeeze(1)


def criticize(critic: Critic, image):
    if tuple(image.shape[-2:]) != (critic.resolution, critic.resolution):
        raise ResolutionError(f"critic expects {critic.resolution}px, got {tuple(image.shape[-2:])}")
    return critic(image)
