"""W+ style encoder, style-modulated synthesis decoder and closed-form direction discovery."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TrainConfig, build_seeded
from .coarse import ResolutionError, sample_batch
from .losses import ms_ssim_loss


class LatentError(ValueError):
    pass


def num_style_layers(resolution: int) -> int:
    """Two modulated convs per upsampling level from 4x4 to ``resolution``."""
    return 2 * int(round(math.log2(resolution // 4)))


def _level_channels(width: int, level: int) -> int:
    return min(4 * width, max(width // 2, width * 32 // level))


class StyleEncoder(nn.Module):
    """Conv trunk down to 4x4 followed by one linear head per style layer."""

    def __init__(self, resolution=64, width=16, n_layers=None, style_dim=128):
        super().__init__()
        self.resolution = resolution
        self.n_layers = n_layers or num_style_layers(resolution)
        self.style_dim = style_dim
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2)]
        ch, size = width, resolution
        while size > 4:
            nxt = min(ch * 2, 8 * width)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch, size = nxt, size // 2
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleList(nn.Linear(ch * 16, style_dim) for _ in range(self.n_layers))

    def forward(self, image):
        h = self.trunk(image).flatten(1)
        return torch.stack([head(h) for head in self.heads], dim=1)


class ModulatedConv(nn.Module):
    def __init__(self, cin, cout, style_dim, kernel=3):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(cout, cin, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.affine = nn.Linear(style_dim, cin)
        nn.init.normal_(self.affine.weight, 0.0, 1.0 / math.sqrt(style_dim))
        nn.init.ones_(self.affine.bias)
        self.padding = kernel // 2

    def forward(self, x, w):
        b, cin, h, wd = x.shape
        s = self.affine(w)
        weight = self.weight[None] * s[:, None, :, None, None]
        demod = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
        weight = weight * demod[:, :, None, None, None]
        out = F.conv2d(
            x.reshape(1, b * cin, h, wd),
            weight.reshape(-1, cin, *weight.shape[-2:]),
            padding=self.padding,
            groups=b,
        )
        out = out.reshape(b, -1, h, wd) + self.bias[None, :, None, None]
        return F.leaky_relu(out, 0.2)


class SynthesisDecoder(nn.Module):
    """StyleGAN2-flavoured decoder without noise inputs: a learned 4x4 constant,
    then per level an upsample and two modulated convs."""

    def __init__(self, resolution=64, width=32, style_dim=128):
        super().__init__()
        self.resolution = resolution
        self.style_dim = style_dim
        self.const = nn.Parameter(torch.randn(1, _level_channels(width, 4), 4, 4))
        convs = []
        ch, level = _level_channels(width, 4), 8
        while level <= resolution:
            nxt = _level_channels(width, level)
            convs += [ModulatedConv(ch, nxt, style_dim), ModulatedConv(nxt, nxt, style_dim)]
            ch, level = nxt, level * 2
        self.convs = nn.ModuleList(convs)
        self.to_rgb = nn.Conv2d(ch, 3, 1)

    @property
    def n_layers(self):
        return len(self.convs)

    def style_affines(self):
        return [conv.affine.weight for conv in self.convs]

    def forward(self, w):
        x = self.const.expand(w.shape[0], -1, -1, -1)
        for i, conv in enumerate(self.convs):
            if i % 2 == 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = conv(x, w[:, i])
        return torch.tanh(self.to_rgb(x))


def encode_style(enc: StyleEncoder, image):
    if tuple(image.shape[-2:]) != (enc.resolution, enc.resolution):
        raise ResolutionError(f"encoder expects {enc.resolution}px, got {tuple(image.shape[-2:])}")
    return enc(image)


def synthesize(dec: SynthesisDecoder, w):
    """Decode a style code (``L x D`` or batched ``B x L x D``)."""
    single = w.dim() == 2
    if single:
        w = w[None]
    if tuple(w.shape[-2:]) != (dec.n_layers, dec.style_dim):
        raise LatentError(
            f"style code {tuple(w.shape[-2:])} does not match decoder ({dec.n_layers}, {dec.style_dim})"
        )
    return dec(w)


# -- closed-form semantic directions ------------------------------------------

@dataclass
class SemanticDirections:
    directions: torch.Tensor  # D x n, orthonormal columns
    eigenvalues: torch.Tensor  # n, descending
    source_layers: tuple = ()

    @property
    def count(self):
        return self.directions.shape[1]

    def to_text(self) -> str:
        rows = [" ".join(f"{v:.9g}" for v in self.eigenvalues.tolist())]
        rows += [" ".join(f"{v:.9g}" for v in row) for row in self.directions.t().tolist()]
        return "\n".join(rows) + "\n"


def sefa_from_matrix(weight, n: int, source_layers=()) -> SemanticDirections:
    """Top-``n`` unit eigenvectors of ``A^T A`` for a stacked affine matrix ``A``."""
    a = torch.as_tensor(weight, dtype=torch.float64)
    dim = a.shape[1]
    if n > dim:
        raise LatentError(f"requested {n} directions but style dimension is {dim}")
    evals, evecs = torch.linalg.eigh(a.t() @ a)
    order = torch.argsort(evals, descending=True)[:n]
    evals, evecs = evals[order].clamp(min=0.0), evecs[:, order]
    # fix the sign so the largest-magnitude component is positive
    pivot = evecs.abs().argmax(dim=0)
    signs = torch.sign(evecs[pivot, torch.arange(n)])
    signs[signs == 0] = 1.0
    return SemanticDirections(evecs * signs, evals, tuple(source_layers))


def parse_layer_range(spec, n_layers: int) -> tuple:
    """``"all"``, ``"a-b"`` (inclusive) or an iterable of indices."""
    if spec is None or spec == "all":
        return tuple(range(n_layers))
    if isinstance(spec, str):
        lo, _, hi = spec.partition("-")
        layers = tuple(range(int(lo), int(hi or lo) + 1))
    else:
        layers = tuple(int(i) for i in spec)
    if not layers or min(layers) < 0 or max(layers) >= n_layers:
        raise LatentError(f"layer range {spec!r} outside [0, {n_layers})")
    return layers


def sefa_factorize(dec: SynthesisDecoder, layer_range="all", n: int = 8) -> SemanticDirections:
    layers = parse_layer_range(layer_range, dec.n_layers)
    affines = dec.style_affines()
    stacked = torch.cat([affines[i].detach() for i in layers], dim=0)
    return sefa_from_matrix(stacked, n, layers)


def perturb_style(w, dirs: SemanticDirections, index: int, delta: float, layer_range=None):
    if not 0 <= index < dirs.count:
        raise LatentError(f"direction index {index} outside [0, {dirs.count})")
    layers = list(parse_layer_range(layer_range, w.shape[-2]))
    u = dirs.directions[:, index].to(w.dtype)
    out = w.clone()
    out[..., layers, :] = w[..., layers, :] + delta * u
    return out


def sample_style_variants(enc, dec, dirs, coarse, alpha: int, magnitude: float, rng,
                          top_k: int = 8, layer_range=None):
    """Return ``[I_style] + alpha`` images decoded from randomly perturbed codes.

    Each variant and sample draws its own direction among the top ``top_k`` and a
    step uniform in ``(-magnitude, magnitude)``.
    """
    if alpha < 1:
        raise LatentError("alpha must be >= 1")
    w = encode_style(enc, coarse)
    b = w.shape[0]
    layers = list(parse_layer_range(layer_range, w.shape[1]))
    k = min(top_k, dirs.count)
    u = dirs.directions.t().to(w.dtype)
    codes = [w]
    for _ in range(alpha):
        idx = torch.randint(0, k, (b,), generator=rng)
        delta = (torch.rand(b, generator=rng) * 2 - 1) * magnitude
        shift = (delta[:, None] * u[idx]).to(w.dtype)
        wv = w.clone()
        wv[:, layers] = w[:, layers] + shift[:, None, :]
        codes.append(wv)
    images = synthesize(dec, torch.cat(codes, dim=0))
    return list(images.chunk(alpha + 1, dim=0))


def build_style_condition(masked, mask, style_image):
    if masked.shape != style_image.shape or masked.shape[-2:] != mask.shape[-2:]:
        raise LatentError(
            f"shape mismatch: masked {tuple(masked.shape)}, mask {tuple(mask.shape)}, "
            f"style {tuple(style_image.shape)}"
        )
    return masked * mask + (1.0 - mask) * style_image


def train_autoencoder(images, cfg: TrainConfig, rng, log=None):
    """Jointly fit encoder and decoder as an image autoencoder (L1 + MS-SSIM).

    Returns ``(encoder, decoder, stats)``; ``stats["probe"]`` holds the mean
    reconstruction L1 over ``images`` before and after training.
    """
    if images.shape[0] == 0:
        raise ValueError("train_autoencoder: empty dataset")
    enc = build_seeded(rng, StyleEncoder, cfg.resolution, cfg.encoder_width, None, cfg.style_dim)
    dec = build_seeded(rng, SynthesisDecoder, cfg.resolution, cfg.decoder_width, cfg.style_dim)
    opt = torch.optim.Adam(
        list(enc.parameters()) + list(dec.parameters()), lr=cfg.latent_lr, betas=(0.5, 0.999)
    )
    probe = [_recon_l1(enc, dec, images)]
    history = []
    for step in range(cfg.latent_steps):
        gt = sample_batch(images, cfg.batch_size, rng)
        recon = dec(enc(gt))
        loss = cfg.latent_l1_weight * (recon - gt).abs().mean()
        if cfg.latent_ssim_weight:
            loss = loss + cfg.latent_ssim_weight * ms_ssim_loss(recon, gt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log is not None:
            log.write(f"{step},latent_loss,{loss.item()!r}\n")
    enc.eval()
    dec.eval()
    probe.append(_recon_l1(enc, dec, images))
    if log is not None:
        log.write(f"0,probe_recon_l1,{probe[0]!r}\n{cfg.latent_steps},probe_recon_l1,{probe[1]!r}\n")
    return enc, dec, {"history": history, "probe": probe}


def _recon_l1(enc, dec, images) -> float:
    with torch.no_grad():
        return (dec(enc(images)) - images).abs().mean().item()
