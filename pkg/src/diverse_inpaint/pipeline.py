"""Staged training, inference, delta sweeps and evaluation over the full framework."""

import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import __version__
from .coarse import CoarseNet, coarse_inpaint, mask_params_from_config, sample_batch, sample_masks, train_coarse
from .core import (
    CheckpointBundle, CheckpointError, TrainConfig, build_seeded, load_checkpoint,
    load_module, save_checkpoint, save_module, seeded_rng,
)
from .data import save_image, to_uint8
from .latent import (
    SemanticDirections, StyleEncoder, SynthesisDecoder, build_style_condition, encode_style,
    parse_layer_range, perturb_style, sample_style_variants, sefa_factorize, synthesize,
    train_autoencoder,
)
from .losses import (
    FeatureExtractor, LossReport, adv_d_loss, adv_g_loss, gradient_penalty, hole_valid_loss,
    ms_ssim_loss, perceptual_loss, style_loss, total_loss,
)
from .metrics import MetricsTable, evaluate_buckets, parse_buckets
from .sparn import Critic, Generator, criticize, generate

FEATURE_SEED = 1234


class PipelineError(RuntimeError):
    pass


def feature_extractor(cfg: TrainConfig) -> FeatureExtractor:
    fx = build_seeded(seeded_rng(FEATURE_SEED), FeatureExtractor, cfg.feature_width)
    return fx.eval()


def stage_dir(out, stage: str, variant: str = "sparn") -> str:
    if stage in ("coarse", "latent"):
        return os.path.join(out, stage)
    return os.path.join(out, f"stage3-{variant}", stage)


def _meta(cfg, seed, stage, **extra):
    meta = {"stage": stage, "seed": seed, "config": cfg.to_dict(), "version": __version__}
    meta.update(extra)
    return meta


@dataclass
class Pipeline:
    cfg: TrainConfig
    coarse: Optional[CoarseNet] = None
    encoder: Optional[StyleEncoder] = None
    decoder: Optional[SynthesisDecoder] = None
    directions: Optional[SemanticDirections] = None
    generator: Optional[Generator] = None
    critic: Optional[Critic] = None
    fx: FeatureExtractor = None

    def __post_init__(self):
        if self.fx is None:
            self.fx = feature_extractor(self.cfg)

    def require(self, *stages):
        have = {
            "coarse": self.coarse is not None,
            "latent": self.encoder is not None and self.decoder is not None and self.directions is not None,
            "generator": self.generator is not None,
        }
        for stage in stages:
            if not have[stage]:
                raise PipelineError(f"missing prerequisite stage: {stage}")

    # -- forward paths ---------------------------------------------------------

    def _complete_codes(self, masked, mask, codes):
        """Decode each code batch, build its condition and run the generator (hard-blended)."""
        outs = []
        for w in codes:
            style = synthesize(self.decoder, w)
            cond = build_style_condition(masked, mask, style)
            raw = generate(self.generator, masked, cond, mask)
            outs.append(raw * (1.0 - mask) + masked * mask)
        return outs

    def style_code(self, image, mask):
        masked = image * mask
        return masked, encode_style(self.encoder, coarse_inpaint(self.coarse, masked, mask))

    @torch.no_grad()
    def complete(self, image, mask):
        """Completion from the unperturbed code."""
        self.require("coarse", "latent", "generator")
        masked, w = self.style_code(image, mask)
        return self._complete_codes(masked, mask, [w])[0]

    @torch.no_grad()
    def infer(self, image, mask, n: int, magnitude: float, rng) -> List[torch.Tensor]:
        """``n`` completions, each from its own random direction and step."""
        self.require("coarse", "latent", "generator")
        masked, w = self.style_code(image, mask)
        k = min(self.cfg.sefa_directions, self.directions.count)
        codes = []
        for _ in range(n):
            idx = int(torch.randint(0, k, (1,), generator=rng))
            delta = (float(torch.rand(1, generator=rng)) * 2 - 1) * magnitude
            codes.append(perturb_style(w, self.directions, idx, delta))
        return self._complete_codes(masked, mask, codes)

    @torch.no_grad()
    def sweep(self, image, mask, direction: int, deltas) -> List[torch.Tensor]:
        self.require("coarse", "latent", "generator")
        masked, w = self.style_code(image, mask)
        codes = [perturb_style(w, self.directions, direction, float(d)) for d in deltas]
        return self._complete_codes(masked, mask, codes)

    # -- persistence -----------------------------------------------------------

    @classmethod
    def load(cls, cfg: TrainConfig, out, variant: str = None, stages=("coarse", "latent", "generator")):
        variant = variant or cfg.variant
        pipe = cls(cfg.replace(variant=variant))
        if "coarse" in stages:
            pipe.coarse = load_coarse(cfg, out)
        if "latent" in stages:
            pipe.encoder, pipe.decoder, pipe.directions = load_latent(cfg, out)
        if "generator" in stages:
            path = stage_dir(out, "generator", variant)
            _require_dir(path, f"generator ({variant})", "train")
            pipe.generator = Generator(cfg.resolution, cfg.gen_width, variant)
            load_module(pipe.generator, path, "generator")
            pipe.generator.eval()
        return pipe


def _require_dir(path, stage, command):
    if not os.path.isfile(os.path.join(path, "manifest.txt")):
        raise PipelineError(f"missing prerequisite checkpoint for stage {stage} at {path}; run `{command}` first")


def load_coarse(cfg, out) -> CoarseNet:
    path = stage_dir(out, "coarse")
    _require_dir(path, "coarse", "train-coarse")
    net = CoarseNet(cfg.resolution, cfg.coarse_width)
    load_module(net, path, "coarse")
    return net.eval()


def load_latent(cfg, out):
    path = stage_dir(out, "latent")
    _require_dir(path, "latent", "train-latent")
    weights, meta = load_checkpoint(path)
    if meta.get("stage") != "latent":
        raise CheckpointError(f"{path}: expected stage 'latent'")
    enc = StyleEncoder(cfg.resolution, cfg.encoder_width, None, cfg.style_dim)
    dec = SynthesisDecoder(cfg.resolution, cfg.decoder_width, cfg.style_dim)
    for prefix, module in (("encoder.", enc), ("decoder.", dec)):
        state = module.state_dict()
        module.load_state_dict({k: weights[prefix + k].to(state[k].dtype) for k in state})
    dirs = SemanticDirections(
        weights["sefa.directions"].double(), weights["sefa.eigenvalues"].double(),
        tuple(meta.get("sefa_layers", ())),
    )
    return enc.eval(), dec.eval(), dirs


# -- stage runners -----------------------------------------------------------------

def _open_log(path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="\n")


def run_train_coarse(images, cfg: TrainConfig, seed: int, out) -> CheckpointBundle:
    rng = seeded_rng(seed)
    path = stage_dir(out, "coarse")
    with _open_log(os.path.join(path, "metrics.log")) as log:
        net, stats = train_coarse(images, cfg, rng, log)
    bundle = save_module(net, _meta(cfg, seed, "coarse"), path)
    bundle.stats = stats
    return bundle


def run_train_latent(images, cfg: TrainConfig, seed: int, out) -> CheckpointBundle:
    rng = seeded_rng(seed)
    path = stage_dir(out, "latent")
    with _open_log(os.path.join(path, "metrics.log")) as log:
        enc, dec, stats = train_autoencoder(images, cfg, rng, log)
    dirs = sefa_factorize(dec, cfg.sefa_layers, min(cfg.sefa_directions, cfg.style_dim))
    weights = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    weights.update({f"decoder.{k}": v for k, v in dec.state_dict().items()})
    weights["sefa.directions"] = dirs.directions.float()
    weights["sefa.eigenvalues"] = dirs.eigenvalues.float()
    meta = _meta(cfg, seed, "latent", sefa_layers=list(dirs.source_layers))
    save_checkpoint(weights, meta, path)
    with open(os.path.join(path, "directions.txt"), "w", encoding="utf-8") as fh:
        fh.write(dirs.to_text())
    bundle = CheckpointBundle(path, "latent", meta)
    bundle.stats = stats
    return bundle


@dataclass
class Stage3Result:
    generator: Generator
    critic: Critic
    reports: List[LossReport] = field(default_factory=list)
    eval_hole_l1: List[float] = field(default_factory=list)  # [start, end]


def _eval_hole_l1(pipe, gt, mask, style):
    pipe.generator.eval()
    with torch.no_grad():
        masked = gt * mask
        out = generate(pipe.generator, masked, build_style_condition(masked, mask, style), mask)
        hole, _ = hole_valid_loss(out, gt, mask)
    pipe.generator.train()
    return float(hole)


def train_stage3(pipe: Pipeline, images, cfg: TrainConfig, rng, log=None) -> Stage3Result:
    """Adversarial training of the generator with frozen coarse and latent stages."""
    pipe.require("coarse", "latent")
    if images.shape[0] == 0:
        raise ValueError("train_stage3: empty dataset")
    weights = cfg.weights
    alpha = weights.alpha
    for net in (pipe.coarse, pipe.encoder, pipe.decoder):
        net.requires_grad_(False).eval()
    gen = build_seeded(rng, Generator, cfg.resolution, cfg.gen_width, cfg.variant)
    critic = build_seeded(rng, Critic, cfg.resolution, cfg.critic_width)
    pipe.generator, pipe.critic = gen, critic
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(critic.parameters(), lr=cfg.lr_d, betas=(0.5, 0.999))
    params = mask_params_from_config(cfg)
    scales = cfg.ssim_scales or None
    layers = parse_layer_range(cfg.sefa_layers, pipe.decoder.n_layers)

    # fixed probe set for tracking hole reconstruction
    probe_gt = images
    probe_mask = sample_masks(images.shape[0], cfg.resolution, params, rng)
    with torch.no_grad():
        _, w = pipe.style_code(probe_gt, probe_mask)
        probe_style = synthesize(pipe.decoder, w)
    result = Stage3Result(gen, critic)
    result.eval_hole_l1.append(_eval_hole_l1(pipe, probe_gt, probe_mask, probe_style))
    if log is not None:
        log.write(f"0,eval_hole_l1,{result.eval_hole_l1[0]!r}\n")

    gen.train()
    for step in range(cfg.steps):
        gt = sample_batch(images, cfg.batch_size, rng)
        b = gt.shape[0]
        mask = sample_masks(b, cfg.resolution, params, rng)
        masked = gt * mask
        with torch.no_grad():
            coarse = coarse_inpaint(pipe.coarse, masked, mask)
            styles = sample_style_variants(
                pipe.encoder, pipe.decoder, pipe.directions, coarse, alpha,
                cfg.delta_magnitude, rng, top_k=cfg.sefa_directions, layer_range=layers,
            )
        conds = torch.cat([build_style_condition(masked, mask, s) for s in styles], dim=0)
        masked_rep, mask_rep = masked.repeat(alpha + 1, 1, 1, 1), mask.repeat(alpha + 1, 1, 1, 1)
        outs = generate(gen, masked_rep, conds, mask_rep)
        out, *out_variants = outs.chunk(alpha + 1, dim=0)

        # critic step
        critic.train()
        critic.requires_grad_(True)
        fake = outs.detach()
        real = gt.repeat(alpha + 1, 1, 1, 1)
        gp = gradient_penalty(critic, real, fake, rng)
        d_loss = adv_d_loss(criticize(critic, gt), criticize(critic, fake), gp, weights.lambda_gp)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # generator step
        critic.eval()
        critic.requires_grad_(False)
        hole, valid = hole_valid_loss(out, gt, mask)
        terms = {
            "hole": hole,
            "valid": valid,
            "perceptual": perceptual_loss(out_variants, styles[1:], out, gt, mask, pipe.fx),
            "style": style_loss(out_variants, styles[1:], out, gt, mask, pipe.fx),
            "ms_ssim": ms_ssim_loss(out, gt, scales),
            "adv_g": adv_g_loss(criticize(critic, outs)),
        }
        g_loss = total_loss(terms, weights)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        report = LossReport(
            **{k: v.item() for k, v in terms.items()},
            adv_d=d_loss.item(), gp=gp.item(), total=g_loss.item(),
        )
        result.reports.append(report)
        if log is not None:
            log.write(report.log_lines(step))

    result.eval_hole_l1.append(_eval_hole_l1(pipe, probe_gt, probe_mask, probe_style))
    if log is not None:
        log.write(f"{cfg.steps},eval_hole_l1,{result.eval_hole_l1[1]!r}\n")
    gen.eval()
    critic.eval()
    return result


def run_train_stage3(images, cfg: TrainConfig, seed: int, out) -> Stage3Result:
    pipe = Pipeline.load(cfg, out, stages=("coarse", "latent"))
    rng = seeded_rng(seed)
    variant = cfg.variant
    log_path = os.path.join(os.path.dirname(stage_dir(out, "generator", variant)), "metrics.log")
    with _open_log(log_path) as log:
        result = train_stage3(pipe, images, cfg, rng, log)
    save_module(result.generator, _meta(cfg, seed, "generator", variant=variant),
                stage_dir(out, "generator", variant))
    save_module(result.critic, _meta(cfg, seed, "critic", variant=variant),
                stage_dir(out, "critic", variant))
    return result


# -- inference-side drivers ----------------------------------------------------------

def write_completions(outputs, out_dir, prefix="completion") -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, img in enumerate(outputs):
        path = os.path.join(out_dir, f"{prefix}_{i}.png")
        save_image(img, path)
        paths.append(path)
    return paths


def explore(pipe: Pipeline, image, mask, direction: int, delta_min: float, delta_max: float,
            steps: int, path) -> str:
    """Write a horizontal strip of completions at evenly spaced steps along one direction."""
    if steps < 2:
        raise PipelineError("explore needs steps >= 2")
    if delta_min > delta_max:
        raise PipelineError(f"bad delta range [{delta_min}, {delta_max}]")
    deltas = np.linspace(delta_min, delta_max, steps)
    tiles = pipe.sweep(image, mask, direction, deltas)
    grid = np.concatenate([to_uint8(t[0]) for t in tiles], axis=1)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(grid, mode="RGB").save(path)
    return path


def evaluate(pipe: Pipeline, images, cfg: TrainConfig, rng, out_dir) -> MetricsTable:
    table = evaluate_buckets(
        pipe, images, parse_buckets(cfg.eval_buckets), cfg.eval_per_bucket, rng,
        params=mask_params_from_config(cfg), diversity_images=cfg.diversity_images,
        k=cfg.diversity_k, magnitude=cfg.delta_magnitude, variant=pipe.cfg.variant,
    )
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"metrics_{pipe.cfg.variant}")
    with open(stem + ".txt", "w", encoding="utf-8") as fh:
        fh.write(table.to_text())
    with open(stem + ".csv", "w", encoding="utf-8") as fh:
        fh.write(table.to_csv())
    return table
