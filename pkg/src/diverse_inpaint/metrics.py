"""Evaluation metrics and the bucketed / diversity evaluation protocols."""

import itertools
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .losses import FeatureExtractor, ssim_terms
from .masks import MaskError, MaskParams, default_training_mask, generate_stroke_mask


class MetricError(ValueError):
    pass


def ssim(a, b, window_size: int = 11) -> float:
    """Single-scale SSIM, 11x11 Gaussian window, batch mean."""
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        s, _ = ssim_terms(a.double(), b.double(), window_size)
    return float(s.mean())


def perceptual_distance(a, b, fx: FeatureExtractor) -> float:
    """Unweighted LPIPS-style distance over the fixed extractor (``lpips_proxy``).

    Features are unit-normalised along channels; the squared difference is
    summed over channels, averaged spatially, then averaged over layers and batch.
    """
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa, fb = fx(a), fx(b)
        dists = []
        for x, y in zip(fa, fb):
            x = F.normalize(x, dim=1, eps=1e-10)
            y = F.normalize(y, dim=1, eps=1e-10)
            dists.append(((x - y) ** 2).sum(1).mean(dim=(1, 2)))
        return float(torch.stack(dists).mean())


def _sqrtm_product(sa, sb):
    """S with S @ S = sa @ sb for symmetric PSD sa, sb (sa nonsingular)."""
    ea, va = np.linalg.eigh(sa)
    ea = np.clip(ea, 0.0, None)
    ra = (va * np.sqrt(ea)) @ va.T
    ra_inv = (va / np.sqrt(ea)) @ va.T
    inner = ra @ sb @ ra
    ei, vi = np.linalg.eigh((inner + inner.T) / 2)
    inner_sqrt = (vi * np.sqrt(np.clip(ei, 0.0, None))) @ vi.T
    return ra @ inner_sqrt @ ra_inv


def fid(features_a, features_b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise MetricError(f"feature dims differ: {dim} vs {b.shape[1]}")
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise MetricError(f"need at least {dim + 1} samples per set, got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    reg = eps * np.eye(dim)
    sa = np.cov(a, rowvar=False) + reg
    sb = np.cov(b, rowvar=False) + reg
    s = _sqrtm_product(sa, sb)
    prod = sa @ sb
    resid = np.linalg.norm(s @ s - prod) / np.linalg.norm(prod)
    if resid >= 1e-6:
        raise MetricError(f"matrix square root inaccurate (relative residual {resid:.2e})")
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa + sb - 2 * s))
    return max(value, 0.0)


def fid_features(images, fx: FeatureExtractor) -> np.ndarray:
    """Per-location feature vectors from the extractor's penultimate stage."""
    with torch.no_grad():
        f = fx(images)[-2]
    return f.permute(0, 2, 3, 1).reshape(-1, f.shape[1]).double().numpy()


def diversity_score(pipeline, images, masks, k: int, rng, magnitude: float = 3.0, fx=None) -> float:
    """Mean over images of the mean pairwise ``lpips_proxy`` among ``k`` completions."""
    if k < 2:
        raise MetricError("diversity needs k >= 2 variants per image")
    fx = fx or pipeline.fx
    scores = []
    for i in range(images.shape[0]):
        outs = pipeline.infer(images[i:i + 1], masks[i:i + 1], k, magnitude, rng)
        pairs = [perceptual_distance(x, y, fx) for x, y in itertools.combinations(outs, 2)]
        scores.append(float(np.mean(pairs)))
    return float(np.mean(scores))


def parse_buckets(spec: str) -> List[str]:
    names = [s.strip() for s in spec.split(",") if s.strip()]
    for name in names:
        _bucket_range(name)
    return names


def _bucket_range(name):
    if name == "quickdraw":
        return None
    try:
        lo, hi = (float(x) for x in name.split("-"))
    except ValueError:
        raise MetricError(f"bad bucket {name!r}; use 'quickdraw' or 'lo-hi'") from None
    if not 0 <= lo < hi <= 1:
        raise MetricError(f"bad bucket {name!r}")
    return lo, hi


def bucket_masks(name, n, resolution, params: MaskParams, rng):
    rng_range = _bucket_range(name)
    if rng_range is None:
        make = lambda: default_training_mask(resolution, params, rng)
    else:
        bucket_params = MaskParams(**{**params.__dict__, "target_ratio_bucket": rng_range})
        make = lambda: generate_stroke_mask(resolution, bucket_params, rng)
    try:
        return torch.cat([make() for _ in range(n)], dim=0)
    except MaskError as e:
        raise MetricError(f"bucket {name}: {e}") from None


@dataclass
class MetricsTable:
    variant: str = "sparn"
    rows: list = field(default_factory=list)  # (bucket, ssim, lpips_proxy, fid)
    diversity: list = field(default_factory=list)  # (bucket, score)

    def to_text(self) -> str:
        out = [f"variant: {self.variant}", f"{'bucket':<12}{'ssim':>12}{'lpips_proxy':>14}{'fid':>14}"]
        for bucket, s, lp, fd in self.rows:
            out.append(f"{bucket:<12}{s:>12.6f}{lp:>14.6f}{fd:>14.6f}")
        if self.diversity:
            out.append(f"{'bucket':<12}{'diversity':>12}")
            for bucket, score in self.diversity:
                out.append(f"{bucket:<12}{score:>12.6f}")
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        out = ["variant,table,bucket,metric,value"]
        for bucket, s, lp, fd in self.rows:
            for metric, v in (("ssim", s), ("lpips_proxy", lp), ("fid", fd)):
                out.append(f"{self.variant},quality,{bucket},{metric},{v!r}")
        for bucket, score in self.diversity:
            out.append(f"{self.variant},diversity,{bucket},diversity,{score!r}")
        return "\n".join(out) + "\n"


def evaluate_buckets(pipeline, images, bucket_list: Sequence[str], per_bucket_count: int, rng,
                     params: MaskParams = None, diversity_images: int = 0, k: int = 4,
                     magnitude: float = 3.0, variant: str = "sparn") -> MetricsTable:
    """Quality metrics with unperturbed codes, diversity with perturbed ones."""
    resolution = images.shape[-1]
    params = params or MaskParams.for_resolution(resolution)
    table = MetricsTable(variant=variant)
    for name in bucket_list:
        if images.shape[0] < per_bucket_count:
            raise MetricError(
                f"bucket {name}: needs {per_bucket_count} images, dataset has {images.shape[0]}"
            )
        gt = images[:per_bucket_count]
        masks = bucket_masks(name, per_bucket_count, resolution, params, rng)
        out = pipeline.complete(gt, masks)
        fx = pipeline.fx
        table.rows.append((
            name,
            ssim(out, gt),
            perceptual_distance(out, gt, fx),
            fid(fid_features(out, fx), fid_features(gt, fx)),
        ))
        if diversity_images:
            n = min(diversity_images, per_bucket_count)
            table.diversity.append(
                (name, diversity_score(pipeline, gt[:n], masks[:n], k, rng, magnitude, fx))
            )
    return table
