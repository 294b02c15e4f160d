import numpy as np
import pytest
import scipy.linalg
import torch

from diverse_inpaint.core import build_seeded, seeded_rng
from diverse_inpaint.losses import FeatureExtractor
from diverse_inpaint.metrics import (
    MetricError, diversity_score, evaluate_buckets, fid, fid_features, parse_buckets,
    perceptual_distance, ssim,
)


def rand_images(n, size=32, seed=0):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed)) * 2 - 1


@pytest.fixture(scope="module")
def fx():
    return build_seeded(seeded_rng(1234), FeatureExtractor, 8)


def test_ssim_identity_and_symmetry():
    a, b = rand_images(2), rand_images(2, seed=1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-6)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-6
    assert -1 <= ssim(a, b) <= 1


def test_ssim_constant_images_closed_form():
    c1 = (0.01 * 2) ** 2
    value = ssim(torch.zeros(1, 3, 16, 16), torch.ones(1, 3, 16, 16))
    # zero variance: contrast term is c2/c2 = 1, luminance is c1 / (0 + 1 + c1)
    assert value == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_shape_mismatch():
    with pytest.raises(MetricError):
        ssim(torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 32, 32))


def test_perceptual_distance_cases(fx):
    a, b = rand_images(2), rand_images(2, seed=1)
    assert perceptual_distance(a, a, fx) == 0
    assert abs(perceptual_distance(a, b, fx) - perceptual_distance(b, a, fx)) < 1e-6
    assert perceptual_distance(a, b, fx) > 0
    with pytest.raises(MetricError):
        perceptual_distance(a, b[:, :, :16, :16], fx)


def test_perceptual_distance_monotone_in_offset(fx):
    holds = 0
    for trial in range(10):
        a = rand_images(1, seed=100 + trial) * 0.5
        eps = 0.05
        holds += perceptual_distance(a, a + 2 * eps, fx) >= perceptual_distance(a, a + eps, fx)
    assert holds >= 9


def gaussian_sets(n=500, dim=64, offset=0.5, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, dim))
    b = rng.standard_normal((n, dim)) + offset
    return a, b


def moment_fit_frechet(a, b, eps=1e-6):
    mu_a, mu_b = a.mean(0), b.mean(0)
    reg = eps * np.eye(a.shape[1])
    sa, sb = np.cov(a, rowvar=False) + reg, np.cov(b, rowvar=False) + reg
    covmean = scipy.linalg.sqrtm(sa @ sb).real
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(sa + sb - 2 * covmean))


def test_fid_identical_sets():
    a, _ = gaussian_sets()
    assert fid(a, a) < 1e-3


def test_fid_offset_gaussians_match_oracle():
    a, b = gaussian_sets()
    value = fid(a, b)
    oracle = moment_fit_frechet(a, b)
    assert value == pytest.approx(oracle, rel=0.05)
    assert value == pytest.approx(oracle, rel=1e-6)
    # the mean term dominates: 64 * 0.5**2 = 16
    assert abs(value - 16) < 0.5 * 16


def test_fid_symmetric():
    a, b = gaussian_sets(n=200, dim=16, offset=0.3)
    assert abs(fid(a, b) - fid(b, a)) < 1e-6


def test_fid_undersized_sets():
    a, b = gaussian_sets(n=10, dim=16)
    with pytest.raises(MetricError, match="at least 17"):
        fid(a, b)


def test_fid_features_shape(fx):
    feats = fid_features(rand_images(4, 64), fx)
    assert feats.shape == (4 * 8 * 8, 64)


class StubPipeline:
    """Completes with a fixed function of the input; ``magnitude`` scales a per-call offset."""

    def __init__(self, fx):
        self.fx = fx

    def complete(self, image, mask):
        return image.clone()

    def infer(self, image, mask, n, magnitude, rng):
        outs = []
        for _ in range(n):
            delta = (torch.rand(1, generator=rng).item() * 2 - 1) * magnitude
            outs.append((image + delta * 0.1 * (1 - mask)).clamp(-1, 1))
        return outs


def test_diversity_zero_when_delta_zero(fx):
    imgs, masks = rand_images(2, 32), torch.ones(2, 1, 32, 32)
    masks[..., 8:24, 8:24] = 0
    assert diversity_score(StubPipeline(fx), imgs, masks, 4, seeded_rng(0), magnitude=0.0) == 0
    assert diversity_score(StubPipeline(fx), imgs, masks, 4, seeded_rng(0), magnitude=3.0) > 0


def test_diversity_pair_count(fx, monkeypatch):
    import diverse_inpaint.metrics as metrics

    calls = []
    monkeypatch.setattr(metrics, "perceptual_distance", lambda a, b, f: calls.append(1) or 1.0)
    imgs, masks = rand_images(3, 32), torch.ones(3, 1, 32, 32)
    assert diversity_score(StubPipeline(fx), imgs, masks, 2, seeded_rng(0)) == 1.0
    assert len(calls) == 3
    calls.clear()
    diversity_score(StubPipeline(fx), imgs, masks, 4, seeded_rng(0))
    assert len(calls) == 3 * 6


def test_diversity_needs_two(fx):
    with pytest.raises(MetricError, match="k >= 2"):
        diversity_score(StubPipeline(fx), rand_images(1), torch.ones(1, 1, 32, 32), 1, seeded_rng(0))


def test_evaluate_buckets_oracle(fx):
    images = rand_images(4, 64)
    table = evaluate_buckets(StubPipeline(fx), images, ["quickdraw", "0.1-0.2"], 4, seeded_rng(0),
                             diversity_images=2, k=2)
    assert [r[0] for r in table.rows] == ["quickdraw", "0.1-0.2"]
    for _, s, lp, fd in table.rows:
        assert s == pytest.approx(1.0, abs=1e-6)
        assert lp == 0
        assert fd < 1e-3
    assert all(np.isfinite(score) for _, score in table.diversity)
    again = evaluate_buckets(StubPipeline(fx), images, ["quickdraw", "0.1-0.2"], 4, seeded_rng(0),
                             diversity_images=2, k=2)
    assert again.to_csv() == table.to_csv()
    assert table.to_text().startswith("variant: sparn")


def test_evaluate_buckets_starvation(fx):
    with pytest.raises(MetricError, match="bucket 0.2-0.3"):
        evaluate_buckets(StubPipeline(fx), rand_images(2, 64), ["0.2-0.3"], 4, seeded_rng(0))


def test_parse_buckets():
    assert parse_buckets("quickdraw, 0.1-0.2") == ["quickdraw", "0.1-0.2"]
    with pytest.raises(MetricError):
        parse_buckets("tiny")
    with pytest.raises(MetricError):
        parse_buckets("0.5-0.2")
