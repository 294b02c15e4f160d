import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diverse_inpaint.core import seeded_rng
from diverse_inpaint.masks import (
    MaskError, MaskParams, apply_mask, combine_masks, downsample_mask, generate_square_mask,
    generate_stroke_mask, load_mask_file, mask_ratio, reverse_mask, save_mask_file,
)


def random_mask(seed, shape=(1, 1, 16, 16)):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(shape, generator=g) > 0.5).float()


def test_square_mask_ratio_at_256():
    mask = generate_square_mask(256, MaskParams(), seeded_rng(0))
    zeros = int((mask == 0).sum())
    assert zeros == 85 * 85
    assert mask_ratio(mask) == pytest.approx(7225 / 65536)
    assert mask_ratio(mask) == pytest.approx(0.1102, abs=1e-4)


def test_square_is_axis_aligned_and_inside():
    mask = generate_square_mask(64, MaskParams.for_resolution(64), seeded_rng(3))[0, 0]
    rows = torch.where((mask == 0).any(1))[0]
    cols = torch.where((mask == 0).any(0))[0]
    side = round(85 / 256 * 64)
    assert len(rows) == len(cols) == side
    assert int((mask == 0).sum()) == side * side


def test_square_too_large():
    with pytest.raises(MaskError):
        generate_square_mask(64, MaskParams(square_size=64), seeded_rng(0))


def test_square_deterministic():
    a = generate_square_mask(128, MaskParams(), seeded_rng(7))
    b = generate_square_mask(128, MaskParams(), seeded_rng(7))
    assert torch.equal(a, b)


def test_zero_strokes_all_ones():
    mask = generate_stroke_mask(64, MaskParams(stroke_count_range=(0, 0)), seeded_rng(0))
    assert torch.equal(mask, torch.ones(1, 1, 64, 64))


@pytest.mark.parametrize("bucket", [(0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5)])
def test_stroke_bucket(bucket):
    params = MaskParams.for_resolution(64, target_ratio_bucket=bucket)
    mask = generate_stroke_mask(64, params, seeded_rng(1))
    assert bucket[0] <= mask_ratio(mask) <= bucket[1]


def test_unreachable_bucket_names_it():
    params = MaskParams(stroke_width_range=(200, 200), target_ratio_bucket=(0.1, 0.2), max_retries=3)
    with pytest.raises(MaskError, match=r"\[0.1, 0.2\]"):
        generate_stroke_mask(64, params, seeded_rng(0))


def test_stroke_deterministic_and_binary():
    params = MaskParams.for_resolution(64)
    a = generate_stroke_mask(64, params, seeded_rng(11))
    b = generate_stroke_mask(64, params, seeded_rng(11))
    assert torch.equal(a, b)
    assert set(a.unique().tolist()) <= {0.0, 1.0}


def test_combine_identity_and_halves():
    b = random_mask(0)
    assert torch.equal(combine_masks(torch.ones_like(b), b), b)
    left, right = torch.ones(1, 1, 4, 4), torch.ones(1, 1, 4, 4)
    left[..., :2] = 0
    right[..., 2:] = 0
    expected = torch.from_numpy(np.minimum(left.numpy(), right.numpy()))
    out = combine_masks(left, right)
    assert torch.equal(out, expected)
    assert torch.equal(out, torch.zeros(1, 1, 4, 4))
    assert torch.equal(combine_masks(b, b), b)


def test_combine_shape_mismatch():
    with pytest.raises(MaskError):
        combine_masks(torch.ones(1, 1, 4, 4), torch.ones(1, 1, 8, 8))


def test_apply_mask_cases():
    img = torch.randn(2, 3, 8, 8)
    assert torch.equal(apply_mask(img, torch.ones(2, 1, 8, 8)), img)
    assert torch.equal(apply_mask(img, torch.zeros(2, 1, 8, 8)), torch.zeros_like(img))
    checker = ((torch.arange(8)[:, None] + torch.arange(8)[None]) % 2).float()[None, None]
    out = apply_mask(img, checker)
    for y in range(8):
        for x in range(8):
            if checker[0, 0, y, x] == 0:
                assert torch.all(out[:, :, y, x] == 0)
            else:
                assert torch.equal(out[:, :, y, x], img[:, :, y, x])
    with pytest.raises(MaskError):
        apply_mask(img, torch.ones(2, 1, 4, 4))


def test_reverse_mask():
    ones = torch.ones(1, 1, 4, 4)
    assert torch.equal(reverse_mask(ones), torch.zeros_like(ones))
    m = random_mask(2)
    assert torch.equal(reverse_mask(reverse_mask(m)), m)
    assert mask_ratio(reverse_mask(m)) == pytest.approx(1 - mask_ratio(m))


def test_mask_ratio_cases():
    assert mask_ratio(torch.ones(1, 1, 8, 8)) == 0.0
    half = torch.ones(1, 1, 8, 8)
    half[..., :4, :] = 0
    assert mask_ratio(half) == 0.5


def test_downsample_mask():
    m = random_mask(4)
    assert torch.equal(downsample_mask(m, 1), m)
    assert torch.equal(downsample_mask(torch.ones(1, 1, 16, 16), 4), torch.ones(1, 1, 4, 4))
    single = torch.ones(1, 1, 8, 8)
    single[..., 5, 2] = 0
    out = downsample_mask(single, 2)
    # min-pool oracle
    oracle = single.numpy().reshape(4, 2, 4, 2).min(axis=(1, 3))
    assert np.array_equal(out[0, 0].numpy(), oracle)
    assert int((out == 0).sum()) == 1
    with pytest.raises(MaskError):
        downsample_mask(torch.ones(1, 1, 6, 6), 4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), factor=st.sampled_from([2, 4, 8]))
def test_downsample_hole_dominance(seed, factor):
    m = random_mask(seed, (2, 1, 16, 16))
    out = downsample_mask(m, factor)
    assert set(out.unique().tolist()) <= {0.0, 1.0}
    blocks = m.reshape(2, 1, 16 // factor, factor, 16 // factor, factor)
    has_hole = (blocks == 0).any(dim=5).any(dim=3)
    assert torch.equal(out == 0, has_hole)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_partition_and_combine_algebra(seed):
    img = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(seed))
    a, b, c = random_mask(seed), random_mask(seed + 1), random_mask(seed + 2)
    assert torch.equal(apply_mask(img, a) + apply_mask(img, reverse_mask(a)), img)
    assert torch.equal(combine_masks(a, b), combine_masks(b, a))
    assert torch.equal(combine_masks(combine_masks(a, b), c), combine_masks(a, combine_masks(b, c)))


def test_mask_file_roundtrip(tmp_path):
    m = random_mask(5, (1, 1, 32, 32))
    save_mask_file(m, tmp_path / "m.png")
    assert torch.equal(load_mask_file(tmp_path / "m.png"), m)


def test_mask_file_threshold(tmp_path):
    from PIL import Image

    arr = np.array([[0, 127], [128, 255]], dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "t.png")
    assert load_mask_file(tmp_path / "t.png")[0, 0].tolist() == [[0.0, 0.0], [1.0, 1.0]]
