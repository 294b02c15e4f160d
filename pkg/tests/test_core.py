import os

import numpy as np
import pytest
import torch

from diverse_inpaint.core import (
    CheckpointError, ConfigError, LossWeights, TrainConfig, build_seeded, load_checkpoint,
    load_config, parse_config, save_checkpoint, seeded_rng,
)


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    w = cfg.weights
    assert (w.lambda_adv, w.lambda_ssim, w.lambda_sty, w.lambda_hole, w.lambda_valid) == (0.5, 120, 3, 0.5, 0.5)
    assert w.lambda_gp == 10
    assert w.alpha == 4


def test_override_single_key():
    cfg = parse_config("# comment\nlambda_hole=6.0\n")
    assert cfg.lambda_hole == 6.0
    assert cfg.lambda_valid == 0.5


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError, match="nonnegative required"):
        parse_config("lambda_hole=-1")


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r":3: unknown key 'lambda_typo'"):
        parse_config("alpha=2\n\nlambda_typo=1\n")


def test_parse_failure_reports_line():
    with pytest.raises(ConfigError, match=r":2: bad value"):
        parse_config("alpha=2\nsteps=many\n")
    with pytest.raises(ConfigError, match=r":1: expected key=value"):
        parse_config("just words")


def test_alpha_must_be_positive():
    with pytest.raises(ConfigError):
        LossWeights(alpha=0)


def test_bad_resolution():
    with pytest.raises(ConfigError):
        TrainConfig(resolution=48)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    y = torch.randn(3, 1, 2, 5)
    save_checkpoint({"x": x, "conv.weight": y, "scalar": torch.tensor(0.1)}, {"stage": "t", "seed": 3}, tmp_path)
    weights, meta = load_checkpoint(tmp_path)
    assert list(weights) == ["x", "conv.weight", "scalar"]
    assert torch.equal(weights["x"], x)
    assert torch.equal(weights["conv.weight"], y)
    assert weights["scalar"].shape == ()
    assert meta == {"stage": "t", "seed": 3}
    assert (tmp_path / "manifest.txt").read_text().splitlines()[0] == "x 2 2"


def test_empty_checkpoint(tmp_path):
    save_checkpoint({}, {}, tmp_path)
    weights, meta = load_checkpoint(tmp_path)
    assert weights == {} and meta == {}
    assert os.path.getsize(tmp_path / "weights.bin") == 0


def test_truncated_payload_detected(tmp_path):
    save_checkpoint({"x": torch.ones(2, 2)}, {}, tmp_path)
    payload = tmp_path / "weights.bin"
    payload.write_bytes(payload.read_bytes()[:-1])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_manifest_payload_mismatch(tmp_path):
    save_checkpoint({"x": torch.ones(2, 2)}, {}, tmp_path)
    (tmp_path / "manifest.txt").write_text("x 2 1\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_payload_is_little_endian_float32(tmp_path):
    save_checkpoint({"x": torch.tensor([1.5, -2.0])}, {}, tmp_path)
    raw = np.frombuffer((tmp_path / "weights.bin").read_bytes(), dtype="<f4")
    assert raw.tolist() == [1.5, -2.0]


def test_seeded_rng_determinism():
    a = torch.rand(100, generator=seeded_rng(0))
    b = torch.rand(100, generator=seeded_rng(0))
    c = torch.rand(100, generator=seeded_rng(1))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_seeded_rng_shapes():
    g = seeded_rng(0)
    assert torch.rand((3,), generator=g).shape == (3,)
    assert torch.rand((2, 2), generator=g).shape == (2, 2)


def test_build_seeded_is_deterministic_and_isolated():
    torch.manual_seed(99)
    before = torch.rand(1)
    a = build_seeded(seeded_rng(5), torch.nn.Linear, 4, 3)
    b = build_seeded(seeded_rng(5), torch.nn.Linear, 4, 3)
    assert torch.equal(a.weight, b.weight)
    torch.manual_seed(99)
    build_seeded(seeded_rng(5), torch.nn.Linear, 4, 3)
    assert torch.equal(torch.rand(1), before)  # global stream untouched
