import os
import time

import pytest
import torch

from diverse_inpaint.cli import main as cli_main
from diverse_inpaint.core import parse_config
from diverse_inpaint.data import make_toy_faces

torch.use_deterministic_algorithms(True)

SMOKE_CONFIG = """\
resolution=64
batch_size=4
coarse_steps=300
latent_steps=300
steps=300
gen_width=16
critic_width=16
eval_buckets=quickdraw,0.1-0.2
eval_per_bucket=4
diversity_images=2
diversity_k=4
"""

TINY_CONFIG = """\
resolution=32
train_split=0.5
batch_size=2
alpha=2
coarse_steps=3
latent_steps=3
steps=3
coarse_width=4
encoder_width=4
decoder_width=8
style_dim=16
gen_width=4
critic_width=4
feature_width=4
sefa_directions=4
eval_buckets=quickdraw,0.1-0.2
eval_per_bucket=3
diversity_images=1
diversity_k=2
"""

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = getattr(report, "_criterion", None)
    if number is None:
        return
    prev = _criteria.get(number)
    ok = report.outcome == "passed"
    _criteria[number] = (prev[0] and ok if prev else ok, report._criterion_title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report._criterion = marker.args[0]
        report._criterion_title = marker.args[1]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, title = _criteria[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}")


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("faces")
    make_toy_faces(path, 20, 64, seed=0)
    return str(path)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny_faces")
    make_toy_faces(path, 6, 32, seed=1)
    return str(path)


def write_config(directory, text):
    path = os.path.join(directory, "run.cfg")
    with open(path, "w") as fh:
        fh.write(text)
    return path


@pytest.fixture(scope="session")
def smoke_cfg():
    return parse_config(SMOKE_CONFIG)


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory, toy_data):
    """Three-stage CLI training on 16 toy faces at 64px; returns (out_dir, config_path, seconds)."""
    out = str(tmp_path_factory.mktemp("smoke"))
    cfg_path = write_config(out, SMOKE_CONFIG)
    start = time.perf_counter()
    for command in ("train-coarse", "train-latent", "train"):
        code = cli_main([command, "--config", cfg_path, "--data", toy_data, "--seed", "0", "--out", out])
        assert code == 0, command
    return out, cfg_path, time.perf_counter() - start


@pytest.fixture(scope="session")
def smoke_pipeline(smoke_run, smoke_cfg):
    from diverse_inpaint.pipeline import Pipeline

    return Pipeline.load(smoke_cfg, smoke_run[0])


def run_all_subcommands(out, data, config_text, seed=0):
    """Run every CLI subcommand once into ``out``; returns the out directory."""
    os.makedirs(out, exist_ok=True)
    cfg_path = write_config(out, config_text)
    image = os.path.join(data, sorted(os.listdir(data))[0])
    common = ["--config", cfg_path, "--seed", str(seed), "--out", out]
    commands = [
        ["train-coarse", "--data", data],
        ["train-latent", "--data", data],
        ["train", "--data", data],
        ["infer", "--image", image, "--mask-auto", "--n", "2"],
        ["explore", "--image", image, "--mask-auto", "--steps", "3"],
        ["evaluate", "--data", data],
    ]
    for command in commands:
        code = cli_main([command[0], *common, *command[1:]])
        assert code == 0, command[0]
    return out


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory, tiny_data):
    """Two full tiny-config CLI sessions with the same seed."""
    root = tmp_path_factory.mktemp("tiny_runs")
    return tuple(
        run_all_subcommands(str(root / name), tiny_data, TINY_CONFIG) for name in ("a", "b")
    )
