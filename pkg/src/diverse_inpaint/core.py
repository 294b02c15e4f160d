"""Shared configuration, RNG and checkpoint plumbing."""

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from typing import Dict, Mapping, Tuple

import numpy as np
import torch


class ConfigError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.5
    lambda_ssim: float = 120.0
    lambda_sty: float = 3.0
    lambda_hole: float = 0.5
    lambda_valid: float = 0.5
    lambda_gp: float = 10.0
    alpha: int = 4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name}: nonnegative required")
        if self.alpha < 1:
            raise ConfigError("alpha: must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    # loss weights (flattened into the config file namespace)
    lambda_adv: float = 0.5
    lambda_ssim: float = 120.0
    lambda_sty: float = 3.0
    lambda_hole: float = 0.5
    lambda_valid: float = 0.5
    lambda_gp: float = 10.0
    alpha: int = 4

    resolution: int = 64
    data_dir: str = ""
    train_split: float = 0.8
    batch_size: int = 4

    # masks
    square_size: int = 0  # 0 -> round(85/256 * resolution)
    stroke_count_min: int = 1
    stroke_count_max: int = 4
    stroke_width_min: int = 0  # 0 -> scaled defaults
    stroke_width_max: int = 0
    vertex_count_min: int = 2
    vertex_count_max: int = 6
    mask_retries: int = 200

    # coarse stage
    coarse_steps: int = 300
    coarse_lr: float = 2e-3
    coarse_width: int = 16
    coarse_l1_weight: float = 1.0
    coarse_hole_weight: float = 1.0

    # latent stage
    latent_steps: int = 300
    latent_lr: float = 2e-3
    style_dim: int = 128
    encoder_width: int = 16
    decoder_width: int = 32
    latent_l1_weight: float = 1.0
    latent_ssim_weight: float = 1.0
    sefa_layers: str = "all"
    sefa_directions: int = 8
    delta_magnitude: float = 3.0

    # generator stage
    steps: int = 300
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    gen_width: int = 64
    critic_width: int = 16
    feature_width: int = 8
    variant: str = "sparn"
    ssim_scales: int = 0  # 0 -> max feasible at resolution

    # evaluation
    eval_buckets: str = "quickdraw,0.1-0.2,0.2-0.3"
    eval_per_bucket: int = 4
    diversity_images: int = 4
    diversity_k: int = 4

    @property
    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_adv=self.lambda_adv,
            lambda_ssim=self.lambda_ssim,
            lambda_sty=self.lambda_sty,
            lambda_hole=self.lambda_hole,
            lambda_valid=self.lambda_valid,
            lambda_gp=self.lambda_gp,
            alpha=self.alpha,
        )

    def __post_init__(self):
        self.weights  # validates lambdas and alpha
        res = self.resolution
        if res < 32 or res & (res - 1):
            raise ConfigError("resolution: power of 2 >= 32 required")
        if not 0.0 < self.train_split <= 1.0:
            raise ConfigError("train_split: must lie in (0, 1]")
        if self.variant not in ("sparn", "spade_decoder", "no_rn"):
            raise ConfigError(f"variant: unknown value {self.variant!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float", int, float) and v < 0:
                raise ConfigError(f"{f.name}: nonnegative required")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_CASTS = {"int": int, "float": float, "str": str, int: int, float: float, str: str}


def parse_config(text: str, source: str = "<string>") -> TrainConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CASTS[types[key]](value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    try:
        return TrainConfig(**values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())


def seeded_rng(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def spawn_seed(rng: torch.Generator) -> int:
    return int(torch.randint(0, 2**31 - 1, (1,), generator=rng))


def build_seeded(rng: torch.Generator, factory, *args, **kwargs):
    """Construct a module with parameter init drawn from ``rng``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spawn_seed(rng))
        return factory(*args, **kwargs)


# -- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.txt"
PAYLOAD = "weights.bin"
META = "meta.json"


@dataclass
class CheckpointBundle:
    path: str
    stage: str
    meta: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)  # in-memory training statistics, not persisted


def save_checkpoint(named_weights: Mapping[str, torch.Tensor], meta: dict, path) -> None:
    os.makedirs(path, exist_ok=True)
    lines, chunks = [], []
    for name, t in named_weights.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = t.detach().cpu().to(torch.float32).numpy()
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in {name}")
        lines.append(" ".join([name, *map(str, arr.shape)]))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    with open(os.path.join(path, PAYLOAD), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(os.path.join(path, META), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    try:
        with open(os.path.join(path, MANIFEST), encoding="utf-8") as fh:
            manifest = [line.split() for line in fh if line.strip()]
        with open(os.path.join(path, PAYLOAD), "rb") as fh:
            payload = fh.read()
        with open(os.path.join(path, META), encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint at {path}: {e.filename}") from None

    weights, offset = {}, 0
    for entry in manifest:
        name, shape = entry[0], tuple(int(d) for d in entry[1:])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CheckpointError(f"payload truncated while reading {name}")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        weights[name] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"manifest covers {offset} bytes but payload has {len(payload)}")
    return weights, meta


def save_module(module: torch.nn.Module, meta: dict, path) -> CheckpointBundle:
    save_checkpoint(module.state_dict(), meta, path)
    return CheckpointBundle(str(path), meta.get("stage", ""), meta)


def load_module(module: torch.nn.Module, path, stage: str = None) -> dict:
    weights, meta = load_checkpoint(path)
    if stage is not None and meta.get("stage") != stage:
        raise CheckpointError(f"{path}: expected stage {stage!r}, found {meta.get('stage')!r}")
    state = module.state_dict()
    missing = set(state) ^ set(weights)
    if missing:
        raise CheckpointError(f"{path}: tensor set mismatch: {sorted(missing)[:5]}")
    module.load_state_dict({k: weights[k].to(state[k].dtype) for k in state})
    return meta
