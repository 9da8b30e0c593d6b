"""Run configuration: defaults < config file < explicit overrides.

Every command serializes the merged config into its output metadata so any
artifact can be replayed from the metadata alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .utils import sha256_bytes


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # image / latent geometry
    image_size: int = 64
    latent_size: int = 16
    latent_channels: int = 4
    crop_size: int = 16

    # embedding dimensions
    text_dim: int = 64
    seq_len: int = 32
    image_embed_dim: int = 64
    id_embed_dim: int = 32
    time_dim: int = 32
    base_channels: int = 16
    mlp_hidden: int = 128

    # diffusion
    timesteps: int = 100
    ddim_steps: int = 50
    guidance_scale: float = 5.0
    merge_step: int = 10
    latent_scale: float = 2.0

    # training
    lambda_facial: float = 0.01
    lr: float = 1e-4
    batch_size: int = 16
    bg_drop_prob: float = 0.5
    zero_text_prob: float = 0.1
    pretrain_steps: int = 3000
    train_steps: int = 2000
    corpus_identities: int = 64
    corpus_poses: int = 4

    # fixed seeds of the deterministic stub encoders
    image_encoder_seed: int = 101
    id_embedder_seed: int = 202
    dino_seed: int = 303
    clip_text_seed: int = 404
    clip_image_seed: int = 505
    text_encoder_seed: int = 606
    denoiser_init_seed: int = 707
    facial_init_seed: int = 808

    def __post_init__(self):
        if not 0.0 <= self.bg_drop_prob <= 1.0:
            raise ConfigError(f"bg_drop_prob must be in [0,1], got {self.bg_drop_prob}")
        if not 0.0 <= self.zero_text_prob <= 1.0:
            raise ConfigError(f"zero_text_prob must be in [0,1], got {self.zero_text_prob}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lambda_facial < 0:
            raise ConfigError(f"lambda_facial must be >= 0, got {self.lambda_facial}")
        if self.image_size % self.latent_size != 0:
            raise ConfigError("image_size must be a multiple of latent_size")
        if not 0 <= self.merge_step <= self.ddim_steps:
            raise ConfigError(
                f"merge_step must be in [0, {self.ddim_steps}], got {self.merge_step}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def fingerprint(self) -> str:
        return sha256_bytes(self.to_json().encode("utf-8"))[:16]

    def replace(self, **kwargs) -> "RunConfig":
        return merge_config(self, kwargs)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _check_keys(values: dict, source: str) -> None:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {source}: {', '.join(unknown)}")


def merge_config(base: RunConfig, overrides: dict, source: str = "overrides") -> RunConfig:
    _check_keys(overrides, source)
    merged = {**base.to_dict(), **overrides}
    return RunConfig(**merged)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return merge_config(base, values, source=str(path))
