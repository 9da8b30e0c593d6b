"""Deterministic stub embedding providers.

Each stub is a fixed random linear projection of the mean-centered input,
seed-pinned in the run config. Centering keeps the projections linear while
making cosine similarities sensitive to content instead of the large DC
component shared by all images. Real encoders plug in behind the same
interface; none are shipped (their weights are out of scope here).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import ConfigError, ShapeError
from .utils import rng_for


@dataclass(frozen=True)
class ImageEmbedding:
    vector: np.ndarray
    source: str  # whole_face | region | generated


class StubProjectionEncoder:
    """Fixed random projection; one deterministic weight matrix per input
    shape, derived from (seed, shape) so restarts are bit-stable."""

    def __init__(self, seed: int, dim: int, expected_shape: tuple[int, ...] | None = None):
        self.seed = seed
        self.dim = dim
        self.expected_shape = expected_shape
        self._weights: dict[tuple[int, ...], np.ndarray] = {}

    def _weight_for(self, shape: tuple[int, ...]) -> np.ndarray:
        if shape not in self._weights:
            size = int(np.prod(shape))
            w = rng_for("stub-encoder", self.seed, *shape).standard_normal((self.dim, size))
            self._weights[shape] = w / np.sqrt(size)
        return self._weights[shape]

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.expected_shape is not None and x.shape != self.expected_shape:
            raise ShapeError(f"expected input shape {self.expected_shape}, got {x.shape}")
        flat = x.ravel()
        centered = flat - flat.mean()
        return self._weight_for(x.shape) @ centered


class StubIdEmbedder:
    """Unit-normalized projection of a whole-face image."""

    def __init__(self, seed: int, dim: int):
        self._proj = StubProjectionEncoder(seed, dim)
        self.dim = dim

    def embed(self, face: np.ndarray) -> np.ndarray:
        v = self._proj.embed(face)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            return np.zeros(self.dim)
        return v / norm


def embed_image(patch: np.ndarray, encoder, source: str = "region") -> ImageEmbedding:
    return ImageEmbedding(vector=encoder.embed(patch), source=source)


def embed_identity(face: np.ndarray, embedder) -> np.ndarray:
    return embedder.embed(face)


@dataclass(frozen=True)
class EncoderSuite:
    """All embedding providers used by the pipeline, built from one config."""

    image: StubProjectionEncoder
    identity: StubIdEmbedder
    dino: StubProjectionEncoder
    clip_image: StubProjectionEncoder
    clip_text: StubProjectionEncoder


def build_encoder_suite(cfg: RunConfig) -> EncoderSuite:
    return EncoderSuite(
        image=StubProjectionEncoder(cfg.image_encoder_seed, cfg.image_embed_dim),
        identity=StubIdEmbedder(cfg.id_embedder_seed, cfg.id_embed_dim),
        dino=StubProjectionEncoder(cfg.dino_seed, 64),
        clip_image=StubProjectionEncoder(cfg.clip_image_seed, 64),
        clip_text=StubProjectionEncoder(cfg.clip_text_seed, 64),
    )


def build_encoder(spec: dict):
    """Encoder adapter factory for config blocks {kind, seed, dims}.

    Only the stub kind ships; file- and service-backed adapters are declared
    seams for real encoders.
    """
    kind = spec.get("kind", "stub")
    if kind == "stub":
        return StubProjectionEncoder(int(spec["seed"]), int(spec["dims"]))
    if kind in ("file", "service"):
        raise NotImplementedError(f"encoder adapter kind {kind!r} is a declared seam; not shipped")
    raise ConfigError(f"unknown encoder kind {kind!r}")
