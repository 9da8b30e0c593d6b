"""Procedural toy-face corpus with exact ground-truth region masks.

Faces are built from analytic ellipses: the binary masks are the exact
supports of those shapes, so identity ("same parameters") and localization
("inside the mask") have unambiguous oracles. Images are rendered with a
soft edge so the latent codec reconstructs them well; masks stay hard.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .face_parsing import N_REGIONS, REGION_ORDER, RegionLabel, RegionMaskSet
from .utils import rng_for

BASE_SIZE = 64
BACKGROUND = np.array([0.82, 0.87, 0.92], dtype=np.float32)
NEUTRAL_GRAY = np.array([0.5, 0.5, 0.5], dtype=np.float32)

SKIN_COLORS = {
    "fair": (0.96, 0.86, 0.74),
    "tan": (0.85, 0.70, 0.55),
    "olive": (0.72, 0.62, 0.46),
    "bronze": (0.63, 0.47, 0.34),
    "deep": (0.45, 0.32, 0.24),
}

REGION_COLORS: dict[RegionLabel, dict[str, tuple[float, float, float]]] = {
    RegionLabel.EYES: {
        "blue": (0.25, 0.45, 0.85),
        "green": (0.25, 0.70, 0.40),
        "brown": (0.45, 0.28, 0.15),
        "gray": (0.55, 0.58, 0.62),
        "amber": (0.85, 0.60, 0.20),
        "violet": (0.55, 0.30, 0.75),
    },
    RegionLabel.MOUTH: {
        "red": (0.80, 0.15, 0.18),
        "pink": (0.92, 0.50, 0.60),
        "coral": (0.95, 0.45, 0.30),
        "maroon": (0.55, 0.12, 0.20),
    },
    RegionLabel.EARS: {
        "rosy": (0.93, 0.66, 0.58),
        "pale": (0.97, 0.90, 0.82),
        "shaded": (0.60, 0.46, 0.38),
        "tawny": (0.82, 0.64, 0.50),
    },
    RegionLabel.NOSE: {
        "rosy": (0.90, 0.62, 0.55),
        "dusky": (0.55, 0.40, 0.32),
        "shaded": (0.65, 0.50, 0.42),
        "bright": (0.98, 0.80, 0.68),
    },
    RegionLabel.FACE_OTHER: {
        "black": (0.12, 0.10, 0.10),
        "brown": (0.40, 0.26, 0.15),
        "blond": (0.90, 0.78, 0.45),
        "auburn": (0.55, 0.25, 0.12),
        "silver": (0.75, 0.75, 0.78),
    },
}

SIZE_MULT = {"small": 0.85, "large": 1.15}

# (dy, dx, ry, rx, mirrored): ellipse offsets from the face center; mirrored
# shapes are drawn at both +dx and -dx (eyes, ears)
_REGION_SHAPES: dict[RegionLabel, tuple[float, float, float, float, bool]] = {
    RegionLabel.FACE_OTHER: (-18.0, 0.0, 4.0, 13.0, False),
    RegionLabel.EYES: (-7.0, 7.0, 3.2, 4.0, True),
    RegionLabel.EARS: (-4.0, 17.0, 4.5, 2.5, True),
    RegionLabel.NOSE: (1.0, 0.0, 4.0, 3.0, False),
    RegionLabel.MOUTH: (11.0, 0.0, 2.8, 7.0, False),
}

_OUTLINE_RY = 26.0
_OUTLINE_RX = 21.0
# soft-edge width in px; wide enough that the 4x downsampling codec
# reconstructs faces above 30 dB PSNR
_AA_WIDTH = 6.0


@dataclass(frozen=True)
class RegionParams:
    label: str
    color_name: str
    size_name: str


@dataclass(frozen=True)
class GlobalParams:
    skin_name: str
    outline_scale: float
    gender_word: str
    age: int


@dataclass(frozen=True)
class IdentitySpec:
    seed: int
    region_params: tuple[RegionParams, ...]  # canonical region order
    global_params: GlobalParams

    def params_for(self, label: RegionLabel) -> RegionParams:
        return self.region_params[REGION_ORDER.index(label)]


@dataclass(frozen=True)
class SyntheticFace:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    masks: RegionMaskSet
    identity: IdentitySpec
    pose_seed: int
    face_mask: np.ndarray  # (H, W) uint8 whole-face (outline) support


def generate_identity(seed: int) -> IdentitySpec:
    if seed < 0:
        raise ValueError(f"identity seed must be >= 0, got {seed}")
    rng = rng_for("identity", seed)
    regions = []
    for label in REGION_ORDER:
        palette = sorted(REGION_COLORS[label])
        color = palette[int(rng.integers(len(palette)))]
        size = "small" if rng.random() < 0.5 else "large"
        regions.append(RegionParams(label=label.value, color_name=color, size_name=size))
    skin = sorted(SKIN_COLORS)[int(rng.integers(len(SKIN_COLORS)))]
    scale = round(0.85 + 0.20 * float(rng.random()), 4)
    gender = "man" if rng.random() < 0.5 else "woman"
    age = int(rng.integers(18, 80))
    return IdentitySpec(
        seed=seed,
        region_params=tuple(regions),
        global_params=GlobalParams(skin_name=skin, outline_scale=scale, gender_word=gender, age=age),
    )


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _ellipse_dist(yy, xx, cy, cx, ry, rx):
    return np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)


def _soft_alpha(dist, ry, rx):
    # approximate signed pixel distance to the boundary along the minor axis
    return np.clip(0.5 + (1.0 - dist) * min(ry, rx) / _AA_WIDTH, 0.0, 1.0)


def _region_ellipses(label: RegionLabel, size_mult: float, cy: float, cx: float, factor: float):
    dy, dx, ry, rx, mirrored = _REGION_SHAPES[label]
    ry, rx = ry * size_mult * factor, rx * size_mult * factor
    centers = [(cy + dy * factor, cx + dx * factor)]
    if mirrored:
        centers.append((cy + dy * factor, cx - dx * factor))
    return [(ecy, ecx, ry, rx) for ecy, ecx in centers]


def render_face(
    identity: IdentitySpec,
    pose_seed: int = 0,
    drop_regions: frozenset[RegionLabel] | set[RegionLabel] = frozenset(),
    image_size: int = BASE_SIZE,
) -> SyntheticFace:
    """Render one face; dropped regions are left as plain skin and get
    all-zero masks. Deterministic in (identity, pose_seed, drop_regions)."""
    factor = image_size / BASE_SIZE
    rng = rng_for("pose", identity.seed, pose_seed)
    off_y = int(rng.integers(-3, 4)) * factor
    off_x = int(rng.integers(-3, 4)) * factor
    cy = image_size / 2.0 + off_y
    cx = image_size / 2.0 + off_x

    scale = identity.global_params.outline_scale
    ry_o = _OUTLINE_RY * scale * factor
    rx_o = _OUTLINE_RX * scale * factor

    yy, xx = _grid(image_size)
    d_out = _ellipse_dist(yy, xx, cy, cx, ry_o, rx_o)
    outline = (d_out <= 1.0).astype(np.uint8)
    alpha_out = _soft_alpha(d_out, ry_o, rx_o)

    img = np.empty((image_size, image_size, 3), dtype=np.float64)
    img[:] = BACKGROUND
    skin = np.array(SKIN_COLORS[identity.global_params.skin_name], dtype=np.float64)
    img = img * (1.0 - alpha_out[:, :, None]) + skin * alpha_out[:, :, None]

    drop = {RegionLabel(d) if not isinstance(d, RegionLabel) else d for d in drop_regions}
    mask_stack = np.zeros((N_REGIONS, image_size, image_size), dtype=np.uint8)
    for j, label in enumerate(REGION_ORDER):
        if label in drop:
            continue
        params = identity.params_for(label)
        color = np.array(REGION_COLORS[label][params.color_name], dtype=np.float64)
        support = np.zeros((image_size, image_size), dtype=bool)
        alpha = np.zeros((image_size, image_size), dtype=np.float64)
        for ecy, ecx, ry, rx in _region_ellipses(label, SIZE_MULT[params.size_name], cy, cx, factor):
            d = _ellipse_dist(yy, xx, ecy, ecx, ry, rx)
            support |= d <= 1.0
            alpha = np.maximum(alpha, _soft_alpha(d, ry, rx))
        support &= outline.astype(bool)
        alpha *= alpha_out  # soft edges never paint outside the face
        img = img * (1.0 - alpha[:, :, None]) + color * alpha[:, :, None]
        mask_stack[j] = support.astype(np.uint8)

    return SyntheticFace(
        image=img.astype(np.float32),
        masks=RegionMaskSet(mask_stack),
        identity=identity,
        pose_seed=pose_seed,
        face_mask=outline,
    )


@lru_cache(maxsize=8)
def template_masks(image_size: int = BASE_SIZE) -> RegionMaskSet:
    """Canonical region layout (mid-sized shapes, centered face): the mask
    assignment used for images that carry no ground truth."""
    factor = image_size / BASE_SIZE
    cy = cx = image_size / 2.0
    yy, xx = _grid(image_size)
    outline = _ellipse_dist(yy, xx, cy, cx, _OUTLINE_RY * 0.95 * factor, _OUTLINE_RX * 0.95 * factor) <= 1.0
    mask_stack = np.zeros((N_REGIONS, image_size, image_size), dtype=np.uint8)
    for j, label in enumerate(REGION_ORDER):
        support = np.zeros((image_size, image_size), dtype=bool)
        for ecy, ecx, ry, rx in _region_ellipses(label, 1.0, cy, cx, factor):
            support |= _ellipse_dist(yy, xx, ecy, ecx, ry, rx) <= 1.0
        mask_stack[j] = (support & outline).astype(np.uint8)
    return RegionMaskSet(mask_stack)


def corpus_identity_seed(corpus_seed: int, index: int) -> int:
    return corpus_seed * 100003 + index


def build_corpus(
    n_identities: int,
    images_per_identity: int,
    seed: int,
    image_size: int = BASE_SIZE,
) -> list[SyntheticFace]:
    """n_identities x images_per_identity faces; pose varies within identity."""
    if n_identities < 1:
        raise ValueError("n_identities must be >= 1")
    faces = []
    for i in range(n_identities):
        identity = generate_identity(corpus_identity_seed(seed, i))
        for p in range(images_per_identity):
            faces.append(render_face(identity, pose_seed=p, image_size=image_size))
    return faces


def apply_background_dropout_mask(image: np.ndarray, face_mask: np.ndarray) -> np.ndarray:
    """Replace all pixels outside the whole-face support with neutral gray."""
    m = face_mask[:, :, None].astype(np.float32)
    return (image * m + NEUTRAL_GRAY * (1.0 - m)).astype(np.float32)
