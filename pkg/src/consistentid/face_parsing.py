"""Region labels, mask containers, parsers, crops, and mask downsampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParserFailure, ShapeError
from . import imgio


class RegionLabel(enum.Enum):
    """The five facial regions, in the canonical order used for every
    region index j throughout the package."""

    EYES = "eyes"
    MOUTH = "mouth"
    EARS = "ears"
    NOSE = "nose"
    FACE_OTHER = "face_other"

    @property
    def keyword(self) -> str:
        """Word substituted by the facial delimiter in region descriptions."""
        return "face" if self is RegionLabel.FACE_OTHER else self.value


REGION_ORDER: tuple[RegionLabel, ...] = (
    RegionLabel.EYES,
    RegionLabel.MOUTH,
    RegionLabel.EARS,
    RegionLabel.NOSE,
    RegionLabel.FACE_OTHER,
)

N_REGIONS = len(REGION_ORDER)


@dataclass(frozen=True)
class RegionMaskSet:
    """Ordered stack of N binary masks, one per region label."""

    masks: np.ndarray  # (N, H, W) uint8, values in {0, 1}

    def __post_init__(self):
        m = self.masks
        if m.ndim != 3 or m.shape[0] != N_REGIONS:
            raise ShapeError(f"expected ({N_REGIONS}, H, W) masks, got {m.shape}")
        bad = (m != 0) & (m != 1)
        if bad.any():
            raise ParserFailure("masks must be binary (0/1)")

    @property
    def presence(self) -> tuple[bool, ...]:
        return tuple(bool(self.masks[j].any()) for j in range(N_REGIONS))

    def mask_for(self, label: RegionLabel) -> np.ndarray:
        return self.masks[REGION_ORDER.index(label)]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def union(self) -> np.ndarray:
        return (self.masks.sum(axis=0) > 0).astype(np.uint8)


@dataclass(frozen=True)
class RegionCrops:
    """Per-region patches at canonical size plus the segmented whole face."""

    crops: np.ndarray   # (N, S, S, C) float32; zero patch for absent regions
    i_face: np.ndarray  # image masked to the union of region masks
    i_mask: np.ndarray  # (H, W) uint8 union mask


class GroundTruthParser:
    """Default parser: exact masks for synthetic faces.

    Plain arrays (e.g. generated images) have no attached ground truth; they
    are assigned the canonical template layout, or all-absent masks when the
    image is constant (no content to place a face on).
    """

    def parse(self, image) -> RegionMaskSet:
        from .synth_faces import SyntheticFace, template_masks

        if isinstance(image, SyntheticFace):
            return RegionMaskSet(image.masks.masks.copy())
        arr = np.asarray(image)
        if arr.ndim != 3:
            raise ParserFailure(f"expected an H x W x C image, got shape {arr.shape}")
        if float(arr.max()) - float(arr.min()) < 1e-9:
            return RegionMaskSet(np.zeros((N_REGIONS,) + arr.shape[:2], dtype=np.uint8))
        return template_masks(arr.shape[0])


class FileMaskParser:
    """Adapter that loads externally produced masks.

    Expects one 8-bit PGM per region named `<image_stem>.mask.<label>.pgm`
    with values 0/255.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def parse(self, image_stem: str) -> RegionMaskSet:
        stacked = []
        for label in REGION_ORDER:
            path = self.directory / f"{image_stem}.mask.{label.value}.pgm"
            if not path.exists():
                raise ParserFailure(f"mask file not found: {path}")
            arr = imgio.read_pgm(path)
            vals = set(np.unique(arr).tolist())
            if not vals <= {0, 255}:
                raise ParserFailure(f"{path}: mask values must be 0/255, got {sorted(vals)}")
            stacked.append((arr == 255).astype(np.uint8))
        return RegionMaskSet(np.stack(stacked))


def parse_face(image, parser) -> RegionMaskSet:
    """Run a parser and validate its output against the mask contract."""
    result = parser.parse(image)
    if not isinstance(result, RegionMaskSet):
        try:
            result = RegionMaskSet(np.asarray(result))
        except (ShapeError, ParserFailure, ValueError) as e:
            raise ParserFailure(f"parser returned invalid masks: {e}") from e
    arr = np.asarray(getattr(image, "image", image))
    if isinstance(arr, np.ndarray) and arr.ndim == 3 and result.shape != arr.shape[:2]:
        raise ParserFailure(
            f"parser returned masks of shape {result.shape} for image {arr.shape[:2]}"
        )
    return result


def _nn_resize(patch: np.ndarray, size: int) -> np.ndarray:
    h, w = patch.shape[:2]
    ri = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    ci = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return patch[np.ix_(ri, ci)]


def crop_regions(image, masks: RegionMaskSet, crop_size: int = 16) -> RegionCrops:
    """Cut each region to a canonical patch.

    The patch holds exactly the masked pixels inside the region's tight
    bounding box, zero-padded top-left when the box is smaller than the
    canonical size and nearest-neighbor rescaled when larger (padding keeps
    pixel mass exact, which several oracles rely on).
    """
    img = np.asarray(getattr(image, "image", image), dtype=np.float32)
    if img.shape[:2] != masks.shape:
        raise ShapeError(f"image {img.shape[:2]} does not match masks {masks.shape}")
    n_ch = img.shape[2]
    crops = np.zeros((N_REGIONS, crop_size, crop_size, n_ch), dtype=np.float32)
    for j in range(N_REGIONS):
        m = masks.masks[j]
        if not m.any():
            continue
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        r0, r1 = rows[0], rows[-1] + 1
        c0, c1 = cols[0], cols[-1] + 1
        content = (img * m[:, :, None])[r0:r1, c0:c1]
        if content.shape[0] <= crop_size and content.shape[1] <= crop_size:
            crops[j, : content.shape[0], : content.shape[1]] = content
        else:
            crops[j] = _nn_resize(content, crop_size)
    i_mask = masks.union()
    i_face = (img * i_mask[:, :, None]).astype(np.float32)
    return RegionCrops(crops=crops, i_face=i_face, i_mask=i_mask)


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Block-average a binary mask to (h, w); a cell activates when the mean
    of its source block is >= 0.5 (ties active)."""
    mask = np.asarray(mask)
    big_h, big_w = mask.shape
    if h > big_h or w > big_w or big_h % h != 0 or big_w % w != 0:
        raise DimensionError(f"cannot downsample {mask.shape} to ({h}, {w})")
    blocks = mask.astype(np.float64).reshape(h, big_h // h, w, big_w // w)
    means = blocks.mean(axis=(1, 3))
    return (means >= 0.5).astype(np.uint8)
