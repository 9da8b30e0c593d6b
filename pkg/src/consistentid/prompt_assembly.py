"""Fine-grained text side: captioners, delimiter substitution, tokenization,
and the facial-token index list.

Every description of a present region contributes exactly one `<facial>`
token; the index list records where those tokens land after tokenization,
in canonical region order, so visual features can be swapped in later.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CaptionerFailure, SequenceTooLong, TokenizationError
from .face_parsing import N_REGIONS, REGION_ORDER, RegionLabel
from .synth_faces import REGION_COLORS, SIZE_MULT, SKIN_COLORS, SyntheticFace
from .utils import rng_for

FACIAL_TOKEN = "<facial>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

FIXED_PHRASE = "This person has one nose, two eyes, two ears, and a mouth."

_TOKEN_RE = re.compile(r"<facial>|<unk>|[A-Za-z0-9']+|[^\sA-Za-z0-9']")
_NO_SPACE_BEFORE = {".", ",", "!", "?", ";", ":"}


def split_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def join_tokens(tokens: list[str]) -> str:
    out: list[str] = []
    for tok in tokens:
        if out and tok in _NO_SPACE_BEFORE:
            out[-1] += tok
        else:
            out.append(tok)
    return " ".join(out)


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def facial_id(self) -> int:
        return self.token_to_id[FACIAL_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, self.unk_id) for tok in split_text(text)]

    def decode(self, ids) -> str:
        toks = [self.id_to_token[i] for i in ids if i != self.pad_id]
        return join_tokens(toks)


@dataclass(frozen=True)
class MultimodalPrompt:
    raw_text: str
    token_ids: tuple[int, ...]
    facial_positions: tuple[int, ...]  # canonical region order, one per present region
    caption: str


def load_prompt_asset() -> dict:
    data = resources.files("consistentid.assets").joinpath("eval_prompts.json").read_text("utf-8")
    return json.loads(data)


_CAPTION_TEMPLATE = "a portrait of a {gender} with {skin} skin"
_REGION_TEMPLATES = {
    RegionLabel.EYES: "{size} {color} eyes",
    RegionLabel.MOUTH: "a {size} {color} mouth",
    RegionLabel.EARS: "{size} {color} ears",
    RegionLabel.NOSE: "a {size} {color} nose",
    RegionLabel.FACE_OTHER: "{size} {color} fringed face",
}
_FIXED_REGION_TEXTS = {
    RegionLabel.EYES: "the eyes",
    RegionLabel.MOUTH: "the mouth",
    RegionLabel.EARS: "the ears",
    RegionLabel.NOSE: "the nose",
    RegionLabel.FACE_OTHER: "the face",
}


class TemplateCaptioner:
    """Deterministic captions derived from identity parameters; only usable
    on synthetic faces (it reads the identity spec directly)."""

    def describe(self, face: SyntheticFace):
        if not isinstance(face, SyntheticFace):
            raise CaptionerFailure("TemplateCaptioner requires a synthetic face")
        presence = face.masks.presence
        regions = []
        for j, label in enumerate(REGION_ORDER):
            if not presence[j]:
                regions.append("")
                continue
            p = face.identity.params_for(label)
            regions.append(_REGION_TEMPLATES[label].format(size=p.size_name, color=p.color_name))
        g = face.identity.global_params
        caption = _CAPTION_TEMPLATE.format(gender=g.gender_word, skin=g.skin_name)
        return regions, caption


class FixedPhraseCaptioner:
    """The fixed inference-time description; carries no identity details."""

    caption = FIXED_PHRASE

    def describe(self, face):
        presence = face.masks.presence if isinstance(face, SyntheticFace) else (True,) * N_REGIONS
        regions = [
            _FIXED_REGION_TEXTS[label] if presence[j] else ""
            for j, label in enumerate(REGION_ORDER)
        ]
        return regions, self.caption


class JsonFileCaptioner:
    """File-backed adapter speaking the external captioner protocol:
    {image_id} -> {"regions": {label: text}, "caption": text}."""

    def __init__(self, path: str | Path):
        self.table = json.loads(Path(path).read_text(encoding="utf-8"))

    def describe(self, image_id: str):
        entry = self.table.get(image_id)
        if entry is None:
            raise CaptionerFailure(f"no captions for image_id {image_id!r}")
        regions_by_label = entry.get("regions", {})
        missing = [l.value for l in REGION_ORDER if l.value not in regions_by_label]
        if missing:
            raise CaptionerFailure(f"captioner returned fewer than {N_REGIONS} regions; missing {missing}")
        regions = [regions_by_label[label.value] for label in REGION_ORDER]
        return regions, entry.get("caption", "")


def describe_regions(face, captioner):
    """Per-region strings (canonical order) plus a whole-image caption."""
    regions, caption = captioner.describe(face)
    if len(regions) != N_REGIONS:
        raise CaptionerFailure(f"captioner returned {len(regions)} region strings, need {N_REGIONS}")
    return list(regions), caption


def _collect_lexicon() -> list[str]:
    words: set[str] = set()

    def add(text: str):
        words.update(split_text(text))

    add(FIXED_PHRASE)
    add(_CAPTION_TEMPLATE.replace("{gender}", "").replace("{skin}", ""))
    for tpl in _REGION_TEMPLATES.values():
        add(tpl.replace("{size}", "").replace("{color}", ""))
    for text in _FIXED_REGION_TEXTS.values():
        add(text)
    for size in SIZE_MULT:
        words.add(size)
    for palette in REGION_COLORS.values():
        words.update(palette)
    words.update(SKIN_COLORS)
    words.update(["man", "woman", "person", "girl", "boy"])
    asset = load_prompt_asset()
    for prompts in asset["categories"].values():
        for p in prompts:
            add(p.replace(asset["slot"], ""))
    words.discard(FACIAL_TOKEN)
    return sorted(words)


def build_vocabulary() -> Vocabulary:
    """Closed vocabulary over the shipped lexicon; ids are stable because the
    word list is sorted. <pad> is id 0 and maps to the zero embedding."""
    tokens = [PAD_TOKEN, FACIAL_TOKEN, UNK_TOKEN] + _collect_lexicon()
    return Vocabulary(
        token_to_id={t: i for i, t in enumerate(tokens)},
        id_to_token=tuple(tokens),
    )


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = build_vocabulary()
    return _DEFAULT_VOCAB


def substitute_delimiters(
    region_texts: list[str],
    caption: str,
    presence,
    vocab: Vocabulary | None = None,
) -> MultimodalPrompt:
    """Swap each present region's keyword for the facial delimiter and
    concatenate after the caption.

    The first keyword occurrence is replaced; absent regions contribute no
    text and no delimiter.
    """
    vocab = vocab or default_vocabulary()
    if len(presence) != N_REGIONS or len(region_texts) != N_REGIONS:
        raise TokenizationError(f"need {N_REGIONS} region entries")
    parts = [caption] if caption else []
    for j, label in enumerate(REGION_ORDER):
        if not presence[j]:
            continue
        text = region_texts[j]
        pattern = re.compile(rf"\b{label.keyword}\b")
        if not pattern.search(text):
            raise TokenizationError(
                f"keyword {label.keyword!r} not found in region description {text!r}"
            )
        parts.append(pattern.sub(FACIAL_TOKEN, text, count=1))
    raw_text = " ".join(parts)
    token_ids = tuple(vocab.encode(raw_text))
    facial_positions = tuple(i for i, t in enumerate(token_ids) if t == vocab.facial_id)
    if len(facial_positions) != sum(bool(p) for p in presence):
        raise TokenizationError("delimiter count does not match present regions")
    return MultimodalPrompt(
        raw_text=raw_text,
        token_ids=token_ids,
        facial_positions=facial_positions,
        caption=caption,
    )


class LookupTextEncoder:
    """Non-contextual embedding table.

    Row 0 (<pad>) is pinned to zero, so an empty prompt encodes to the zero
    text embedding, which doubles as the unconditional branch input.
    """

    def __init__(self, vocab: Vocabulary, dim: int, seed: int, max_len: int):
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        table = rng_for("text-encoder", seed).standard_normal((len(vocab), dim))
        table[vocab.pad_id] = 0.0
        self.table = table

    def encode(self, prompt: MultimodalPrompt | tuple[int, ...]) -> np.ndarray:
        ids = prompt.token_ids if isinstance(prompt, MultimodalPrompt) else tuple(prompt)
        if len(ids) > self.max_len:
            raise SequenceTooLong(f"{len(ids)} tokens exceed max_len={self.max_len}")
        out = np.zeros((self.max_len, self.dim), dtype=np.float64)
        if ids:
            out[: len(ids)] = self.table[list(ids)]
        return out
