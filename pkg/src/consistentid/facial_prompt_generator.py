"""Fused multimodal condition builder.

Pipeline: project whole-face + per-region stub embeddings into text space,
align them with single-head self-attention, overwrite the text embedding at
the facial-delimiter positions with the aligned rows, refine with two
residual MLP blocks (giving the fused text condition), and project the
whole-image embeddings into one extra identity token.

Forward passes cache enough to run the hand-written backward used during
training; gradients are verified against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import ArityError, ShapeError
from .face_parsing import N_REGIONS
from .utils import rng_for


@dataclass(frozen=True)
class RegionFeatureMatrix:
    """Aligned per-region features; rows of absent regions are exactly zero."""

    fhat: np.ndarray  # (N, D)
    presence: tuple[bool, ...]


@dataclass(frozen=True)
class FusedCondition:
    c_f: np.ndarray  # (L, D) fused text-visual embedding
    c_i: np.ndarray  # (D,) overall identity token

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.c_f, self.c_i[None, :]], axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def init_facial_params(cfg: RunConfig) -> dict[str, np.ndarray]:
    """Trainable weights; attention output and MLP second layers start at
    zero so the whole module begins as an identity map on the text side."""
    rng = rng_for("facial-init", cfg.facial_init_seed)
    d, h = cfg.text_dim, cfg.mlp_hidden
    d_img, d_id = cfg.image_embed_dim, cfg.id_embed_dim

    def normal(shape, scale):
        return rng.standard_normal(shape) * scale

    params = {
        "inp.w": normal((d_img, d), 1.0 / np.sqrt(d_img)),
        "inp.b": np.zeros(d),
        "attn.wq": normal((d, d), 1.0 / np.sqrt(d)),
        "attn.wk": normal((d, d), 1.0 / np.sqrt(d)),
        "attn.wv": normal((d, d), 1.0 / np.sqrt(d)),
        "attn.wo": np.zeros((d, d)),
        "idproj.w": normal((d_img + d_id, d), 1.0 / np.sqrt(d_img + d_id)),
        "idproj.b": np.zeros(d),
    }
    for name in ("mlp1", "mlp2"):
        params[f"{name}.w1"] = normal((d, h), 1.0 / np.sqrt(d))
        params[f"{name}.b1"] = np.zeros(h)
        params[f"{name}.w2"] = np.zeros((h, d))
        params[f"{name}.b2"] = np.zeros(d)
    return params


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# self-attention alignment
# ---------------------------------------------------------------------------

def align_features_batch(params, whole: np.ndarray, regions: np.ndarray, presence: np.ndarray):
    """whole (B, D_img), regions (B, N, D_img), presence (B, N) bool ->
    fhat (B, N, D) with absent rows forced to zero, plus the backward cache."""
    if regions.shape[1] != N_REGIONS:
        raise ShapeError(f"expected {N_REGIONS} region embeddings, got {regions.shape[1]}")
    tok_in = np.concatenate([whole[:, None, :], regions], axis=1)
    tokens = tok_in @ params["inp.w"] + params["inp.b"]
    d = tokens.shape[-1]
    q = tokens @ params["attn.wq"]
    k = tokens @ params["attn.wk"]
    v = tokens @ params["attn.wv"]
    s = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    y = a @ v
    out = tokens + y @ params["attn.wo"]
    pres = presence.astype(np.float64)
    fhat = out[:, 1:, :] * pres[:, :, None]
    cache = {"tok_in": tok_in, "tokens": tokens, "q": q, "k": k, "v": v, "a": a, "y": y,
             "presence": pres}
    return fhat, cache


def align_features_backward(params, cache, d_fhat: np.ndarray, grads: dict[str, np.ndarray]):
    d = cache["tokens"].shape[-1]
    d_fhat = d_fhat * cache["presence"][:, :, None]
    d_out = np.zeros_like(cache["tokens"])
    d_out[:, 1:, :] = d_fhat
    d_tokens = d_out.copy()
    d_y = d_out @ params["attn.wo"].T
    grads["attn.wo"] += np.einsum("bip,biq->pq", cache["y"], d_out)
    d_a = d_y @ cache["v"].transpose(0, 2, 1)
    d_v = cache["a"].transpose(0, 2, 1) @ d_y
    a = cache["a"]
    d_s = a * (d_a - (d_a * a).sum(axis=-1, keepdims=True))
    d_s /= np.sqrt(d)
    d_q = d_s @ cache["k"]
    d_k = d_s.transpose(0, 2, 1) @ cache["q"]
    d_tokens += d_q @ params["attn.wq"].T + d_k @ params["attn.wk"].T + d_v @ params["attn.wv"].T
    grads["attn.wq"] += np.einsum("bip,biq->pq", cache["tokens"], d_q)
    grads["attn.wk"] += np.einsum("bip,biq->pq", cache["tokens"], d_k)
    grads["attn.wv"] += np.einsum("bip,biq->pq", cache["tokens"], d_v)
    grads["inp.w"] += np.einsum("bip,biq->pq", cache["tok_in"], d_tokens)
    grads["inp.b"] += d_tokens.sum(axis=(0, 1))


def align_features(params, whole_emb: np.ndarray, region_embs: np.ndarray, presence) -> RegionFeatureMatrix:
    """Single-sample alignment; absent regions must be passed as zero vectors."""
    fhat, _ = align_features_batch(
        params,
        np.asarray(whole_emb, dtype=np.float64)[None],
        np.asarray(region_embs, dtype=np.float64)[None],
        np.asarray(presence, dtype=bool)[None],
    )
    return RegionFeatureMatrix(fhat=fhat[0], presence=tuple(bool(p) for p in presence))


# ---------------------------------------------------------------------------
# visual token replacement
# ---------------------------------------------------------------------------

def visual_token_replace(text_emb: np.ndarray, features: RegionFeatureMatrix, index_list) -> np.ndarray:
    """Overwrite text embedding rows at the delimiter positions with the
    aligned rows of the present regions; every other row is untouched."""
    length = text_emb.shape[0]
    present_rows = [j for j, p in enumerate(features.presence) if p]
    index_list = list(index_list)
    if len(index_list) != len(present_rows):
        raise ArityError(
            f"index list has {len(index_list)} entries for {len(present_rows)} present regions"
        )
    for pos in index_list:
        if not 0 <= pos < length:
            raise IndexError(f"facial position {pos} outside sequence of length {length}")
    out = text_emb.copy()
    for pos, row in zip(index_list, present_rows):
        out[pos] = features.fhat[row]
    return out


def replace_backward(d_replaced: np.ndarray, presence, index_list):
    """Split the upstream gradient into the per-region feature gradient."""
    n = len(presence)
    d_fhat = np.zeros((n, d_replaced.shape[1]), dtype=np.float64)
    present_rows = [j for j, p in enumerate(presence) if p]
    for pos, row in zip(index_list, present_rows):
        d_fhat[row] = d_replaced[pos]
    return d_fhat


# ---------------------------------------------------------------------------
# residual MLP refinement -> C_f
# ---------------------------------------------------------------------------

def _mlp_block_forward(x, params, name):
    h = x @ params[f"{name}.w1"] + params[f"{name}.b1"]
    act = silu(h)
    y = x + act @ params[f"{name}.w2"] + params[f"{name}.b2"]
    return y, (x, h, act)


def _mlp_block_backward(d_y, cache, params, name, grads):
    x, h, act = cache
    d_act = d_y @ params[f"{name}.w2"].T
    grads[f"{name}.w2"] += np.einsum("bip,biq->pq", act, d_y)
    grads[f"{name}.b2"] += d_y.sum(axis=(0, 1))
    d_h = d_act * silu_grad(h)
    grads[f"{name}.w1"] += np.einsum("bip,biq->pq", x, d_h)
    grads[f"{name}.b1"] += d_h.sum(axis=(0, 1))
    return d_y + d_h @ params[f"{name}.w1"].T


def project_fused_batch(params, replaced: np.ndarray):
    """replaced (B, L, D) -> C_f (B, L, D) through two residual MLP blocks."""
    x1, c1 = _mlp_block_forward(replaced, params, "mlp1")
    c_f, c2 = _mlp_block_forward(x1, params, "mlp2")
    return c_f, (c1, c2)


def project_fused_backward(params, cache, d_cf, grads):
    c1, c2 = cache
    d_x1 = _mlp_block_backward(d_cf, c2, params, "mlp2", grads)
    return _mlp_block_backward(d_x1, c1, params, "mlp1", grads)


def project_fused(replaced: np.ndarray, params) -> np.ndarray:
    c_f, _ = project_fused_batch(params, replaced[None])
    return c_f[0]


# ---------------------------------------------------------------------------
# overall identity token -> C_i
# ---------------------------------------------------------------------------

def overall_id_batch(params, image_embs: np.ndarray, id_embs: np.ndarray):
    """image_embs (B, D_img), id_embs (B, D_id) -> C_i (B, D)."""
    joint = np.concatenate([image_embs, id_embs], axis=1)
    return joint @ params["idproj.w"] + params["idproj.b"], joint


def overall_id_backward(params, joint, d_ci, grads):
    grads["idproj.w"] += joint.T @ d_ci
    grads["idproj.b"] += d_ci.sum(axis=0)


def extract_overall_id(face_image: np.ndarray, suite, params) -> np.ndarray:
    """C_i = projection(concat(image embedding, identity embedding))."""
    e_img = suite.image.embed(face_image)
    e_id = suite.identity.embed(face_image)
    c_i, _ = overall_id_batch(params, e_img[None], e_id[None])
    return c_i[0]
