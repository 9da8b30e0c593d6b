"""Loss layer: attention localization loss, noise loss, total composition.

The localization term for one region is the difference between the mean
attention its token puts outside the region mask and the mean it puts
inside, averaged over regions and then over attention layers; minimizing it
concentrates each facial token's attention inside its own region. The value
lies in [-1, 1] because attention entries lie in [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ArityError, EmptyMaskError, ShapeError
from .face_parsing import REGION_ORDER, RegionMaskSet, downsample_mask

logger = logging.getLogger(__name__)
_warned_degenerate: set[tuple[str, int, int]] = set()


@dataclass(frozen=True)
class LossBreakdown:
    l_noise: float
    l_facial: float
    l_total: float
    lam: float


def _map_array(m) -> np.ndarray:
    return m.p if hasattr(m, "p") else np.asarray(m)


def _layer_terms(p: np.ndarray, masks: RegionMaskSet, index_list):
    """Participating (token, down_mask) pairs for one attention map."""
    h, w, n = p.shape
    presence = masks.presence
    present = [j for j in range(len(presence)) if presence[j]]
    if len(index_list) != len(present):
        raise ArityError(
            f"index list has {len(index_list)} entries for {len(present)} present regions"
        )
    terms = []
    for k, j in enumerate(present):
        token = index_list[k]
        if not 0 <= token < n:
            raise ShapeError(f"token index {token} outside map with {n} tokens")
        down = downsample_mask(masks.masks[j], h, w)
        total = int(down.sum())
        if total == 0 or total == h * w:
            key = (REGION_ORDER[j].value, h, w)
            if key not in _warned_degenerate:
                _warned_degenerate.add(key)
                logger.warning(
                    "region %s degenerates to %s at %dx%d; skipped at this layer",
                    REGION_ORDER[j].value, "all-one" if total else "all-zero", h, w,
                )
            continue
        terms.append((token, down))
    return terms


def facial_attention_loss(maps, masks: RegionMaskSet, index_list) -> float:
    """mean over layers of (1/N_participating) sum_j [mean off-mask - mean
    on-mask] of each present region's token map."""
    loss, _ = facial_attention_loss_grad(maps, masks, index_list, want_grads=False)
    return loss


def facial_attention_loss_grad(maps, masks: RegionMaskSet, index_list, want_grads: bool = True):
    """Loss plus its exact gradient w.r.t. every attention map entry."""
    arrays = [_map_array(m) for m in maps]
    layer_terms = [_layer_terms(p, masks, index_list) for p in arrays]
    used = [i for i, terms in enumerate(layer_terms) if terms]
    if not used:
        raise EmptyMaskError("no region mask is usable at any attention resolution")

    total = 0.0
    grads = [np.zeros_like(p) for p in arrays] if want_grads else None
    for i in used:
        p = arrays[i]
        terms = layer_terms[i]
        layer_val = 0.0
        for token, down in terms:
            on = down.astype(bool)
            pj = p[:, :, token]
            n_on = int(on.sum())
            n_off = on.size - n_on
            layer_val += float(pj[~on].mean() - pj[on].mean())
            if want_grads:
                scale = 1.0 / (len(used) * len(terms))
                grads[i][:, :, token][~on] += scale / n_off
                grads[i][:, :, token][on] -= scale / n_on
        total += layer_val / len(terms)
    return total / len(used), grads


def attention_mass(maps, masks: RegionMaskSet, index_list) -> float:
    """Fraction of each facial token's attention falling inside its own
    region, averaged over participating regions and layers."""
    arrays = [_map_array(m) for m in maps]
    values = []
    for p in arrays:
        for token, down in _layer_terms(p, masks, index_list):
            pj = p[:, :, token]
            denom = float(pj.sum())
            if denom > 0:
                values.append(float(pj[down.astype(bool)].sum()) / denom)
    if not values:
        raise EmptyMaskError("no region mask is usable at any attention resolution")
    return float(np.mean(values))


def noise_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean squared error over every element (batch included)."""
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    diff = eps - eps_hat
    return float(np.mean(diff * diff))


def noise_loss_grad(eps: np.ndarray, eps_hat: np.ndarray) -> np.ndarray:
    """d(noise_loss)/d(eps_hat)."""
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    return 2.0 * (eps_hat - eps) / eps.size


def total_loss(l_noise: float, l_facial: float, lam: float = 0.01) -> LossBreakdown:
    """Exact affine combination l_noise + lam * l_facial."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return LossBreakdown(
        l_noise=float(l_noise),
        l_facial=float(l_facial),
        l_total=float(l_noise) + lam * float(l_facial),
        lam=float(lam),
    )
