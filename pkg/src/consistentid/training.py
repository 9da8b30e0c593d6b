"""Two-stage training harness.

Stage A pretrains the denoiser on plain text conditioning (so there is a
frozen base model to condition later); stage B freezes it and trains only
the facial encoder and identity projection with the composite loss.

Reproducibility contract: every random draw for sample s of step k comes
from a stream keyed on (run seed, stage, k, s), so loss curves replay
bit-identically regardless of how batches are assembled, and checkpoints
resume exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import facial_prompt_generator as fpg
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .encoders import EncoderSuite, build_encoder_suite
from .errors import DivergenceError, FrozenViolation
from .face_parsing import N_REGIONS, RegionMaskSet, crop_regions
from .objectives import attention_mass, facial_attention_loss_grad, noise_loss, total_loss
from .prompt_assembly import (
    LookupTextEncoder,
    TemplateCaptioner,
    default_vocabulary,
    describe_regions,
    substitute_delimiters,
)
from .synth_faces import SyntheticFace, apply_background_dropout_mask, generate_identity, render_face
from .toy_diffusion import Denoiser, LatentCodec, NoiseSchedule
from .utils import rng_for


class TrainableSet(enum.Enum):
    DENOISER_ONLY = "denoiser_only"
    CONSISTENTID_MODULES = "consistentid_modules"


@dataclass(frozen=True)
class TrainingConfig:
    lam: float
    lr: float
    batch_size: int
    bg_drop_prob: float
    zero_text_prob: float
    steps: int
    seed: int
    trainable_set: TrainableSet

    @classmethod
    def from_run(cls, cfg: RunConfig, steps: int, trainable_set: TrainableSet):
        return cls(
            lam=cfg.lambda_facial, lr=cfg.lr, batch_size=cfg.batch_size,
            bg_drop_prob=cfg.bg_drop_prob, zero_text_prob=cfg.zero_text_prob,
            steps=steps, seed=cfg.seed, trainable_set=trainable_set,
        )


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    seed: int

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], seed: int):
        return cls(
            params=params,
            opt_m={k: np.zeros_like(v) for k, v in params.items()},
            opt_v={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
            seed=seed,
        )


def adam_update(state: TrainState, grads: dict[str, np.ndarray], lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.step += 1
    t = state.step
    for k, g in grads.items():
        m = state.opt_m[k]
        v = state.opt_v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        state.params[k] -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# sample preparation (all deterministic, reused across steps)
# ---------------------------------------------------------------------------

@dataclass
class PreparedSample:
    z0: np.ndarray          # (2, h, h, c): [original, background-dropped]
    text_emb: np.ndarray    # (L, D) plain embedding with delimiters unreplaced
    facial_positions: tuple[int, ...]
    presence: np.ndarray    # (N,) bool
    region_embs: np.ndarray  # (N, D_img); zero rows for absent regions
    whole_emb: np.ndarray   # (2, D_img)
    id_emb: np.ndarray      # (2, D_id)
    masks: RegionMaskSet


@dataclass(frozen=True)
class Pipeline:
    """Frozen support objects shared by training, inference, and evaluation."""

    cfg: RunConfig
    codec: LatentCodec
    schedule: NoiseSchedule
    suite: EncoderSuite
    text_encoder: LookupTextEncoder
    denoiser: Denoiser


def build_pipeline(cfg: RunConfig) -> Pipeline:
    return Pipeline(
        cfg=cfg,
        codec=LatentCodec(cfg.image_size, cfg.latent_size, cfg.latent_scale),
        schedule=NoiseSchedule(cfg.timesteps),
        suite=build_encoder_suite(cfg),
        text_encoder=LookupTextEncoder(
            default_vocabulary(), cfg.text_dim, cfg.text_encoder_seed, cfg.seq_len
        ),
        denoiser=Denoiser(cfg),
    )


def sample_inputs(face: SyntheticFace, pipe: Pipeline, captioner=None):
    """Prompt, region embeddings, and whole-image embeddings for one face."""
    captioner = captioner or TemplateCaptioner()
    regions, caption = describe_regions(face, captioner)
    prompt = substitute_delimiters(regions, caption, face.masks.presence)
    crops = crop_regions(face.image, face.masks, pipe.cfg.crop_size)
    presence = np.array(face.masks.presence, dtype=bool)
    region_embs = np.zeros((N_REGIONS, pipe.cfg.image_embed_dim))
    for j in range(N_REGIONS):
        if presence[j]:
            region_embs[j] = pipe.suite.image.embed(crops.crops[j])
    return prompt, presence, region_embs


def prepare_sample(face: SyntheticFace, pipe: Pipeline, captioner=None) -> PreparedSample:
    prompt, presence, region_embs = sample_inputs(face, pipe, captioner)
    dropped = apply_background_dropout_mask(face.image, face.face_mask)
    z0 = np.stack([pipe.codec.encode(face.image), pipe.codec.encode(dropped)])
    whole_emb = np.stack([pipe.suite.image.embed(face.image), pipe.suite.image.embed(dropped)])
    id_emb = np.stack([pipe.suite.identity.embed(face.image), pipe.suite.identity.embed(dropped)])
    return PreparedSample(
        z0=z0,
        text_emb=pipe.text_encoder.encode(prompt),
        facial_positions=prompt.facial_positions,
        presence=presence,
        region_embs=region_embs,
        whole_emb=whole_emb,
        id_emb=id_emb,
        masks=face.masks,
    )


def apply_background_dropout(face: SyntheticFace, rng: np.random.Generator,
                             prob: float = 0.5) -> np.ndarray:
    """With probability prob, fill everything outside the whole-face support
    with neutral gray; pixels under the face mask are never touched."""
    if rng.random() < prob:
        return apply_background_dropout_mask(face.image, face.face_mask)
    return face.image.copy()


def draw_sample_randomness(seed: int, stage: str, step: int, slot: int, latent_shape,
                           bg_drop_prob: float, zero_text_prob: float, timesteps: int):
    """The per-sample random draws, in a fixed order on a keyed stream."""
    r = rng_for(seed, stage, step, slot)
    return {
        "bg_drop": bool(r.random() < bg_drop_prob),
        "zero_text": bool(r.random() < zero_text_prob),
        "t": int(r.integers(1, timesteps + 1)),
        "eps": r.standard_normal(latent_shape),
    }


def _batch_indices(seed: int, stage: str, step: int, n: int, batch: int) -> np.ndarray:
    return rng_for(seed, stage + "-batch", step).integers(0, n, size=batch)


# ---------------------------------------------------------------------------
# stage A: denoiser pretraining
# ---------------------------------------------------------------------------

def pretrain_denoiser(
    prepared: list[PreparedSample],
    pipe: Pipeline,
    steps: int | None = None,
    state: TrainState | None = None,
    log_path: str | Path | None = None,
):
    """Train every denoiser parameter on the noise loss with plain text
    conditioning; the augmentation coins run exactly as in stage B."""
    cfg = pipe.cfg
    tc = TrainingConfig.from_run(cfg, steps if steps is not None else cfg.pretrain_steps,
                                 TrainableSet.DENOISER_ONLY)
    if state is None:
        state = TrainState.fresh(pipe.denoiser.init_params(cfg.denoiser_init_seed), cfg.seed)
    lat_shape = (cfg.latent_size, cfg.latent_size, cfg.latent_channels)
    history = []
    writer = _LogWriter(log_path)
    start = state.step
    for step in range(start, start + tc.steps):
        idx = _batch_indices(tc.seed, "stage-a", step, len(prepared), tc.batch_size)
        z0 = np.empty((tc.batch_size,) + lat_shape)
        eps = np.empty_like(z0)
        ts = np.empty(tc.batch_size, dtype=int)
        cond = np.zeros((tc.batch_size, cfg.seq_len, cfg.text_dim))
        for s, i in enumerate(idx):
            draw = draw_sample_randomness(tc.seed, "stage-a", step, s, lat_shape,
                                          tc.bg_drop_prob, tc.zero_text_prob, cfg.timesteps)
            sample = prepared[i]
            z0[s] = sample.z0[1 if draw["bg_drop"] else 0]
            if not draw["zero_text"]:
                cond[s] = sample.text_emb
            ts[s] = draw["t"]
            eps[s] = draw["eps"]
        a = pipe.schedule.alpha_bar[ts][:, None, None, None]
        z_t = np.sqrt(a) * z0 + np.sqrt(1 - a) * eps
        eps_hat, _, cache = pipe.denoiser.forward(state.params, z_t, ts, cond)
        l_noise = noise_loss(eps, eps_hat)
        breakdown = total_loss(l_noise, 0.0, tc.lam)
        if not np.isfinite(breakdown.l_total):
            raise DivergenceError(f"non-finite loss at step {step}")
        d_eps = 2.0 * (eps_hat - eps) / eps.size
        grads, _ = pipe.denoiser.backward(state.params, cache, d_eps)
        adam_update(state, grads, tc.lr)
        history.append(breakdown)
        writer.write(step, breakdown)
    writer.close()
    return state, history


# ---------------------------------------------------------------------------
# stage B: conditioning modules against a frozen denoiser
# ---------------------------------------------------------------------------

def _assemble_fused_batch(facial_params, batch, cfg):
    """Forward the facial encoder for a whole batch; returns the (B, L+1, D)
    conditioning, the per-sample plain condition views, and the caches."""
    b = len(batch["samples"])
    whole = np.stack([s.whole_emb[v] for s, v in zip(batch["samples"], batch["variant"])])
    regions = np.stack([s.region_embs for s in batch["samples"]])
    presence = np.stack([s.presence for s in batch["samples"]])
    fhat, align_cache = fpg.align_features_batch(facial_params, whole, regions, presence)
    replaced = np.stack([s.text_emb for s in batch["samples"]])
    for s_idx, sample in enumerate(batch["samples"]):
        rows = np.flatnonzero(sample.presence)
        for pos, row in zip(sample.facial_positions, rows):
            replaced[s_idx, pos] = fhat[s_idx, row]
    c_f, mlp_cache = fpg.project_fused_batch(facial_params, replaced)
    id_embs = np.stack([s.id_emb[v] for s, v in zip(batch["samples"], batch["variant"])])
    c_i, img_id = fpg.overall_id_batch(facial_params, whole, id_embs)
    cond = np.concatenate([c_f, c_i[:, None, :]], axis=1)
    # zero-text samples get the zero text embedding; the extra row stays
    # zero, which is inert through the token softmax
    for s_idx, zero in enumerate(batch["zero_text"]):
        if zero:
            cond[s_idx] = 0.0
    caches = {"align": align_cache, "mlp": mlp_cache, "joint": img_id}
    return cond, caches


def _facial_backward(facial_params, caches, d_cond, batch, cfg):
    grads = fpg.zero_grads(facial_params)
    d_cond = d_cond.copy()
    for s_idx, zero in enumerate(batch["zero_text"]):
        if zero:
            d_cond[s_idx] = 0.0
    d_cf = d_cond[:, : cfg.seq_len, :]
    d_ci = d_cond[:, cfg.seq_len, :]
    d_replaced = fpg.project_fused_backward(facial_params, caches["mlp"], d_cf, grads)
    d_fhat = np.zeros((len(batch["samples"]), N_REGIONS, cfg.text_dim))
    for s_idx, sample in enumerate(batch["samples"]):
        rows = np.flatnonzero(sample.presence)
        for pos, row in zip(sample.facial_positions, rows):
            d_fhat[s_idx, row] = d_replaced[s_idx, pos]
    fpg.align_features_backward(facial_params, caches["align"], d_fhat, grads)
    fpg.overall_id_backward(facial_params, caches["joint"], d_ci, grads)
    return grads


def train_consistentid(
    prepared: list[PreparedSample],
    denoiser_params: dict[str, np.ndarray],
    pipe: Pipeline,
    steps: int | None = None,
    state: TrainState | None = None,
    lam: float | None = None,
    log_path: str | Path | None = None,
):
    """Optimize only the facial encoder and identity projection; the base
    denoiser is frozen and checked bit-identical afterwards."""
    cfg = pipe.cfg
    tc = TrainingConfig.from_run(cfg, steps if steps is not None else cfg.train_steps,
                                 TrainableSet.CONSISTENTID_MODULES)
    lam = cfg.lambda_facial if lam is None else lam
    frozen_before = {k: v.copy() for k, v in denoiser_params.items()}
    if state is None:
        state = TrainState.fresh(fpg.init_facial_params(cfg), cfg.seed)
    lat_shape = (cfg.latent_size, cfg.latent_size, cfg.latent_channels)
    history = []
    writer = _LogWriter(log_path)
    start = state.step
    for step in range(start, start + tc.steps):
        idx = _batch_indices(tc.seed, "stage-b", step, len(prepared), tc.batch_size)
        batch = {"samples": [], "variant": [], "zero_text": []}
        z0 = np.empty((tc.batch_size,) + lat_shape)
        eps = np.empty_like(z0)
        ts = np.empty(tc.batch_size, dtype=int)
        for s, i in enumerate(idx):
            draw = draw_sample_randomness(tc.seed, "stage-b", step, s, lat_shape,
                                          tc.bg_drop_prob, tc.zero_text_prob, cfg.timesteps)
            sample = prepared[i]
            variant = 1 if draw["bg_drop"] else 0
            batch["samples"].append(sample)
            batch["variant"].append(variant)
            batch["zero_text"].append(draw["zero_text"])
            z0[s] = sample.z0[variant]
            ts[s] = draw["t"]
            eps[s] = draw["eps"]
        cond, caches = _assemble_fused_batch(state.params, batch, cfg)
        a = pipe.schedule.alpha_bar[ts][:, None, None, None]
        z_t = np.sqrt(a) * z0 + np.sqrt(1 - a) * eps
        eps_hat, maps, den_cache = pipe.denoiser.forward(denoiser_params, z_t, ts, cond,
                                                         collect_attn=True)
        l_noise = noise_loss(eps, eps_hat)

        d_maps = [np.zeros_like(m) for m in maps]
        facial_terms = []
        active = [
            s_idx for s_idx in range(tc.batch_size)
            if not batch["zero_text"][s_idx] and batch["samples"][s_idx].facial_positions
        ]
        for s_idx in active:
            sample = batch["samples"][s_idx]
            per_maps = [m[s_idx] for m in maps]
            val, g = facial_attention_loss_grad(per_maps, sample.masks, sample.facial_positions)
            facial_terms.append(val)
            for layer, gm in enumerate(g):
                d_maps[layer][s_idx] += gm
        l_facial = float(np.mean(facial_terms)) if facial_terms else 0.0
        breakdown = total_loss(l_noise, l_facial, lam)
        if not np.isfinite(breakdown.l_total):
            raise DivergenceError(f"non-finite loss at step {step}")

        d_eps = 2.0 * (eps_hat - eps) / eps.size
        if facial_terms:
            scale = lam / len(facial_terms)
            for layer in range(len(d_maps)):
                d_maps[layer] *= scale
        _, d_cond = pipe.denoiser.backward(denoiser_params, den_cache, d_eps,
                                           d_maps=d_maps if facial_terms else None,
                                           want_param_grads=False)
        grads = _facial_backward(state.params, caches, d_cond, batch, cfg)
        adam_update(state, grads, tc.lr)
        history.append(breakdown)
        writer.write(step, breakdown)
    writer.close()
    check_frozen(frozen_before, denoiser_params)
    return state, history


def check_frozen(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> None:
    for k in before:
        if not np.array_equal(before[k], after[k]):
            raise FrozenViolation(f"frozen parameter {k!r} changed during training")


class _LogWriter:
    """JSON-lines loss log, one record per step."""

    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, step: int, b) -> None:
        if self._fh:
            self._fh.write(json.dumps(
                {"step": step, "l_noise": b.l_noise, "l_facial": b.l_facial,
                 "l_total": b.l_total}) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


# ---------------------------------------------------------------------------
# evaluation probes used by training-time checks
# ---------------------------------------------------------------------------

def heldout_identity_seed(run_seed: int, k: int) -> int:
    # disjoint from build_corpus seeds (run_seed * 100003 + i)
    return 900_000_000 + run_seed * 10007 + k


def heldout_faces(cfg: RunConfig, count: int, poses: int = 1) -> list[SyntheticFace]:
    faces = []
    for k in range(count):
        identity = generate_identity(heldout_identity_seed(cfg.seed, k))
        for p in range(poses):
            faces.append(render_face(identity, pose_seed=p, image_size=cfg.image_size))
    return faces


def eval_noise_loss(prepared: list[PreparedSample], params, pipe: Pipeline,
                    eval_seed: int = 0) -> float:
    """Noise loss on a fixed (t, eps) draw per sample; used for the held-out
    improvement check."""
    cfg = pipe.cfg
    lat_shape = (cfg.latent_size, cfg.latent_size, cfg.latent_channels)
    z0 = np.stack([s.z0[0] for s in prepared])
    cond = np.stack([s.text_emb for s in prepared])
    ts = np.empty(len(prepared), dtype=int)
    eps = np.empty_like(z0)
    for s in range(len(prepared)):
        r = rng_for(eval_seed, "noise-eval", s)
        ts[s] = int(r.integers(1, cfg.timesteps + 1))
        eps[s] = r.standard_normal(lat_shape)
    a = pipe.schedule.alpha_bar[ts][:, None, None, None]
    z_t = np.sqrt(a) * z0 + np.sqrt(1 - a) * eps
    eps_hat, _, _ = pipe.denoiser.forward(params, z_t, ts, cond)
    return noise_loss(eps, eps_hat)


def attention_mass_eval(
    faces: list[SyntheticFace],
    denoiser_params,
    facial_params,
    pipe: Pipeline,
    t_eval: int = 60,
    eval_seed: int = 0,
) -> float:
    """Mean attention mass of facial tokens inside their ground-truth masks,
    measured with fused conditioning at one fixed timestep."""
    cfg = pipe.cfg
    masses = []
    for k, face in enumerate(faces):
        sample = prepare_sample(face, pipe)
        batch = {"samples": [sample], "variant": [0], "zero_text": [False]}
        cond, _ = _assemble_fused_batch(facial_params, batch, cfg)
        eps = rng_for(eval_seed, "attn-eval", k).standard_normal(sample.z0[0].shape)
        a = pipe.schedule.alpha_bar[t_eval]
        z_t = (np.sqrt(a) * sample.z0[0] + np.sqrt(1 - a) * eps)[None]
        _, maps, _ = pipe.denoiser.forward(denoiser_params, z_t, np.array([t_eval]), cond,
                                           collect_attn=True)
        masses.append(attention_mass([m[0] for m in maps], sample.masks,
                                     sample.facial_positions))
    return float(np.mean(masses))


# ---------------------------------------------------------------------------
# checkpoint serialization for train states and bundles
# ---------------------------------------------------------------------------

def save_train_state(path, module: str, state: TrainState, cfg: RunConfig,
                     extra_meta: dict | None = None) -> None:
    arrays = {}
    for k, v in state.params.items():
        arrays[f"p.{k}"] = v
    for k, v in state.opt_m.items():
        arrays[f"m.{k}"] = v
    for k, v in state.opt_v.items():
        arrays[f"v.{k}"] = v
    meta = {"step": state.step, "train_seed": state.seed, "config": cfg.to_dict()}
    meta.update(extra_meta or {})
    save_checkpoint(path, module, arrays, meta=meta, seed=cfg.seed)


def load_train_state(path, module: str):
    arrays, header = load_checkpoint(path, expect_module=module)
    params = {k[2:]: v for k, v in arrays.items() if k.startswith("p.")}
    opt_m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
    opt_v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}
    meta = header["meta"]
    state = TrainState(params=params, opt_m=opt_m, opt_v=opt_v,
                       step=meta["step"], seed=meta["train_seed"])
    return state, RunConfig(**meta["config"]), meta
