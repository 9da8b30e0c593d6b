"""Small latent denoiser with per-layer cross-attention maps.

Pieces: a cosine noise schedule pinned to alpha_bar(0) = 1, a fixed linear
image<->latent codec, a two-scale convolutional denoiser whose two
cross-attention layers expose their attention maps, a deterministic DDIM
stepper, and classifier-free guidance where the unconditional branch is the
zero text embedding.

The denoiser keeps its parameters in a flat dict and implements forward and
backward by hand on top of the conv kernel backend; backward also returns
the gradient w.r.t. the conditioning tokens (how the conditioning modules
train while the denoiser stays frozen) and accepts extra gradients injected
at the attention maps (how the localization loss reaches the keys).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import RunConfig
from .errors import ConfigError, ShapeError, TimestepError
from .facial_prompt_generator import silu, silu_grad
from .utils import rng_for


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

class NoiseSchedule:
    """Cosine cumulative-product schedule over T training steps.

    alpha_bar is pinned to exactly 1 at t=0 (so adding noise at t=0 is the
    identity) and decreases strictly to ~0 at t=T; per-step betas are capped
    at 0.999 to keep the tail strictly monotone.
    """

    def __init__(self, timesteps: int = 100, s: float = 0.008):
        self.timesteps = timesteps
        ts = np.arange(timesteps + 1, dtype=np.float64)
        f = np.cos(((ts / timesteps) + s) / (1 + s) * np.pi / 2.0) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
        self.betas = betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.timesteps:
            raise TimestepError(f"t={t} outside [0, {self.timesteps}]")
        return t


def add_noise(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward process: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = schedule.check_t(t)
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    a = schedule.alpha_bar[t]
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


# ---------------------------------------------------------------------------
# image <-> latent codec (fixed linear maps)
# ---------------------------------------------------------------------------

_LUM = np.array([0.299, 0.587, 0.114])


def _bilinear_matrix(big: int, small: int) -> np.ndarray:
    u = np.zeros((big, small))
    ratio = big / small
    for i in range(big):
        src = (i + 0.5) / ratio - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        i0c = min(max(i0, 0), small - 1)
        i1c = min(max(i0 + 1, 0), small - 1)
        u[i, i0c] += 1.0 - frac
        u[i, i1c] += frac
    return u


class LatentCodec:
    """Block-mean RGB channels plus one left/right luminance-detail channel.

    Strictly linear (zero image -> zero latent -> zero image); decode uses
    bilinear upsampling for color and block-replication for the detail
    pattern, which is block-local by construction.
    """

    def __init__(self, image_size: int, latent_size: int, scale: float):
        self.image_size = image_size
        self.latent_size = latent_size
        self.scale = scale
        block = image_size // latent_size
        self.block = block
        e = np.zeros((latent_size, image_size))
        for i in range(latent_size):
            e[i, i * block : (i + 1) * block] = 1.0 / block
        self.enc = e
        self.dec = _bilinear_matrix(image_size, latent_size)
        rep = np.zeros((image_size, latent_size))
        rep[np.arange(image_size), np.arange(image_size) // block] = 1.0
        self.rep = rep
        self.pattern = np.where(np.arange(image_size) % block < block // 2, 1.0, -1.0)
        # damped reconstruction of the detail term; the full adjoint
        # overshoots where a block is not a pure left/right step
        self.detail_gain = 0.5

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (self.image_size, self.image_size, 3):
            raise ShapeError(f"expected ({self.image_size},{self.image_size},3), got {img.shape}")
        z = np.empty((self.latent_size, self.latent_size, 4))
        for c in range(3):
            z[:, :, c] = self.enc @ img[:, :, c] @ self.enc.T
        lum = img @ _LUM
        z[:, :, 3] = self.enc @ (lum * self.pattern[None, :]) @ self.enc.T
        return z * self.scale

    def decode(self, z: np.ndarray) -> np.ndarray:
        if z.shape != (self.latent_size, self.latent_size, 4):
            raise ShapeError(f"expected ({self.latent_size},{self.latent_size},4), got {z.shape}")
        zs = np.asarray(z, dtype=np.float64) / self.scale
        out = np.empty((self.image_size, self.image_size, 3))
        for c in range(3):
            out[:, :, c] = self.dec @ zs[:, :, c] @ self.dec.T
        detail = (self.rep @ zs[:, :, 3] @ self.rep.T) * self.pattern[None, :]
        out += self.detail_gain * detail[:, :, None]
        return out


def encode_latent(image: np.ndarray, codec: LatentCodec) -> np.ndarray:
    return codec.encode(image)


def decode_latent(z: np.ndarray, codec: LatentCodec) -> np.ndarray:
    return codec.decode(z)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrossAttentionMap:
    """Per-layer attention over conditioning tokens; rows are a softmax, so
    every latent pixel's token weights sum to one."""

    p: np.ndarray  # (h, w, n) in [0, 1]
    layer: int
    head: int = 0


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Two-scale conv net with one cross-attention block per scale."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.hs = cfg.latent_size
        self.hs2 = cfg.latent_size // 2
        self.ch1 = cfg.base_channels
        self.ch2 = cfg.base_channels * 2
        self.latc = cfg.latent_channels
        self.cond_dim = cfg.text_dim
        self.time_dim = cfg.time_dim

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = rng_for("denoiser-init", seed)
        ch1, ch2, latc, d, td = self.ch1, self.ch2, self.latc, self.cond_dim, self.time_dim

        def conv_w(kh, kw, cin, cout):
            return rng.standard_normal((kh, kw, cin, cout)) * np.sqrt(2.0 / (kh * kw * cin))

        def lin(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

        params = {
            "time.w1": lin(td, td), "time.b1": np.zeros(td),
            "time.h1w": lin(td, ch1), "time.h1b": np.zeros(ch1),
            "time.h2w": lin(td, ch2), "time.h2b": np.zeros(ch2),
            "time.h3w": lin(td, ch2), "time.h3b": np.zeros(ch2),
            "conv1.w": conv_w(3, 3, latc, ch1), "conv1.b": np.zeros(ch1),
            "conv2.w": conv_w(3, 3, ch1, ch2), "conv2.b": np.zeros(ch2),
            "conv3.w": conv_w(3, 3, ch2, ch2), "conv3.b": np.zeros(ch2),
            "conv4.w": conv_w(3, 3, ch2 + ch1, ch1), "conv4.b": np.zeros(ch1),
            # zero-init output: the net predicts zero noise at step 0
            "conv5.w": np.zeros((3, 3, ch1, latc)), "conv5.b": np.zeros(latc),
        }
        for name, ch in (("attn1", ch1), ("attn2", ch2)):
            params[f"{name}.wq"] = lin(ch, ch)
            params[f"{name}.wk"] = lin(d, ch)
            params[f"{name}.wv"] = lin(d, ch)
            params[f"{name}.wo"] = np.zeros((ch, ch))
        return params

    # -- attention sub-block ------------------------------------------------

    @staticmethod
    def _attn_forward(params, name, x, cond):
        ch = x.shape[-1]
        q = x @ params[f"{name}.wq"]
        k = cond @ params[f"{name}.wk"]
        v = cond @ params[f"{name}.wv"]
        s = q @ k.transpose(0, 2, 1) / np.sqrt(ch)
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        y = p @ v
        out = x + y @ params[f"{name}.wo"]
        return out, p, {"x": x, "q": q, "k": k, "v": v, "p": p, "y": y, "cond": cond}

    @staticmethod
    def _attn_backward(params, name, cache, d_out, d_p_extra, grads):
        ch = cache["x"].shape[-1]
        d_x = d_out.copy()
        d_y = d_out @ params[f"{name}.wo"].T
        if grads is not None:
            grads[f"{name}.wo"] += np.einsum("bip,biq->pq", cache["y"], d_out)
        p = cache["p"]
        d_p = d_y @ cache["v"].transpose(0, 2, 1)
        if d_p_extra is not None:
            d_p = d_p + d_p_extra
        d_v = p.transpose(0, 2, 1) @ d_y
        d_s = p * (d_p - (d_p * p).sum(axis=-1, keepdims=True))
        d_s /= np.sqrt(ch)
        d_q = d_s @ cache["k"]
        d_k = d_s.transpose(0, 2, 1) @ cache["q"]
        d_x += d_q @ params[f"{name}.wq"].T
        d_cond = d_k @ params[f"{name}.wk"].T + d_v @ params[f"{name}.wv"].T
        if grads is not None:
            grads[f"{name}.wq"] += np.einsum("bip,biq->pq", cache["x"], d_q)
            grads[f"{name}.wk"] += np.einsum("bip,biq->pq", cache["cond"], d_k)
            grads[f"{name}.wv"] += np.einsum("bip,biq->pq", cache["cond"], d_v)
        return d_x, d_cond

    # -- full network ---------------------------------------------------------

    def forward(self, params, z_t, t, cond, collect_attn: bool = False):
        """z_t (B, hs, hs, c), t (B,) ints, cond (B, n, D) ->
        (eps_hat, [maps per attention layer], cache)."""
        b, hs, _, _ = z_t.shape
        if z_t.shape[1] != self.hs:
            raise ShapeError(f"latent must be {self.hs}x{self.hs}, got {z_t.shape}")
        if cond.ndim != 3 or cond.shape[-1] != self.cond_dim:
            raise ShapeError(f"conditioning must be (B, n, {self.cond_dim}), got {cond.shape}")
        temb_raw = sinusoidal_embedding(np.asarray(t, dtype=np.float64), self.time_dim)
        t_pre = temb_raw @ params["time.w1"] + params["time.b1"]
        temb = silu(t_pre)
        th1 = temb @ params["time.h1w"] + params["time.h1b"]
        th2 = temb @ params["time.h2w"] + params["time.h2b"]
        th3 = temb @ params["time.h3w"] + params["time.h3b"]

        c1_pre = kernels.conv2d_forward(z_t, params["conv1.w"], params["conv1.b"], 1, 1)
        c1_pre += th1[:, None, None, :]
        c1 = silu(c1_pre)
        x1 = c1.reshape(b, hs * hs, self.ch1)
        a1_flat, p1, a1_cache = self._attn_forward(params, "attn1", x1, cond)
        a1 = a1_flat.reshape(b, hs, hs, self.ch1)

        c2_pre = kernels.conv2d_forward(a1, params["conv2.w"], params["conv2.b"], 2, 1)
        c2_pre += th2[:, None, None, :]
        c2 = silu(c2_pre)
        hs2 = c2.shape[1]
        x2 = c2.reshape(b, hs2 * hs2, self.ch2)
        a2_flat, p2, a2_cache = self._attn_forward(params, "attn2", x2, cond)
        a2 = a2_flat.reshape(b, hs2, hs2, self.ch2)

        c3_pre = kernels.conv2d_forward(a2, params["conv3.w"], params["conv3.b"], 1, 1)
        c3_pre += th3[:, None, None, :]
        c3 = silu(c3_pre)
        up = np.repeat(np.repeat(c3, 2, axis=1), 2, axis=2)
        cat = np.concatenate([up, a1], axis=-1)
        c4_pre = kernels.conv2d_forward(cat, params["conv4.w"], params["conv4.b"], 1, 1)
        c4 = silu(c4_pre)
        eps = kernels.conv2d_forward(c4, params["conv5.w"], params["conv5.b"], 1, 1)

        maps = None
        if collect_attn:
            n = cond.shape[1]
            maps = [p1.reshape(b, hs, hs, n), p2.reshape(b, hs2, hs2, n)]
        cache = {
            "z_t": z_t, "temb_raw": temb_raw, "t_pre": t_pre, "temb": temb,
            "c1_pre": c1_pre, "a1": a1, "c2_pre": c2_pre, "a2": a2, "c3_pre": c3_pre,
            "c3": c3, "cat": cat, "c4_pre": c4_pre, "c4": c4,
            "attn1": a1_cache, "attn2": a2_cache, "hs2": hs2,
        }
        return eps, maps, cache

    def backward(self, params, cache, d_eps, d_maps=None, want_param_grads: bool = True):
        """Returns (param grads or None, d_cond)."""
        b = d_eps.shape[0]
        hs, hs2 = self.hs, cache["hs2"]
        grads = {k: np.zeros_like(v) for k, v in params.items()} if want_param_grads else None

        def conv_bwd(name, x, d_y, stride):
            if grads is not None:
                gw, gb = kernels.conv2d_grad_weights(x, d_y, stride, 1, 3, 3)
                grads[f"{name}.w"] += gw
                grads[f"{name}.b"] += gb
            return kernels.conv2d_grad_input(d_y, params[f"{name}.w"], stride, 1,
                                             x.shape[1], x.shape[2])

        d_c4 = conv_bwd("conv5", cache["c4"], d_eps, 1)
        d_c4pre = d_c4 * silu_grad(cache["c4_pre"])
        d_cat = conv_bwd("conv4", cache["cat"], d_c4pre, 1)
        d_up = d_cat[..., : self.ch2]
        d_a1 = d_cat[..., self.ch2 :].copy()
        d_c3 = d_up.reshape(b, hs2, 2, hs2, 2, self.ch2).sum(axis=(2, 4))
        d_c3pre = d_c3 * silu_grad(cache["c3_pre"])
        d_th3 = d_c3pre.sum(axis=(1, 2))
        d_a2 = conv_bwd("conv3", cache["a2"], d_c3pre, 1)

        dp2 = None if d_maps is None else d_maps[1].reshape(b, hs2 * hs2, -1)
        d_x2, d_cond = self._attn_backward(params, "attn2", cache["attn2"],
                                           d_a2.reshape(b, hs2 * hs2, self.ch2), dp2, grads)
        d_c2pre = d_x2.reshape(b, hs2, hs2, self.ch2) * silu_grad(cache["c2_pre"])
        d_th2 = d_c2pre.sum(axis=(1, 2))
        d_a1 += conv_bwd("conv2", cache["a1"], d_c2pre, 2)

        dp1 = None if d_maps is None else d_maps[0].reshape(b, hs * hs, -1)
        d_x1, d_cond1 = self._attn_backward(params, "attn1", cache["attn1"],
                                            d_a1.reshape(b, hs * hs, self.ch1), dp1, grads)
        d_cond += d_cond1
        d_c1pre = d_x1.reshape(b, hs, hs, self.ch1) * silu_grad(cache["c1_pre"])
        d_th1 = d_c1pre.sum(axis=(1, 2))
        conv_bwd("conv1", cache["z_t"], d_c1pre, 1)

        if grads is not None:
            temb = cache["temb"]
            d_temb = (d_th1 @ params["time.h1w"].T + d_th2 @ params["time.h2w"].T
                      + d_th3 @ params["time.h3w"].T)
            grads["time.h1w"] += temb.T @ d_th1
            grads["time.h1b"] += d_th1.sum(axis=0)
            grads["time.h2w"] += temb.T @ d_th2
            grads["time.h2b"] += d_th2.sum(axis=0)
            grads["time.h3w"] += temb.T @ d_th3
            grads["time.h3b"] += d_th3.sum(axis=0)
            d_tpre = d_temb * silu_grad(cache["t_pre"])
            grads["time.w1"] += cache["temb_raw"].T @ d_tpre
            grads["time.b1"] += d_tpre.sum(axis=0)
        return grads, d_cond


def denoise(denoiser: Denoiser, params, z_t: np.ndarray, t: int, c_f: np.ndarray,
            c_i: np.ndarray | None = None, collect_attn: bool = True):
    """Single-sample denoising call.

    Conditioning is the fused text embedding, with the identity token (when
    given) appended as one extra conditioning token.
    """
    cond = c_f if c_i is None else np.concatenate([c_f, c_i[None, :]], axis=0)
    eps, maps, _ = denoiser.forward(params, z_t[None], np.array([t]), cond[None],
                                    collect_attn=collect_attn)
    out_maps = []
    if maps is not None:
        out_maps = [CrossAttentionMap(p=m[0], layer=i) for i, m in enumerate(maps)]
    return eps[0], out_maps


# ---------------------------------------------------------------------------
# DDIM sampling with classifier-free guidance
# ---------------------------------------------------------------------------

def ddim_timesteps(timesteps: int, steps: int) -> np.ndarray:
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    return np.linspace(timesteps, 0, steps + 1).round().astype(int)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta=0) update toward t_prev."""
    a_t = schedule.alpha_bar[schedule.check_t(t)]
    a_p = schedule.alpha_bar[schedule.check_t(t_prev)]
    z0_hat = (z_t - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
    return np.sqrt(a_p) * z0_hat + np.sqrt(1.0 - a_p) * eps_hat


def sample(
    denoiser: Denoiser,
    params,
    schedule: NoiseSchedule,
    cond_fn,
    uncond: np.ndarray,
    steps: int,
    guidance_scale: float,
    seed: int,
    collect_attn: bool = False,
):
    """Run the DDIM loop; cond_fn(i) supplies the conditioning tokens for
    sampler iteration i (counted from the noisiest step).

    With guidance_scale == 1 the guided prediction is algebraically the
    conditional one, so the unconditional branch is skipped and the output
    matches the conditional prediction bit-exactly.
    """
    if guidance_scale < 0:
        raise ConfigError(f"guidance_scale must be >= 0, got {guidance_scale}")
    ts = ddim_timesteps(schedule.timesteps, steps)
    z = rng_for("sample", seed).standard_normal(
        (1, denoiser.hs, denoiser.hs, denoiser.latc)
    )
    collected = []
    for i in range(steps):
        t = np.array([ts[i]])
        cond = cond_fn(i)
        eps_c, maps, _ = denoiser.forward(params, z, t, cond[None], collect_attn=collect_attn)
        if guidance_scale == 1.0:
            eps = eps_c
        else:
            eps_u, _, _ = denoiser.forward(params, z, t, uncond[None], collect_attn=False)
            eps = eps_u + guidance_scale * (eps_c - eps_u)
        if collect_attn and maps is not None:
            collected.append([CrossAttentionMap(p=m[0], layer=j) for j, m in enumerate(maps)])
        z = ddim_step(z, eps, int(ts[i]), int(ts[i + 1]), schedule)
    return (z[0], collected) if collect_attn else z[0]
