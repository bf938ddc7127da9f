"""Conditional diffusion over the time-varying style latent.

Angular schedule, velocity-predicting conformer denoiser, classifier-free
guidance and a deterministic DDIM sampler.  Every sampler entry point takes a
plain ``velocity_fn(h, tau) -> v`` so closed-form oracles can stand in for the
network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import ProsodyCodec, TrackBatch, phoneme_batch
from .corpus import VOCAB_SIZE, Utterance
from .nn import AdamW, ConformerConfig, ConformerStack, Linear, Module, PositionalTable, pack_segments, param, sinusoidal_embed
from .track import ProsodyTrack
from .training import Trainer, sample_batch

LEVEL_SCALE = 1000.0  # sinusoidal embedding sees 1000 * level
GUIDANCE_MAX = 15.0


# ---------------------------------------------------------------- schedule


def schedule(tau) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or np.any(~np.isfinite(t)):
        raise ValueError("tau must lie in [0, 1]")
    phi = 0.5 * math.pi * t
    return np.cos(phi), np.sin(phi)


def grid(L: int) -> np.ndarray:
    if L < 1:
        raise ValueError("need at least one step")
    return np.arange(L + 1) / L


def _bcast(a, like: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (like.ndim - a.ndim))


def add_noise(x0: np.ndarray, xi: np.ndarray, tau) -> np.ndarray:
    if np.shape(x0) != np.shape(xi):
        raise ValueError(f"shape mismatch {np.shape(x0)} vs {np.shape(xi)}")
    a, s = schedule(tau)
    return _bcast(a, x0) * x0 + _bcast(s, x0) * xi


def velocity_target(x0: np.ndarray, xi: np.ndarray, tau) -> np.ndarray:
    if np.shape(x0) != np.shape(xi):
        raise ValueError(f"shape mismatch {np.shape(x0)} vs {np.shape(xi)}")
    a, s = schedule(tau)
    return _bcast(a, x0) * xi - _bcast(s, x0) * x0


def x0_from_velocity(h: np.ndarray, v: np.ndarray, tau) -> np.ndarray:
    a, s = schedule(tau)
    return _bcast(a, h) * h - _bcast(s, h) * v


def velocity_from_x0(h: np.ndarray, x0: np.ndarray, tau) -> np.ndarray:
    a, s = schedule(tau)
    s = _bcast(s, h)
    if np.any(s == 0.0):
        raise ValueError("velocity is undefined from x0 at sigma = 0")
    return (_bcast(a, h) * h - x0) / s


def score_from_denoiser(h: np.ndarray, tau, x0_hat: np.ndarray) -> np.ndarray:
    """(alpha * x0_hat - h) / sigma, the printed score form with the clean-data estimate."""
    a, s = schedule(tau)
    if np.any(np.asarray(s) == 0.0):
        raise ValueError("score needs sigma > 0")
    return (_bcast(a, h) * x0_hat - h) / _bcast(s, h)


def ddim_step(h: np.ndarray, v: np.ndarray, n: int, L: int) -> np.ndarray:
    """One deterministic step from grid level n to n - 1."""
    if not 1 <= n <= L:
        raise ValueError(f"step {n} outside [1, {L}]")
    a, s = schedule(n / L)
    a1, s1 = schedule((n - 1) / L)
    x0 = a * h - s * v
    eps = s * h + a * v
    return a1 * x0 + s1 * eps


def ddim_move(h: np.ndarray, v: np.ndarray, tau, tau_prev) -> np.ndarray:
    """Per-sample DDIM move from level ``tau`` to ``tau_prev`` (arrays broadcast over rows)."""
    a, s = schedule(tau)
    a1, s1 = schedule(tau_prev)
    a, s, a1, s1 = (_bcast(x, h) for x in (a, s, a1, s1))
    return a1 * (a * h - s * v) + s1 * (s * h + a * v)


VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def ddim_sample(velocity_fn: VelocityFn, xi: np.ndarray, L: int = 100) -> np.ndarray:
    h = np.asarray(xi, dtype=np.float64)
    for n in range(L, 0, -1):
        h = ddim_step(h, velocity_fn(h, n / L), n, L)
    return h


def gaussian_x0(h: np.ndarray, tau, mean, std) -> np.ndarray:
    """Posterior mean E[x0 | h] for data N(mean, std^2 I) under the angular schedule."""
    a, s = schedule(tau)
    var = np.asarray(std, dtype=np.float64) ** 2
    return mean + a * var * (h - a * mean) / (a * a * var + s * s)


def gaussian_velocity_fn(mean, std) -> VelocityFn:
    return lambda h, tau: velocity_from_x0(h, gaussian_x0(h, tau, mean, std), tau)


def guided(uncond, cond, omega):
    """uncond + omega * (cond - uncond); ``omega`` may be a per-row array."""
    if np.any(np.asarray(omega) < 0):
        raise ValueError("guidance scale must be >= 0")
    if np.ndim(omega):
        omega = _bcast(omega, np.asarray(uncond))
    return uncond + omega * (cond - uncond)


# ---------------------------------------------------------------- latent statistics


@dataclass
class LatentStats:
    """Per-dimension mean/std: shape (K, d) for fixed-length latents, (d,) per channel otherwise."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, latents: np.ndarray, mask: np.ndarray | None = None, floor: float = 1e-6) -> LatentStats:
        if mask is None:
            mean, std = latents.mean(axis=0), latents.std(axis=0)
        else:
            flat = latents[np.asarray(mask, bool)]
            mean, std = flat.mean(axis=0), flat.std(axis=0)
        return cls(mean, np.maximum(std, floor))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def destandardize(self, x):
        if isinstance(x, Tensor):
            return ad.add(ad.mul(x, Tensor(self._fit(x.shape, self.std))), Tensor(self._fit(x.shape, self.mean)))
        return x * self._fit(x.shape, self.std) + self._fit(x.shape, self.mean)

    def _fit(self, shape, arr: np.ndarray) -> np.ndarray:
        if arr.ndim == 2 and shape[-2] != arr.shape[0]:
            raise ValueError(f"latent length {shape[-2]} does not match stats {arr.shape}")
        return arr


# ---------------------------------------------------------------- denoiser


@dataclass(frozen=True)
class DiffusionConfig:
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 128
    kernel: int = 15
    wide_kernel: int = 31
    wide_blocks: int = 1
    narrow_blocks: int = 3
    latent_dim: int = 64
    K: int = 16  # 0: variable-length latent, one row per frame
    max_positions: int = 1024
    max_phonemes: int = 128
    vocab: int = VOCAB_SIZE

    def conformer(self) -> ConformerConfig:
        return ConformerConfig(self.d_model, self.heads, self.d_model // self.heads, self.kernel, self.ff_dim)


PAPER_DIFFUSION = DiffusionConfig(d_model=512, heads=8, ff_dim=1024, kernel=15, wide_kernel=31, wide_blocks=2,
                                  narrow_blocks=10, latent_dim=512, K=50)


@dataclass
class Conditions:
    """Batched conditioning inputs: prompt tracks rendered as frames plus phoneme ids."""

    prompt: TrackBatch
    text: np.ndarray  # (B, N) phoneme ids
    text_mask: np.ndarray

    @classmethod
    def from_utterances(cls, utts: Sequence[Utterance]) -> Conditions:
        return cls.build([u.prompt for u in utts], [u.phonemes for u in utts])

    @classmethod
    def build(cls, prompts: Sequence[ProsodyTrack], phonemes: Sequence[np.ndarray]) -> Conditions:
        ids, pm = phoneme_batch(phonemes)
        return cls(TrackBatch.from_tracks(prompts), ids, pm)

    def __len__(self) -> int:
        return self.text.shape[0]

    def take(self, idx) -> Conditions:
        p = self.prompt
        idx = np.asarray(idx)
        tb = TrackBatch(*(getattr(p, f)[idx] for f in p.__dataclass_fields__))
        return Conditions(tb, self.text[idx], self.text_mask[idx])

    def repeat(self, times: int) -> Conditions:
        return self.take(np.tile(np.arange(len(self)), times))


class Denoiser(Module):
    """Conformer over ``[prompt frames | text | noisy latent]``; returns the latent segment.

    ``level`` is the noise level in [0, 1] for the teacher, or the normalised guidance
    scale for one-step students.  ``guidance`` feeds a second, zero-initialised level
    pathway used by multi-step students that see both quantities.
    """

    def __init__(self, cfg: DiffusionConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 0xD1FF])
        d = cfg.d_model
        self.cfg = cfg
        self.prompt_pe = PositionalTable(rng, cfg.max_phonemes, d)
        self.prompt_proj = Linear(rng, d + 2, d)
        self.text_emb = PositionalTable(rng, cfg.vocab, d, scale=1.0)
        self.text_pos = PositionalTable(rng, cfg.max_phonemes, d)
        self.latent_proj = Linear(rng, cfg.latent_dim, d)
        self.latent_pos = PositionalTable(rng, cfg.K if cfg.K else cfg.max_positions, d)
        self.level_proj = Linear(rng, d, d)
        self.guide_proj = Linear(rng, d, d, gain=0.0)
        self.null_prompt = param(0.5 * rng.standard_normal((1, 1, d)))
        self.null_text = param(0.5 * rng.standard_normal((1, 1, d)))
        self.stack = ConformerStack(rng, cfg.conformer(), cfg.wide_blocks, cfg.narrow_blocks, cfg.wide_kernel)
        self.out = Linear(rng, d, cfg.latent_dim)

    def condition_features(self, cond: Conditions) -> list[tuple[Tensor, np.ndarray]]:
        """Projected prompt frames and embedded text with their masks."""
        p = cond.prompt
        frames = ad.concat([Tensor(np.stack([p.pitch, p.energy], -1)), self.prompt_pe(p.frame_phoneme)], -1)
        prompt = self.prompt_proj(frames)
        pos = np.broadcast_to(np.arange(cond.text.shape[1]), cond.text.shape)
        text = self.text_emb(cond.text) + self.text_pos(pos)
        return [(prompt, p.frame_valid), (text, cond.text_mask)]

    def condition_segments(self, cond: Conditions, drop: np.ndarray | None = None):
        """Prompt and text segments, each prefixed by a null slot that is live only for dropped rows."""
        B = len(cond)
        drop = np.zeros(B, bool) if drop is None else np.asarray(drop, bool)
        segs = []
        feats = self.condition_features(cond)
        for null, (x, m) in zip((self.null_prompt, self.null_text), feats):
            slot = ad.mul(null, Tensor(np.ones((B, 1, 1))))
            seq = ad.concat([slot, x], axis=1)
            mask = np.concatenate([drop[:, None], m & ~drop[:, None]], axis=1)
            segs.append((seq, mask))
        return segs

    def level_embedding(self, level: np.ndarray, guidance: np.ndarray | None) -> Tensor:
        d = self.cfg.d_model
        emb = self.level_proj(Tensor(sinusoidal_embed(LEVEL_SCALE * np.asarray(level, dtype=np.float64), d)))
        if guidance is not None:
            g = np.asarray(guidance, dtype=np.float64) / GUIDANCE_MAX
            emb = emb + self.guide_proj(Tensor(sinusoidal_embed(LEVEL_SCALE * g, d)))
        return emb.reshape(emb.shape[0], 1, d)

    def __call__(self, h, level, cond: Conditions, drop: np.ndarray | None = None,
                 latent_mask: np.ndarray | None = None, guidance: np.ndarray | None = None) -> Tensor:
        h = ad.as_tensor(h)
        B, K, _ = h.shape
        level = np.broadcast_to(np.asarray(level, dtype=np.float64), (B,))
        latent_mask = np.ones((B, K), bool) if latent_mask is None else np.asarray(latent_mask, bool)
        lat = self.latent_proj(h) + self.latent_pos(np.broadcast_to(np.arange(K), (B, K)))
        segs = self.condition_segments(cond, drop) + [(lat, latent_mask)]
        packed = pack_segments(segs)
        x = packed.x + self.level_embedding(level, guidance)
        packed.x = self.stack(x, packed.mask)
        out, _ = packed.segment(2, K)
        return self.out(out)

    def velocity(self, h: np.ndarray, level, cond: Conditions, omega: float | None = None,
                 latent_mask: np.ndarray | None = None, guidance: np.ndarray | None = None) -> np.ndarray:
        """Inference pass; with ``omega`` the conditional and null passes share one batch."""
        with ad.no_grad():
            if omega is None:
                return self(h, level, cond, None, latent_mask, guidance).data
            B = h.shape[0]
            h2 = np.concatenate([h, h])
            lm = None if latent_mask is None else np.concatenate([latent_mask, latent_mask])
            g = None if guidance is None else np.concatenate([guidance, guidance])
            drop = np.repeat([False, True], B)
            lv = np.tile(np.broadcast_to(np.asarray(level, dtype=np.float64), (B,)), 2)
            both = self(h2, lv, cond.repeat(2), drop, lm, g).data
            return guided(both[B:], both[:B], omega)


def cfg_denoise(model: Denoiser, h: np.ndarray, level, cond: Conditions, omega: float,
                latent_mask: np.ndarray | None = None) -> np.ndarray:
    return model.velocity(h, level, cond, omega, latent_mask)


def sample(model: Denoiser, xi: np.ndarray, cond: Conditions, omega: float = 5.0, L: int = 100,
           stats: LatentStats | None = None, latent_mask: np.ndarray | None = None) -> np.ndarray:
    """Guided DDIM from ``xi`` to a latent; destandardised when ``stats`` is given."""
    fn = lambda h, tau: model.velocity(h, tau, cond, omega, latent_mask)
    x = ddim_sample(fn, xi, L)
    if latent_mask is not None:
        x = np.where(latent_mask[..., None], x, 0.0)
    return x if stats is None else stats.destandardize(x)


# ---------------------------------------------------------------- training


@dataclass
class LatentSet:
    """Standardised training latents with their conditions."""

    x0: np.ndarray  # (M, K, d), standardised
    mask: np.ndarray  # (M, K)
    cond: Conditions
    stats: LatentStats

    def __len__(self) -> int:
        return self.x0.shape[0]


def codec_latents(codec: ProsodyCodec, utts: Sequence[Utterance], batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Quantised style latents of full utterances, right-padded to a common length."""
    outs, masks = [], []
    for i in range(0, len(utts), batch):
        h, m = codec.style([u.track for u in utts[i : i + batch]])
        outs.append(h)
        masks.append(m)
    width = max(h.shape[1] for h in outs)
    lat = np.concatenate([np.pad(h, ((0, 0), (0, width - h.shape[1]), (0, 0))) for h in outs])
    mask = np.concatenate([np.pad(m, ((0, 0), (0, width - m.shape[1]))) for m in masks])
    return lat, mask


def build_latent_set(codec: ProsodyCodec, utts: Sequence[Utterance], stats: LatentStats | None = None) -> LatentSet:
    lat, mask = codec_latents(codec, utts)
    if stats is None:
        stats = LatentStats.fit(lat, None if codec.cfg.fixed_length else mask)
    x0 = np.where(mask[..., None], stats.standardize(lat), 0.0)
    return LatentSet(x0, mask, Conditions.from_utterances(utts), stats)


@dataclass(frozen=True)
class DiffusionTrainConfig:
    steps: int = 10000
    batch: int = 32
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    cond_dropout: float = 0.1


class DiffusionTrainer(Trainer):
    log_columns = ("step", "loss", "tau_mean", "dropped")

    def __init__(self, model: Denoiser, data: LatentSet, cfg: DiffusionTrainConfig, seed: int = 0):
        super().__init__(seed)
        self.model = model
        self.data = data
        self.cfg = cfg
        self.modules["denoiser"] = model
        self.optimizers["denoiser"] = AdamW(list(model.named_parameters()), cfg.lr, (cfg.beta1, cfg.beta2),
                                            weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)

    def extra_tensors(self):
        return {"stats.mean": self.data.stats.mean, "stats.std": self.data.stats.std}

    def train_step(self) -> dict[str, float]:
        d = self.data
        pick = sample_batch(self.rng, len(d), self.cfg.batch)
        x0, mask = d.x0[pick], d.mask[pick]
        width = int(mask.sum(axis=1).max())
        x0, mask = x0[:, :width], mask[:, :width]
        B = len(pick)
        tau = self.rng.uniform(0.0, 1.0, B)
        xi = self.rng.standard_normal(x0.shape)
        drop = self.rng.random(B) < self.cfg.cond_dropout
        h = add_noise(x0, xi, tau)
        target = velocity_target(x0, xi, tau)
        v = self.model(h, tau, d.cond.take(pick), drop, mask)
        loss = ad.l1_loss(v, Tensor(target), mask[..., None])
        grads = ad.backward(loss, self.model.parameters())
        self.optimizers["denoiser"].step(grads)
        return {"loss": loss.item(), "tau_mean": float(tau.mean()), "dropped": float(drop.mean())}


def train_diffusion(model: Denoiser, data: LatentSet, cfg: DiffusionTrainConfig, seed: int = 0,
                    log=None) -> DiffusionTrainer:
    tr = DiffusionTrainer(model, data, cfg, seed)
    tr.run(cfg.steps, log)
    return tr
