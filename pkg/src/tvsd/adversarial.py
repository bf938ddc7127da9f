"""Multimodal prosody discriminator and its LSGAN / feature-matching objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ConformerConfig, ConformerStack, Linear, Module, pack_segments


@dataclass
class DiscOutput:
    logits: Tensor  # (B, L) over the packed [sample, conditions...] sequence
    mask: np.ndarray  # (B, L)
    features: list[Tensor]


class MultimodalDiscriminator(Module):
    """Scores a decoder output jointly with the decoder's inputs.

    ``sample_dim`` is the channel count of the judged sequence (1 for durations,
    2 for pitch+energy); ``cond_dims`` lists the channel counts of the condition
    sequences, each projected to the hidden width and concatenated after the sample.
    """

    def __init__(self, rng: np.random.Generator, sample_dim: int, cond_dims: Sequence[int],
                 cfg: ConformerConfig, blocks: int = 6):
        w = cfg.model_dim
        self.in_proj = Linear(rng, sample_dim, w)
        self.cond_proj = [Linear(rng, k, w) for k in cond_dims]
        self.stack = ConformerStack(rng, cfg, 0, blocks)
        self.head = Linear(rng, w, 1)

    def __call__(self, sample: Tensor, sample_mask: np.ndarray,
                 conditions: Sequence[tuple[Tensor, np.ndarray]]) -> DiscOutput:
        if len(conditions) != len(self.cond_proj):
            raise ValueError(f"expected {len(self.cond_proj)} conditions, got {len(conditions)}")
        if sample.ndim == 2:
            sample = sample.reshape(*sample.shape, 1)
        if sample.shape[-1] != self.in_proj.weight.shape[0]:
            raise ValueError(f"sample has {sample.shape[-1]} channels, expected {self.in_proj.weight.shape[0]}")
        segs = [(self.in_proj(sample), sample_mask)]
        for proj, (c, m) in zip(self.cond_proj, conditions):
            segs.append((proj(ad.as_tensor(c)), m))
        packed = pack_segments(segs)
        x, feats = self.stack(packed.x, packed.mask, return_features=True)
        logits = self.head(x).reshape(x.shape[0], x.shape[1])
        return DiscOutput(logits, packed.mask, feats)


def disc_forward(disc: MultimodalDiscriminator, sample, sample_mask, conditions) -> tuple[Tensor, list[Tensor]]:
    out = disc(ad.as_tensor(sample), sample_mask, conditions)
    return out.logits, out.features


def lsgan_losses(real_logits: Tensor, fake_logits: Tensor, real_mask: np.ndarray | None = None,
                 fake_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Generator loss mean (D(fake)-1)^2; discriminator loss mean D(fake)^2 + mean (D(real)-1)^2."""
    ones_f = Tensor(np.ones(fake_logits.shape))
    ones_r = Tensor(np.ones(real_logits.shape))
    zeros_f = Tensor(np.zeros(fake_logits.shape))
    g = ad.mse_loss(fake_logits, ones_f, fake_mask)
    d = ad.mse_loss(fake_logits, zeros_f, fake_mask) + ad.mse_loss(real_logits, ones_r, real_mask)
    return g, d


def feature_matching(real_features: Sequence[Tensor], fake_features: Sequence[Tensor],
                     mask: np.ndarray | None = None) -> Tensor:
    """Sum over layers of the mean absolute feature difference."""
    if len(real_features) != len(fake_features):
        raise ValueError(f"layer count mismatch {len(real_features)} vs {len(fake_features)}")
    total = None
    for r, f in zip(real_features, fake_features):
        m = None if mask is None else np.asarray(mask, bool)[..., None]
        term = ad.l1_loss(f, Tensor(r.data), m)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
