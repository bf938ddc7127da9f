"""Network blocks on top of :mod:`tvsd.autodiff`.

Sequences are laid out ``(batch, length, features)`` with a boolean keep-mask
``(batch, length)``; padding always sits at the end of each row so a batched
forward matches the unpadded per-sample forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; parameters and submodules are discovered by attribute order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def copy_from(self, other: Module) -> None:
        self.load_state_dict(other.state_dict())


def param(arr: np.ndarray) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, gain: float = 1.0):
        self.weight = param(rng.standard_normal((d_in, d_out)) * gain / math.sqrt(d_in))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, self._eps)


class PositionalTable(Module):
    """Learnable ``max_positions x dim`` lookup table."""

    def __init__(self, rng: np.random.Generator, max_positions: int, dim: int, scale: float = 0.5):
        self.entries = param(rng.standard_normal((max_positions, dim)) * scale)

    @property
    def max_positions(self) -> int:
        return self.entries.shape[0]

    def __call__(self, idx) -> Tensor:
        idx = np.asarray(idx)
        if idx.size and idx.max() >= self.max_positions:
            raise IndexError(f"position {int(idx.max())} >= table size {self.max_positions}")
        return ad.embedding_lookup(self.entries, idx)


def sinusoidal_embed(value, dim: int) -> np.ndarray:
    """Interleaved sin/cos of ``value`` at geometric frequencies from 1 down to 1e-4.

    ``value`` may be a scalar or an array; output has a trailing axis of ``dim``.
    """
    if dim % 2:
        raise ValueError("sinusoidal embedding dimension must be even")
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(value, dtype=np.float64)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------- attention


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention; returns (output, weights)."""
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    dh = qh.shape[-1]
    scores = ad.scale(ad.matmul(qh, kh.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
    w = ad.softmax(scores, axis=-1, mask=mask)
    return _merge_heads(ad.matmul(w, vh)), w


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self._heads = heads

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        out, _ = attention(self.q(x), self.k(x), self.v(x), self._heads, mask)
        return self.o(out)


class CrossAttention(Module):
    """Fixed-length read-out: ``num_queries`` learnable positions attend over a variable-length sequence.

    The learnable table indexes output positions; the sequence supplies keys and values.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, num_queries: int):
        self.h_pe = PositionalTable(rng, num_queries, dim, scale=1.0)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self._heads = heads

    @property
    def num_queries(self) -> int:
        return self.h_pe.max_positions

    def __call__(self, seq: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
        b, L, d = seq.shape
        if L == 0:
            raise ValueError("cross attention over an empty sequence")
        qs = self.q(self.h_pe.entries)  # (K, d)
        qs = ad.add(Tensor(np.zeros((b, 1, 1))), qs)  # broadcast to (B, K, d)
        out, w = attention(qs, self.k(seq), self.v(seq), self._heads, mask)
        out = self.o(out)
        return (out, w) if return_weights else out


# ---------------------------------------------------------------- conformer


@dataclass(frozen=True)
class ConformerConfig:
    model_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    conv_kernel_size: int = 15
    feedforward_dim: int = 128

    def __post_init__(self):
        if self.num_heads * self.head_dim != self.model_dim:
            raise ValueError("num_heads * head_dim must equal model_dim")
        if self.conv_kernel_size % 2 == 0:
            raise ValueError("conv_kernel_size must be odd")

    def with_kernel(self, k: int) -> ConformerConfig:
        return ConformerConfig(self.model_dim, self.num_heads, self.head_dim, k, self.feedforward_dim)


PAPER_CONFORMER = ConformerConfig(512, 8, 64, 31, 1024)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.silu(self.fc1(self.norm(x))))


class ConvModule(Module):
    # BatchNorm of the standard block is replaced by LayerNorm: batch statistics would
    # make a sample's output depend on its batch-mates.
    def __init__(self, rng, dim: int, kernel: int):
        self.norm = LayerNorm(dim)
        self.pw1 = Linear(rng, dim, 2 * dim)
        self.dw_weight = param(rng.standard_normal((dim, kernel)) / math.sqrt(kernel))
        self.dw_bias = param(np.zeros(dim))
        self.mid_norm = LayerNorm(dim)
        self.pw2 = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        y = ad.glu(self.pw1(self.norm(x)))
        if mask is not None:
            y = ad.mul(y, Tensor(np.asarray(mask, dtype=np.float64)[..., None]))
        y = ad.depthwise_conv1d(y, self.dw_weight, self.dw_bias)
        return self.pw2(ad.silu(self.mid_norm(y)))


class ConformerBlock(Module):
    """Half-step FF, self-attention, conv module, half-step FF, final layer norm."""

    def __init__(self, rng: np.random.Generator, cfg: ConformerConfig):
        d = cfg.model_dim
        self.ff1 = FeedForward(rng, d, cfg.feedforward_dim)
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, cfg.num_heads)
        self.conv = ConvModule(rng, d, cfg.conv_kernel_size)
        self.ff2 = FeedForward(rng, d, cfg.feedforward_dim)
        self.out_norm = LayerNorm(d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if x.shape[1] == 0:
            raise ValueError("conformer input has zero length")
        x = x + ad.scale(self.ff1(x), 0.5)
        x = x + self.attn(self.attn_norm(x), mask)
        x = x + self.conv(x, mask)
        x = x + ad.scale(self.ff2(x), 0.5)
        return self.out_norm(x)


class ConformerStack(Module):
    def __init__(self, rng: np.random.Generator, cfg: ConformerConfig, n_wide: int, n_narrow: int,
                 wide_kernel: int | None = None):
        wide = cfg.with_kernel(wide_kernel) if wide_kernel else cfg
        self.blocks = [ConformerBlock(rng, wide) for _ in range(n_wide)] + [
            ConformerBlock(rng, cfg) for _ in range(n_narrow)
        ]

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, return_features: bool = False):
        feats = []
        for blk in self.blocks:
            x = blk(x, mask)
            feats.append(x)
        return (x, feats) if return_features else x


def conformer_forward(x: Tensor, block: ConformerBlock, mask: np.ndarray | None = None) -> Tensor:
    """Apply one block to a single ``(L, d)`` sequence or a batch ``(B, L, d)``."""
    if x.ndim == 2:
        return block(x.reshape(1, *x.shape), mask).reshape(x.shape)
    return block(x, mask)


# ---------------------------------------------------------------- packing


@dataclass
class Packed:
    """Variable-length segments concatenated per row and right-padded."""

    x: Tensor
    mask: np.ndarray
    offsets: np.ndarray  # (B, num_segments) start of each segment in its row
    lengths: np.ndarray  # (B, num_segments)

    def segment(self, s: int, width: int | None = None) -> tuple[Tensor, np.ndarray]:
        """Extract segment ``s`` as a right-padded ``(B, width, d)`` tensor and its mask."""
        lens = self.lengths[:, s]
        width = int(lens.max()) if width is None else width
        b, L, d = self.x.shape
        j = np.arange(width)[None, :]
        mask = j < lens[:, None]
        pos = np.where(mask, self.offsets[:, s][:, None] + j, 0)
        idx = np.arange(b)[:, None] * L + pos
        flat = self.x.reshape(b * L, d)
        return ad.embedding_lookup(flat, idx), mask


def pack_segments(segments: Sequence[tuple[Tensor, np.ndarray]]) -> Packed:
    """Concatenate each row's valid prefix of every segment, padding only at the end."""
    b = segments[0][0].shape[0]
    d = segments[0][0].shape[2]
    lengths = np.stack([np.asarray(m, dtype=bool).sum(axis=1) for _, m in segments], axis=1)
    widths = [t.shape[1] for t, _ in segments]
    base = np.concatenate([[0], np.cumsum(widths)[:-1]])
    total = int(lengths.sum(axis=1).max())
    offsets = np.concatenate([np.zeros((b, 1), dtype=np.int64), np.cumsum(lengths, axis=1)[:, :-1]], axis=1)
    src = np.zeros((b, total), dtype=np.int64)
    mask = np.zeros((b, total), dtype=bool)
    for s in range(len(segments)):
        for i in range(b):
            n = lengths[i, s]
            o = offsets[i, s]
            src[i, o : o + n] = base[s] + np.arange(n)
            mask[i, o : o + n] = True
    wide = ad.concat([t for t, _ in segments], axis=1)
    W = sum(widths)
    flat = wide.reshape(b * W, d)
    idx = np.arange(b)[:, None] * W + src
    return Packed(ad.embedding_lookup(flat, idx), mask, offsets, lengths)


def lengths_to_mask(lengths: Sequence[int], width: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths)
    width = int(lengths.max()) if width is None else width
    return np.arange(width)[None, :] < lengths[:, None]


# ---------------------------------------------------------------- optimiser


class AdamW:
    """Adam with decoupled weight decay; state is a plain dict of arrays for checkpointing."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-4, betas=(0.0, 0.99),
                 eps: float = 1e-8, weight_decay: float = 1e-4, clip_norm: float | None = 1.0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(norm):
            raise ad.NonFiniteError("non-finite gradient")
        coef = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            coef = self.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.b1**self.t if self.b1 > 0 else 1.0
        bc2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * coef
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for n, m, v in zip(self.names, self.m, self.v):
            out[f"m.{n}"] = m.copy()
            out[f"v.{n}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for i, n in enumerate(self.names):
            self.m[i][...] = state[f"m.{n}"]
            self.v[i][...] = state[f"v.{n}"]
