"""Vector-quantised prosody autoencoder.

The encoder compresses stacked pitch, energy and duration-upsampled positional
frames into ``K`` latent rows (or keeps them frame-level when ``K == 0``), a
residual VQ simplifies that latent, and the decoder recovers durations,
pitch and energy conditioned on phoneme embeddings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import VOCAB_SIZE, Utterance
from .nn import (
    ConformerConfig,
    ConformerStack,
    CrossAttention,
    Linear,
    Module,
    PositionalTable,
    lengths_to_mask,
    pack_segments,
    param,
)
from .track import ProsodyTrack, mask_prosody

LAMBDA_F0 = 0.1
LAMBDA_N = 1.0


@dataclass(frozen=True)
class CodecConfig:
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 128
    kernel: int = 15
    wide_kernel: int = 31
    enc_blocks: int = 4
    dec_blocks: int = 4
    K: int = 16  # 0 keeps the latent frame-level (no fixed-length compression)
    num_stages: int = 9
    codes_per_book: int = 256  # 0 bypasses the quantiser
    code_dim: int = 8
    max_phonemes: int = 128
    max_offset: int = 32
    vocab: int = VOCAB_SIZE
    codebook_weight: float = 1.0
    commitment_weight: float = 0.25
    dead_code_steps: int = 200

    def conformer(self) -> ConformerConfig:
        return ConformerConfig(self.d_model, self.heads, self.d_model // self.heads, self.kernel, self.ff_dim)

    @property
    def fixed_length(self) -> bool:
        return self.K > 0

    @property
    def quantized(self) -> bool:
        return self.codes_per_book > 0


PAPER_CODEC = CodecConfig(d_model=512, heads=8, ff_dim=1024, kernel=15, wide_kernel=31, enc_blocks=6,
                          dec_blocks=6, K=50, codes_per_book=1024)


# ---------------------------------------------------------------- batching


@dataclass
class TrackBatch:
    """Right-padded arrays for a list of prosody tracks."""

    pitch: np.ndarray  # (B, T)
    energy: np.ndarray
    frame_phoneme: np.ndarray  # (B, T) phoneme index of each frame
    frame_offset: np.ndarray  # (B, T) frame index within its phoneme
    frame_valid: np.ndarray  # (B, T) bool
    frame_masked: np.ndarray  # (B, T) bool
    durations: np.ndarray  # (B, N) int
    phoneme_valid: np.ndarray  # (B, N) bool

    @classmethod
    def from_tracks(cls, tracks: Sequence[ProsodyTrack]) -> TrackBatch:
        B = len(tracks)
        T = max(t.num_frames for t in tracks)
        N = max(t.num_phonemes for t in tracks)
        if T == 0:
            raise ValueError("tracks have zero frames")
        out = cls(np.zeros((B, T)), np.zeros((B, T)), np.zeros((B, T), np.int64), np.zeros((B, T), np.int64),
                  np.zeros((B, T), bool), np.zeros((B, T), bool), np.zeros((B, N), np.int64), np.zeros((B, N), bool))
        for i, t in enumerate(tracks):
            n, m = t.num_frames, t.num_phonemes
            fm, _ = t.masks()
            out.pitch[i, :n] = t.pitch
            out.energy[i, :n] = t.energy
            out.frame_phoneme[i, :n] = t.frame_to_phoneme()
            out.frame_offset[i, :n] = t.frame_offsets()
            out.frame_valid[i, :n] = True
            out.frame_masked[i, :n] = fm
            out.durations[i, :m] = t.durations
            out.phoneme_valid[i, :m] = True
        return out


def phoneme_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    N = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), N), np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths_to_mask([len(s) for s in seqs], N)


def upsample_index(durations: np.ndarray, valid: np.ndarray, width: int | None = None):
    """Per-row frame->phoneme index, in-phoneme offset and frame mask from integer durations."""
    durations = np.where(valid, durations, 0)
    totals = durations.sum(axis=1)
    width = int(totals.max()) if width is None else width
    B = durations.shape[0]
    idx = np.zeros((B, width), np.int64)
    off = np.zeros((B, width), np.int64)
    for i in range(B):
        n = int(totals[i])
        rep = np.repeat(np.arange(durations.shape[1]), durations[i])
        idx[i, :n] = rep
        starts = np.concatenate([[0], np.cumsum(durations[i])[:-1]])
        off[i, :n] = np.arange(n) - starts[rep]
    return idx, off, lengths_to_mask(totals, width)


def duration_upsample(durations: Sequence[int], pe_table: Tensor) -> Tensor:
    """Repeat row ``i`` of ``pe_table`` ``durations[i]`` times; returns ``(sum(d), dim)``."""
    d = np.asarray(durations, dtype=np.int64)
    if d.size == 0 or d.min() < 1:
        raise ValueError("durations must all be >= 1")
    return ad.embedding_lookup(pe_table, np.repeat(np.arange(d.size), d))


# ---------------------------------------------------------------- encoder


class ProsodyEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: CodecConfig):
        d = cfg.d_model
        self.pe = PositionalTable(rng, cfg.max_phonemes, d)
        self.in_proj = Linear(rng, d + 3, d)
        self.stack = ConformerStack(rng, cfg.conformer(), 1, cfg.enc_blocks - 1, cfg.wide_kernel)
        self.readout = CrossAttention(rng, d, cfg.heads, cfg.K) if cfg.fixed_length else None

    def frames(self, batch: TrackBatch) -> Tensor:
        """Stacked encoder input ``[pitch, energy, duration PE frames, mask flag]`` per frame."""
        keep = (batch.frame_valid & ~batch.frame_masked).astype(np.float64)
        pe = ad.mul(self.pe(batch.frame_phoneme), Tensor(keep[..., None]))
        scalars = np.stack([batch.pitch * keep, batch.energy * keep, batch.frame_masked.astype(np.float64)], -1)
        return ad.concat([Tensor(scalars[..., :2]), pe, Tensor(scalars[..., 2:])], axis=-1)

    def __call__(self, batch: TrackBatch) -> tuple[Tensor, np.ndarray]:
        x = self.in_proj(self.frames(batch))
        h_vl = self.stack(x, batch.frame_valid)
        if self.readout is None:
            return h_vl, batch.frame_valid
        h = self.readout(h_vl, batch.frame_valid)
        return h, np.ones(h.shape[:2], bool)


# ---------------------------------------------------------------- residual VQ


@dataclass
class Quantized:
    codes: np.ndarray | None  # (B, K, S)
    h_q: Tensor
    aux: Tensor
    residual_norms: np.ndarray | None  # (B, K, S + 1)
    residuals: list[np.ndarray]  # per-stage input residual in code space


class ResidualVQ(Module):
    """Residual VQ in a low-dimensional projection; entry 0 of every book is pinned to zero."""

    def __init__(self, rng: np.random.Generator, d_model: int, num_stages: int, codes_per_book: int, code_dim: int):
        if codes_per_book < 1 or num_stages < 1:
            raise ValueError("empty codebook")
        self.down = param(rng.standard_normal((d_model, code_dim)) / math.sqrt(d_model))
        self.up = param(rng.standard_normal((code_dim, d_model)) / math.sqrt(code_dim))
        books = rng.standard_normal((num_stages, codes_per_book, code_dim))
        books *= (0.5 ** np.arange(num_stages))[:, None, None]
        books[:, 0] = 0.0
        self.books = param(books)
        self._idle = np.zeros((num_stages, codes_per_book), np.int64)

    @property
    def num_stages(self) -> int:
        return self.books.shape[0]

    @property
    def codes_per_book(self) -> int:
        return self.books.shape[1]

    def pin_zero(self) -> None:
        self.books.data[:, 0] = 0.0

    def project_up(self, zq: np.ndarray) -> np.ndarray:
        # explicit sequential accumulation so results never depend on batch shape
        up = self.up.data
        out = zq[..., 0:1] * up[0]
        for j in range(1, up.shape[0]):
            out = out + zq[..., j : j + 1] * up[j]
        return out

    def sum_codes(self, codes: np.ndarray) -> np.ndarray:
        books = self.books.data
        zq = np.zeros(codes.shape[:-1] + (books.shape[2],))
        for s in range(books.shape[0]):
            zq = zq + books[s][codes[..., s]]
        return zq

    def assign(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """Greedy nearest-code assignment per stage; returns codes, residual norms and residuals."""
        books = self.books.data
        r = z.copy()
        codes = np.zeros(z.shape[:-1] + (books.shape[0],), np.int64)
        norms = [np.linalg.norm(r, axis=-1)]
        residuals = []
        for s in range(books.shape[0]):
            residuals.append(r)
            c = books[s]
            dist = (r * r).sum(-1, keepdims=True) - 2.0 * r @ c.T + (c * c).sum(-1)
            idx = np.argmin(dist, axis=-1)
            codes[..., s] = idx
            r = r - c[idx]
            norms.append(np.linalg.norm(r, axis=-1))
        return codes, np.stack(norms, -1), residuals

    def dequantize(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.shape[-1] != self.num_stages:
            raise ValueError(f"expected {self.num_stages} code columns, got {codes.shape[-1]}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.codes_per_book):
            raise IndexError(f"code index outside [0, {self.codes_per_book})")
        return self.project_up(self.sum_codes(codes))

    def __call__(self, h: Tensor, mask: np.ndarray | None = None, codes: np.ndarray | None = None,
                 codebook_weight: float = 1.0, commitment_weight: float = 0.25) -> Quantized:
        """Quantise ``h``; pass ``codes`` to freeze the assignment (used for gradient checks)."""
        if self.codes_per_book == 0:
            raise ValueError("empty codebook")
        z = ad.matmul(h, self.down)
        norms, residuals = None, None
        if codes is None:
            codes, norms, residuals = self.assign(z.data)
        zq = self.sum_codes(codes)
        hq_val = self.project_up(zq)
        h_q = ad.straight_through(h, hq_val)

        S, C, cd = self.books.shape
        flat_books = self.books.reshape(S * C, cd)
        m = None if mask is None else np.asarray(mask, bool)[..., None]
        if residuals is None:
            residuals, r = [], z.data
            for s in range(S):
                residuals.append(r)
                r = r - self.books.data[s][codes[..., s]]
        codebook = None
        for s in range(S):
            chosen = ad.embedding_lookup(flat_books, s * C + codes[..., s])
            term = ad.mse_loss(chosen, Tensor(residuals[s]), m)
            codebook = term if codebook is None else codebook + term
        upfit = ad.mse_loss(ad.matmul(Tensor(zq), self.up), Tensor(h.data), m)
        commit = ad.mse_loss(z, Tensor(zq), m) + ad.mse_loss(h, Tensor(hq_val), m)
        aux = ad.scale(codebook + upfit, codebook_weight) + ad.scale(commit, commitment_weight)
        return Quantized(codes, h_q, aux, norms, residuals)

    def update_usage(self, codes: np.ndarray, residuals: Sequence[np.ndarray], mask: np.ndarray | None,
                     dead_after: int, rng: np.random.Generator) -> int:
        """Advance idle counters and re-seed codes idle longer than ``dead_after`` steps.

        Dead codes are replaced by residuals drawn from the current batch at that stage.
        Returns the number of re-seeded codes.
        """
        S, C, _ = self.books.shape
        sel = np.ones(codes.shape[:-1], bool) if mask is None else np.asarray(mask, bool)
        flat_codes = codes[sel]
        reseeded = 0
        for s in range(S):
            used = np.zeros(C, bool)
            used[flat_codes[:, s]] = True
            self._idle[s] = np.where(used, 0, self._idle[s] + 1)
            dead = np.flatnonzero(self._idle[s] > dead_after)
            dead = dead[dead != 0]
            if dead.size:
                pool = residuals[s][sel]
                self.books.data[s, dead] = pool[rng.integers(0, pool.shape[0], dead.size)]
                self._idle[s, dead] = 0
                reseeded += dead.size
        return reseeded


# ---------------------------------------------------------------- decoder


@dataclass
class DecoderOutput:
    durations: Tensor  # (B, N) positive
    pitch: Tensor  # (B, T)
    energy: Tensor  # (B, T)
    phoneme_mask: np.ndarray
    frame_mask: np.ndarray
    up_durations: np.ndarray  # integer durations used for the frame-level heads
    features: list[Tensor]


class ProsodyDecoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: CodecConfig):
        d = cfg.d_model
        self.text_emb = PositionalTable(rng, cfg.vocab, d, scale=1.0)
        self.text_pos = PositionalTable(rng, cfg.max_phonemes, d)
        self.style_pos = PositionalTable(rng, cfg.K, d) if cfg.fixed_length else None
        self.stack = ConformerStack(rng, cfg.conformer().with_kernel(cfg.wide_kernel), cfg.dec_blocks, 0)
        self.dur_head = Linear(rng, d, 1)
        self.offset_emb = PositionalTable(rng, cfg.max_offset, d)
        self.pe_hidden = Linear(rng, d, d)
        self.pe_head = Linear(rng, d, 2)
        self._max_offset = cfg.max_offset

    def embed_text(self, phonemes: np.ndarray) -> Tensor:
        """Phoneme embeddings with positions; ``phonemes`` is ``(B, N)``."""
        pos = np.broadcast_to(np.arange(phonemes.shape[1]), phonemes.shape)
        return self.text_emb(phonemes) + self.text_pos(pos)

    def __call__(self, h: Tensor, h_mask: np.ndarray, phonemes: np.ndarray, ph_mask: np.ndarray,
                 durations: np.ndarray | None = None) -> DecoderOutput:
        """``durations`` drive frame upsampling (ground truth in training); None uses rounded predictions."""
        B, N = phonemes.shape
        if N == 0 or not ph_mask.any(axis=1).all():
            raise ValueError("decode needs at least one phoneme per row")
        text = self.embed_text(phonemes)
        if self.style_pos is not None:
            h = h + self.style_pos.entries
        packed = pack_segments([(text, ph_mask), (h, h_mask)])
        out, feats = self.stack(packed.x, packed.mask, return_features=True)
        packed.x = out
        ph_feat, _ = packed.segment(0, N)
        d_hat = ad.softplus(self.dur_head(ph_feat)).reshape(B, N)

        if durations is None:
            durations = np.maximum(np.rint(d_hat.data), 1).astype(np.int64)
        durations = np.where(ph_mask, durations, 0)
        idx, off, fmask = upsample_index(durations, ph_mask)
        flat = ph_feat.reshape(B * N, -1)
        frames = ad.embedding_lookup(flat, np.arange(B)[:, None] * N + idx)
        frames = frames + self.offset_emb(np.minimum(off, self._max_offset - 1))
        pe = self.pe_head(ad.silu(self.pe_hidden(frames)))
        pitch, energy = ad.split(pe, [1, 1], axis=-1)
        T = idx.shape[1]
        return DecoderOutput(d_hat, pitch.reshape(B, T), energy.reshape(B, T), ph_mask, fmask, durations, feats)


# ---------------------------------------------------------------- full codec


@dataclass
class CodecOutput:
    latent: Tensor  # pre-quantisation
    latent_mask: np.ndarray
    quant: Quantized | None
    decoded: DecoderOutput

    @property
    def style(self) -> Tensor:
        return self.latent if self.quant is None else self.quant.h_q


class ProsodyCodec(Module):
    def __init__(self, cfg: CodecConfig, seed: int = 0):
        # independent streams so the quantiser's size never shifts the encoder/decoder initialisation
        self.cfg = cfg
        self.encoder = ProsodyEncoder(np.random.default_rng([seed, 1]), cfg)
        self.rvq = None
        if cfg.quantized:
            self.rvq = ResidualVQ(np.random.default_rng([seed, 2]), cfg.d_model, cfg.num_stages, cfg.codes_per_book,
                                  cfg.code_dim)
        self.decoder = ProsodyDecoder(np.random.default_rng([seed, 3]), cfg)

    def named_parameters(self, prefix: str = ""):
        for name in ("encoder", "rvq", "decoder"):
            mod = getattr(self, name)
            if mod is not None:
                yield from mod.named_parameters(f"{prefix}{name}.")

    def encode(self, tracks: Sequence[ProsodyTrack]) -> tuple[Tensor, np.ndarray]:
        return self.encoder(TrackBatch.from_tracks(tracks))

    def quantize(self, h: Tensor, mask: np.ndarray, codes: np.ndarray | None = None) -> Quantized | None:
        if self.rvq is None:
            return None
        mask = None if self.cfg.fixed_length else mask
        return self.rvq(h, mask, codes, self.cfg.codebook_weight, self.cfg.commitment_weight)

    def style(self, tracks: Sequence[ProsodyTrack]) -> tuple[np.ndarray, np.ndarray]:
        """Quantised latent (as used by the decoder) for each track, without gradients."""
        with ad.no_grad():
            h, m = self.encode(tracks)
            q = self.quantize(h, m)
        return (h.data if q is None else q.h_q.data), m

    def decode(self, h, h_mask: np.ndarray, phonemes: Sequence[np.ndarray] | np.ndarray,
               durations: np.ndarray | None = None) -> DecoderOutput:
        if isinstance(phonemes, np.ndarray) and phonemes.ndim == 2:
            ids, pm = phonemes, np.ones(phonemes.shape, bool)
        else:
            ids, pm = phoneme_batch(phonemes)
        return self.decoder(ad.as_tensor(h), h_mask, ids, pm, durations)

    def forward(self, tracks: Sequence[ProsodyTrack], phonemes: Sequence[np.ndarray],
                targets: Sequence[ProsodyTrack] | None = None) -> CodecOutput:
        """Encode ``tracks`` (possibly masked) and decode with ground-truth durations of ``targets``."""
        targets = tracks if targets is None else targets
        h, m = self.encode(tracks)
        q = self.quantize(h, m)
        style = h if q is None else q.h_q
        tb = TrackBatch.from_tracks(targets)
        ids, pm = phoneme_batch(phonemes)
        dec = self.decoder(style, m, ids, pm, tb.durations)
        return CodecOutput(h, m, q, dec)


# ---------------------------------------------------------------- losses


@dataclass
class ProsodyLosses:
    dur: Tensor
    f0: Tensor
    n: Tensor

    def combined(self) -> Tensor:
        return self.dur + ad.scale(self.f0, LAMBDA_F0) + ad.scale(self.n, LAMBDA_N)

    def values(self) -> tuple[float, float, float]:
        return self.dur.item(), self.f0.item(), self.n.item()


def prosody_losses(truth: Sequence[ProsodyTrack] | TrackBatch, pred: DecoderOutput) -> ProsodyLosses:
    """Mean absolute duration, pitch and energy errors over valid phonemes / frames."""
    tb = truth if isinstance(truth, TrackBatch) else TrackBatch.from_tracks(truth)
    if pred.durations.shape != tb.durations.shape or pred.pitch.shape != tb.pitch.shape:
        raise ValueError(f"shape mismatch: durations {pred.durations.shape} vs {tb.durations.shape}, "
                         f"frames {pred.pitch.shape} vs {tb.pitch.shape}")
    dur = ad.l1_loss(pred.durations, Tensor(tb.durations.astype(np.float64)), tb.phoneme_valid)
    f0 = ad.l1_loss(pred.pitch, Tensor(tb.pitch), tb.frame_valid)
    n = ad.l1_loss(pred.energy, Tensor(tb.energy), tb.frame_valid)
    return ProsodyLosses(dur, f0, n)


def sample_mask_span(n_phonemes: int, rng: np.random.Generator, prob: float = 0.5,
                     min_frac: float = 0.1, max_frac: float = 0.5) -> tuple[int, int]:
    """With probability ``prob`` a contiguous span covering min_frac..max_frac of the phonemes, else empty."""
    if rng.random() >= prob:
        return (0, 0)
    length = max(1, int(round(rng.uniform(min_frac, max_frac) * n_phonemes)))
    length = min(length, n_phonemes)
    start = int(rng.integers(0, n_phonemes - length + 1))
    return (start, start + length)


def masked_inputs(utts: Sequence[Utterance], rng: np.random.Generator, prob: float) -> list[ProsodyTrack]:
    return [mask_prosody(u.track, sample_mask_span(u.track.num_phonemes, rng, prob)) for u in utts]


def codes_to_csv(codes: np.ndarray, path) -> None:
    """One row per latent position, one column per VQ stage."""
    codes = np.asarray(codes)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"stage_{s}" for s in range(codes.shape[-1])])
        for row in codes.reshape(-1, codes.shape[-1]):
            w.writerow([int(c) for c in row])


def codes_from_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[int(c) for c in r] for r in rows], dtype=np.int64)
