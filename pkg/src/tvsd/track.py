"""Prosody tracks: frame-level pitch/energy plus per-phoneme integer durations."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# log-F0 and log-energy are stored standardised with these fixed constants
LOGF0_MEAN = float(np.log(150.0))
LOGF0_STD = 0.4
LOGEN_MEAN = 0.0
LOGEN_STD = 1.0


@dataclass(frozen=True)
class ProsodyTrack:
    """``pitch``/``energy`` per frame, ``durations`` per phoneme.

    ``frame_mask``/``phoneme_mask`` mark masked (hidden) entries with True.
    """

    pitch: np.ndarray
    energy: np.ndarray
    durations: np.ndarray
    frame_mask: np.ndarray | None = None
    phoneme_mask: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.pitch, dtype=np.float64)
        n = np.asarray(self.energy, dtype=np.float64)
        d = np.asarray(self.durations, dtype=np.int64)
        object.__setattr__(self, "pitch", p)
        object.__setattr__(self, "energy", n)
        object.__setattr__(self, "durations", d)
        if d.ndim != 1 or p.ndim != 1 or n.ndim != 1:
            raise ValueError("pitch, energy and durations must be 1-D")
        if d.size and d.min() < 1:
            raise ValueError("every duration must be >= 1 frame")
        if not (p.size == n.size == int(d.sum())):
            raise ValueError(f"frame count mismatch: pitch {p.size}, energy {n.size}, sum(d) {int(d.sum())}")

    @property
    def num_frames(self) -> int:
        return self.pitch.size

    @property
    def num_phonemes(self) -> int:
        return self.durations.size

    def boundaries(self) -> np.ndarray:
        """Cumulative phoneme end frames, starting with 0 (length N+1)."""
        return np.concatenate([[0], np.cumsum(self.durations)])

    def frame_to_phoneme(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_phonemes), self.durations)

    def frame_offsets(self) -> np.ndarray:
        """Index of each frame within its phoneme."""
        starts = self.boundaries()[:-1]
        return np.arange(self.num_frames) - np.repeat(starts, self.durations)

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        fm = np.zeros(self.num_frames, bool) if self.frame_mask is None else np.asarray(self.frame_mask, bool)
        pm = np.zeros(self.num_phonemes, bool) if self.phoneme_mask is None else np.asarray(self.phoneme_mask, bool)
        return fm, pm

    def prefix(self, n_phonemes: int) -> ProsodyTrack:
        T = int(self.durations[:n_phonemes].sum())
        fm, pm = self.masks()
        return ProsodyTrack(
            self.pitch[:T].copy(), self.energy[:T].copy(), self.durations[:n_phonemes].copy(),
            None if self.frame_mask is None else fm[:T].copy(),
            None if self.phoneme_mask is None else pm[:n_phonemes].copy(),
        )


def denormalize_pitch(p: np.ndarray) -> np.ndarray:
    """Standardised log-F0 back to Hz."""
    return np.exp(np.asarray(p) * LOGF0_STD + LOGF0_MEAN)


def denormalize_energy(n: np.ndarray) -> np.ndarray:
    return np.exp(np.asarray(n) * LOGEN_STD + LOGEN_MEAN)


def mask_prosody(track: ProsodyTrack, span: tuple[int, int]) -> ProsodyTrack:
    """Hide phonemes ``[start, stop)``: their frames' pitch/energy are zeroed and flagged.

    Already-masked entries stay masked, so applying the same span twice is a no-op.
    """
    start, stop = span
    N = track.num_phonemes
    if not (0 <= start <= stop <= N):
        raise ValueError(f"span {span} outside [0, {N}]")
    fm, pm = track.masks()
    pm = pm.copy()
    pm[start:stop] = True
    b = track.boundaries()
    fm = fm.copy()
    fm[b[start] : b[stop]] = True
    pitch = np.where(fm, 0.0, track.pitch)
    energy = np.where(fm, 0.0, track.energy)
    return ProsodyTrack(pitch, energy, track.durations.copy(), fm, pm)


def renormalize_prosody(source: ProsodyTrack, prompt: ProsodyTrack) -> ProsodyTrack:
    """Shift source pitch and energy so their medians match the prompt's; durations kept."""
    if source.num_frames == 0 or prompt.num_frames == 0:
        raise ValueError("renormalisation needs non-empty tracks")
    pitch = source.pitch - np.median(source.pitch) + np.median(prompt.pitch)
    energy = source.energy - np.median(source.energy) + np.median(prompt.energy)
    return replace(source, pitch=pitch, energy=energy)
