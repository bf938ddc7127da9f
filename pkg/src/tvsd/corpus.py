"""Seed-deterministic synthetic prosody corpus and its on-disk format."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .track import LOGEN_MEAN, LOGEN_STD, LOGF0_MEAN, LOGF0_STD, ProsodyTrack

VOCAB_SIZE = 64
_PHONEME_TABLE_SEED = 20240917
_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    base_logf0: float
    pitch_range: float
    rate_factor: float
    energy_base: float
    energy_range: float
    accent_strength: float


@dataclass(frozen=True)
class Utterance:
    utt_id: int
    speaker_id: int
    phonemes: np.ndarray
    track: ProsodyTrack
    prompt_phonemes: int

    @property
    def prompt(self) -> ProsodyTrack:
        return self.track.prefix(self.prompt_phonemes)


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    num_speakers: int = 8
    utts_per_speaker: int = 16
    min_phonemes: int = 8
    max_phonemes: int = 64
    min_duration: int = 2
    max_duration: int = 12
    prompt_min_frac: float = 0.2
    prompt_max_frac: float = 0.5
    noise: float = 0.1
    accent_scale: float = 1.0


@dataclass
class Corpus:
    config: CorpusConfig
    speakers: list[SpeakerProfile]
    utterances: list[Utterance] = field(default_factory=list)

    def by_speaker(self) -> dict[int, list[Utterance]]:
        out: dict[int, list[Utterance]] = {}
        for u in self.utterances:
            out.setdefault(u.speaker_id, []).append(u)
        return out

    def split(self, holdout_speakers: int) -> tuple[list[Utterance], list[Utterance]]:
        """Train/held-out split by speaker; the last ``holdout_speakers`` speakers are held out."""
        ids = sorted({s.speaker_id for s in self.speakers})
        held = set(ids[len(ids) - holdout_speakers :]) if holdout_speakers else set()
        train = [u for u in self.utterances if u.speaker_id not in held]
        test = [u for u in self.utterances if u.speaker_id in held]
        return train, test


def phoneme_table() -> dict[str, np.ndarray]:
    """Fixed per-phoneme-class properties shared by every corpus."""
    rng = np.random.default_rng(_PHONEME_TABLE_SEED)
    vowel = (np.arange(VOCAB_SIZE) % 4) == 0
    return {
        "dur_mean": np.where(vowel, rng.uniform(5.0, 8.0, VOCAB_SIZE), rng.uniform(2.0, 5.0, VOCAB_SIZE)),
        "accent_weight": np.where(vowel, rng.uniform(0.6, 1.0, VOCAB_SIZE), 0.0),
        "energy_offset": np.where(vowel, rng.uniform(0.3, 1.0, VOCAB_SIZE), rng.uniform(-1.0, 0.0, VOCAB_SIZE)),
    }


def gen_speakers(cfg: CorpusConfig) -> list[SpeakerProfile]:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    out = []
    for i in range(cfg.num_speakers):
        out.append(
            SpeakerProfile(
                speaker_id=i,
                base_logf0=float(rng.uniform(np.log(80.0), np.log(300.0))),
                pitch_range=float(rng.uniform(0.05, 0.25)),
                rate_factor=float(rng.uniform(0.75, 1.35)),
                energy_base=float(rng.uniform(-1.0, 1.0)),
                energy_range=float(rng.uniform(0.2, 0.6)),
                accent_strength=float(rng.uniform(0.5, 1.5)),
            )
        )
    return out


def synth_track(
    spk: SpeakerProfile,
    phonemes: np.ndarray,
    rng: np.random.Generator,
    cfg: CorpusConfig,
    table: dict[str, np.ndarray] | None = None,
) -> ProsodyTrack:
    """Pitch = speaker base + declination + per-phoneme accents + noise; energy analogous."""
    table = phoneme_table() if table is None else table
    dur = np.clip(np.rint(table["dur_mean"][phonemes] * spk.rate_factor), cfg.min_duration, cfg.max_duration)
    dur = np.maximum(dur.astype(np.int64), 1)
    T = int(dur.sum())
    frac = np.arange(T) / max(T - 1, 1)
    frame_ph = np.repeat(np.arange(dur.size), dur)
    starts = np.concatenate([[0], np.cumsum(dur)[:-1]])
    offs = np.arange(T) - np.repeat(starts, dur)
    bump = np.sin(np.pi * (offs + 0.5) / dur[frame_ph])

    decl = rng.uniform(0.5, 1.5) * spk.pitch_range
    amp = spk.accent_strength * cfg.accent_scale * spk.pitch_range * table["accent_weight"][phonemes]
    amp = amp * rng.uniform(0.5, 1.5, dur.size)
    accent = amp[frame_ph] * bump
    logf0 = spk.base_logf0 - decl * frac + accent + cfg.noise * spk.pitch_range * rng.standard_normal(T)

    en_class = table["energy_offset"][phonemes][frame_ph] * spk.energy_range
    en_accent = 0.5 * spk.energy_range * accent / max(spk.pitch_range, 1e-9)
    loge = (spk.energy_base + en_class + en_accent - 0.3 * spk.energy_range * frac
            + cfg.noise * spk.energy_range * rng.standard_normal(T))
    return ProsodyTrack((logf0 - LOGF0_MEAN) / LOGF0_STD, (loge - LOGEN_MEAN) / LOGEN_STD, dur)


def make_prompt(track: ProsodyTrack, fraction: float) -> ProsodyTrack:
    """Prefix of ``track`` cut at the phoneme boundary nearest ``fraction`` of its frames."""
    return track.prefix(prompt_phoneme_count(track, fraction))


def prompt_phoneme_count(track: ProsodyTrack, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("prompt fraction must lie in (0, 1]")
    b = track.boundaries()
    n = int(np.argmin(np.abs(b - fraction * track.num_frames)))
    if n == 0:
        if track.num_phonemes == 1:
            raise ValueError("prompt would contain zero phonemes")
        n = 1
    return n


def gen_corpus(cfg: CorpusConfig) -> Corpus:
    if cfg.num_speakers < 1:
        raise ValueError("need at least one speaker")
    if cfg.min_phonemes > cfg.max_phonemes or cfg.min_phonemes < 1:
        raise ValueError("empty phoneme length range")
    table = phoneme_table()
    speakers = gen_speakers(cfg)
    corpus = Corpus(cfg, speakers)
    idx = 0
    for spk in speakers:
        for _ in range(cfg.utts_per_speaker):
            rng = np.random.default_rng([cfg.seed, idx])
            n = int(rng.integers(cfg.min_phonemes, cfg.max_phonemes + 1))
            phonemes = rng.integers(0, VOCAB_SIZE, n)
            track = synth_track(spk, phonemes, rng, cfg, table)
            frac = float(rng.uniform(cfg.prompt_min_frac, cfg.prompt_max_frac))
            corpus.utterances.append(Utterance(idx, spk.speaker_id, phonemes, track, prompt_phoneme_count(track, frac)))
            idx += 1
    return corpus


# ---------------------------------------------------------------- persistence


def _utt_bytes(u: Utterance) -> bytes:
    t = u.track
    return b"".join([
        _HEADER.pack(t.num_frames, t.num_phonemes, u.prompt_phonemes),
        t.pitch.astype("<f8").tobytes(),
        t.energy.astype("<f8").tobytes(),
        t.durations.astype("<i4").tobytes(),
        np.asarray(u.phonemes).astype("<i4").tobytes(),
    ])


def _utt_from_bytes(raw: bytes, utt_id: int, speaker_id: int) -> Utterance:
    T, N, P = _HEADER.unpack_from(raw, 0)
    off = _HEADER.size
    pitch = np.frombuffer(raw, "<f8", T, off).astype(np.float64)
    off += 8 * T
    energy = np.frombuffer(raw, "<f8", T, off).astype(np.float64)
    off += 8 * T
    dur = np.frombuffer(raw, "<i4", N, off).astype(np.int64)
    off += 4 * N
    ph = np.frombuffer(raw, "<i4", N, off).astype(np.int64)
    return Utterance(utt_id, speaker_id, ph, ProsodyTrack(pitch, energy, dur), P)


def save_corpus(corpus: Corpus, directory: str | os.PathLike, force: bool = False) -> Path:
    d = Path(directory)
    if (d / "manifest.json").exists() and not force:
        raise FileExistsError(f"{d} already holds a corpus (use force)")
    d.mkdir(parents=True, exist_ok=True)
    index = []
    for u in corpus.utterances:
        name = f"utt_{u.utt_id:05d}.bin"
        (d / name).write_bytes(_utt_bytes(u))
        index.append({"utt_id": u.utt_id, "speaker_id": u.speaker_id, "file": name})
    manifest = {
        "format": "tvsd-corpus-1",
        "config": asdict(corpus.config),
        "speakers": [asdict(s) for s in corpus.speakers],
        "utterances": index,
    }
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, d / "manifest.json")
    return d


def load_corpus(directory: str | os.PathLike) -> Corpus:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = CorpusConfig(**manifest["config"])
    corpus = Corpus(cfg, [SpeakerProfile(**s) for s in manifest["speakers"]])
    for rec in manifest["utterances"]:
        corpus.utterances.append(_utt_from_bytes((d / rec["file"]).read_bytes(), rec["utt_id"], rec["speaker_id"]))
    return corpus


def corpus_checksum(directory: str | os.PathLike) -> str:
    """SHA-256 over every corpus file in name order."""
    d = Path(directory)
    h = hashlib.sha256()
    for f in sorted(d.iterdir()):
        if f.is_file() and not f.name.endswith(".tmp"):
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()
