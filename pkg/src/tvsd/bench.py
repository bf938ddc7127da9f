"""Desk-scale benchmark harness: sigma error, bottleneck sweep, distillation comparison,
expressiveness and prompt-similarity statistics, and a timing breakdown."""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .codec import CodecConfig, ProsodyCodec, prosody_losses
from .corpus import Utterance
from .diffusion import (
    Conditions,
    Denoiser,
    DiffusionConfig,
    DiffusionTrainConfig,
    LatentSet,
    LatentStats,
    build_latent_set,
    sample,
    train_diffusion,
)
from .distill import (
    DistillConfig,
    adversarial_distill,
    add_latent_fn,
    consistency_distill,
    consistency_latent_fn,
    decode_latent,
    eval_distill,
    generate_distill_set,
    one_step_fn,
    pretrain_student,
    pretrained_fn,
    student_from_pretrained,
    train_student,
)
from .track import ProsodyTrack, denormalize_energy, denormalize_pitch
from .training import CodecTrainConfig, CodecTrainer

SWEEP_COLUMNS = ("config", "L_dur", "L_f0", "L_n", "L_prosody", "sigma_error")
DISTILL_COLUMNS = ("method", "sample_size", "init", "L_dur", "L_f0", "L_n")
EVAL_COLUMNS = ("metric", "value")
TIMING_COLUMNS = ("stage", "seconds", "share_percent")
SIMILARITY_STATS = ("pitch_mean", "pitch_std", "energy_mean", "energy_std", "speaking_rate")


def write_csv(path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- sigma error


def sigma_error(data: np.ndarray, samples: np.ndarray) -> float:
    """mean_j |std_data_j - std_samples_j| / mean_j std_data_j over flattened latent dimensions."""
    data = np.asarray(data, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if data.shape[0] == 0 or samples.shape[0] == 0:
        raise ValueError("sigma_error needs non-empty sets")
    d = data.reshape(data.shape[0], -1)
    s = samples.reshape(samples.shape[0], -1)
    if d.shape[1] != s.shape[1]:
        raise ValueError(f"dimension mismatch {d.shape[1]} vs {s.shape[1]}")
    sd, ss = d.std(axis=0), s.std(axis=0)
    denom = sd.mean()
    if denom == 0.0:
        raise ValueError("data has zero standard deviation")
    return float(np.abs(sd - ss).mean() / denom)


def masked_sigma_error(data: np.ndarray, data_mask: np.ndarray, samples: np.ndarray,
                       sample_mask: np.ndarray) -> float:
    """sigma_error for variable-length latents: rows pooled over valid positions, per channel."""
    return sigma_error(data[np.asarray(data_mask, bool)], samples[np.asarray(sample_mask, bool)])


# ---------------------------------------------------------------- bottleneck sweep


@dataclass
class SweepResult:
    config: str
    L_dur: float
    L_f0: float
    L_n: float
    sigma_error: float

    @property
    def L_prosody(self) -> float:
        return self.L_dur + self.L_f0 + self.L_n

    def row(self) -> tuple:
        return (self.config, self.L_dur, self.L_f0, self.L_n, self.L_prosody, self.sigma_error)


@dataclass(frozen=True)
class SweepSpec:
    codec: CodecConfig
    diffusion: DiffusionConfig
    codec_train: CodecTrainConfig
    diffusion_train: DiffusionTrainConfig
    sample_steps: int = 50
    sample_omega: float = 1.0
    sample_repeats: int = 1


def reconstruction_losses(codec: ProsodyCodec, utts: Sequence[Utterance], batch: int = 64) -> tuple[float, float, float]:
    """Unmasked reconstruction L1 (ground-truth durations drive upsampling), averaged over utterances."""
    tot = np.zeros(3)
    for i in range(0, len(utts), batch):
        chunk = utts[i : i + batch]
        with ad.no_grad():
            out = codec.forward([u.track for u in chunk], [u.phonemes for u in chunk])
            tot += np.array(prosody_losses([u.track for u in chunk], out.decoded).values()) * len(chunk)
    return tuple(float(x) for x in tot / len(utts))


def diffusion_samples(model: Denoiser, data: LatentSet, seed: int, L: int, omega: float, repeats: int = 1):
    """One guided sample per training condition (``repeats`` times), in standardised space."""
    rng = np.random.default_rng([seed, 0x5A3])
    outs, masks = [], []
    for _ in range(repeats):
        xi = rng.standard_normal(data.x0.shape)
        for s in range(0, len(data), 64):
            sl = np.arange(s, min(s + 64, len(data)))
            lm = None if model.cfg.K else data.mask[sl]
            outs.append(sample(model, xi[sl], data.cond.take(sl), omega, L, latent_mask=lm))
            masks.append(data.mask[sl])
    return np.concatenate(outs), np.concatenate(masks)


def sweep_point(label: str, spec: SweepSpec, train: Sequence[Utterance], heldout: Sequence[Utterance],
                seed: int, log: Callable[[str], None] | None = None) -> SweepResult:
    codec = ProsodyCodec(spec.codec, seed)
    CodecTrainer(codec, train, spec.codec_train, seed).run(spec.codec_train.steps)
    L = reconstruction_losses(codec, heldout)
    data = build_latent_set(codec, train)
    dcfg = replace(spec.diffusion, latent_dim=spec.codec.d_model, K=spec.codec.K)
    model = Denoiser(dcfg, seed)
    train_diffusion(model, data, spec.diffusion_train, seed)
    smp, smask = diffusion_samples(model, data, seed, spec.sample_steps, spec.sample_omega, spec.sample_repeats)
    if spec.codec.fixed_length:
        se = sigma_error(data.x0, smp)
    else:
        se = masked_sigma_error(data.x0, data.mask, smp, smask)
    res = SweepResult(label, *L, se)
    if log:
        log(f"{label}: L_prosody={res.L_prosody:.4f} sigma_error={se:.4f}")
    return res


def sweep_label(codebook: int | None, K: int) -> str:
    cb = "none" if not codebook else str(codebook)
    return f"cb={cb},K={K if K else 'none'}"


def bottleneck_sweep(spec: SweepSpec, train: Sequence[Utterance], heldout: Sequence[Utterance],
                     codebook_sizes: Sequence[int | None], K_values: Sequence[int] = (), seed: int = 0,
                     log: Callable[[str], None] | None = None) -> list[SweepResult]:
    """Codebook axis at the base K, then K axis at the base codebook size (``K == 0`` bypasses compression)."""
    out = []
    for cb in codebook_sizes:
        s = replace(spec, codec=replace(spec.codec, codes_per_book=cb or 0))
        out.append(sweep_point(sweep_label(cb, spec.codec.K), s, train, heldout, seed, log))
    for K in K_values:
        s = replace(spec, codec=replace(spec.codec, K=K))
        out.append(sweep_point(sweep_label(spec.codec.codes_per_book, K), s, train, heldout, seed, log))
    return out


# ---------------------------------------------------------------- expressiveness and similarity


def coefficient_of_variation(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    m = values.mean()
    if m == 0.0:
        raise ValueError("coefficient of variation undefined for zero mean")
    return float(values.std() / m)


def expressiveness_cv(tracks: Sequence[ProsodyTrack]) -> tuple[float, float, float]:
    if not tracks:
        raise ValueError("need at least one track")
    cp = float(np.mean([coefficient_of_variation(denormalize_pitch(t.pitch)) for t in tracks]))
    ce = float(np.mean([coefficient_of_variation(denormalize_energy(t.energy)) for t in tracks]))
    return cp, ce, cp + ce


def track_statistics(track: ProsodyTrack) -> dict[str, float]:
    p, e = denormalize_pitch(track.pitch), denormalize_energy(track.energy)
    return {"pitch_mean": float(p.mean()), "pitch_std": float(p.std()), "energy_mean": float(e.mean()),
            "energy_std": float(e.std()), "speaking_rate": float(track.durations.mean())}


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    den = np.sqrt((x * x).sum() * (y * y).sum())
    if den == 0.0:
        return 0.0
    return float(np.clip((x * y).sum() / den, -1.0, 1.0))


def prompt_similarity(prompts: Sequence[ProsodyTrack], synthesized: Sequence[ProsodyTrack]) -> dict[str, float]:
    """Pearson r across pairs for each statistic; a constant statistic yields 0."""
    if len(prompts) != len(synthesized):
        raise ValueError("prompts and synthesized must pair up")
    if len(prompts) < 3:
        raise ValueError("need at least 3 pairs")
    a = [track_statistics(t) for t in prompts]
    b = [track_statistics(t) for t in synthesized]
    return {k: pearson([s[k] for s in a], [s[k] for s in b]) for k in SIMILARITY_STATS}


def decoded_tracks(codec: ProsodyCodec, stats: LatentStats, latent: np.ndarray, cond: Conditions) -> list[ProsodyTrack]:
    with ad.no_grad():
        dec = decode_latent(codec, stats, latent, cond)
    out = []
    for i in range(latent.shape[0]):
        n = int(cond.text_mask[i].sum())
        T = int(dec.frame_mask[i].sum())
        out.append(ProsodyTrack(dec.pitch.data[i, :T].copy(), dec.energy.data[i, :T].copy(),
                                dec.up_durations[i, :n].copy()))
    return out


# ---------------------------------------------------------------- distillation comparison


@dataclass
class DistillRow:
    method: str
    sample_size: int
    init: str
    L_dur: float
    L_f0: float
    L_n: float

    def row(self) -> tuple:
        return (self.method, self.sample_size, self.init, self.L_dur, self.L_f0, self.L_n)


@dataclass
class DistillArtifacts:
    rows: list[DistillRow]
    students: dict[str, Denoiser]


def distill_comparison(codec: ProsodyCodec, teacher: Denoiser, data: LatentSet, heldout: Sequence[Utterance],
                       train: Sequence[Utterance], cfg: DistillConfig, seed: int = 0,
                       methods: Sequence[str] = ("with_init", "without_init", "pretrained", "cd", "add"),
                       sizes: Sequence[int] | None = None, pretrained: Denoiser | None = None,
                       log: Callable[[str], None] | None = None) -> DistillArtifacts:
    """Train each requested student and score it against the teacher on held-out conditions at the eval scale."""
    stats = data.stats
    cond = Conditions.from_utterances(heldout)
    K, d = teacher.cfg.K, teacher.cfg.latent_dim
    xi = np.random.default_rng([seed, 0xE7A1]).standard_normal((len(heldout), K, d))
    teacher_lat = sample(teacher, xi, cond, cfg.eval_omega, cfg.teacher_steps)
    sizes = [cfg.count] if sizes is None else list(sizes)
    dset = generate_distill_set(teacher, train, max(sizes), seed, cfg)
    if pretrained is None and ({"with_init", "pretrained"} & set(methods)):
        pretrained = Denoiser(teacher.cfg, seed + 1)
        pretrain_student(pretrained, data, cfg, seed)
    rows, students = [], {}

    def score(name, size, init, fn):
        r = DistillRow(name, size, init, *eval_distill(codec, stats, teacher_lat, fn, xi, cond, cfg.eval_omega))
        rows.append(r)
        if log:
            log(f"{name} size={size} init={init}: {r.L_dur:.4f} {r.L_f0:.4f} {r.L_n:.4f}")

    if "pretrained" in methods:
        score("pretrained", 0, "pretrained", pretrained_fn(pretrained))
    for size in sizes:
        sub = dset.subset(size)
        if "with_init" in methods:
            st = student_from_pretrained(pretrained)
            train_student(st, sub, codec, stats, cfg, seed)
            students[f"with_init_{size}"] = st
            score("simulation", size, "pretrained", one_step_fn(st))
        if "without_init" in methods:
            st = copy.deepcopy(teacher)
            train_student(st, sub, codec, stats, cfg, seed)
            students[f"without_init_{size}"] = st
            score("simulation", size, "teacher", one_step_fn(st))
    if "cd" in methods:
        tr = consistency_distill(teacher, data, cfg, seed)
        students["cd"] = tr.student
        score("cd", cfg.cd_steps * cfg.batch, "teacher", consistency_latent_fn(tr.student))
    if "add" in methods:
        tr = adversarial_distill(teacher, data, cfg, seed)
        students["add"] = tr.student
        score("add", cfg.add_steps * cfg.batch, "teacher", add_latent_fn(tr.student, cfg.add_student_steps))
    return DistillArtifacts(rows, students)


# ---------------------------------------------------------------- timing


@dataclass
class TimingReport:
    stages: dict[str, float]  # student path, seconds per batch
    teacher_total: float
    student_total: float

    @property
    def shares(self) -> dict[str, float]:
        tot = sum(self.stages.values())
        return {k: 100.0 * v / tot for k, v in self.stages.items()}

    @property
    def speedup(self) -> float:
        return self.teacher_total / self.student_total

    def rows(self) -> list[tuple]:
        out = [(k, v, self.shares[k]) for k, v in self.stages.items()]
        out.append(("teacher_total", self.teacher_total, float("nan")))
        out.append(("student_total", self.student_total, float("nan")))
        return out


def _best_time(fn: Callable[[], object], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def timing_report(codec: ProsodyCodec, stats: LatentStats, teacher: Denoiser, student: Denoiser,
                  utts: Sequence[Utterance], omega: float = 5.0, L: int = 100, seed: int = 0,
                  repeats: int = 3) -> TimingReport:
    """Minimum-of-repeats wall clock for each stage of the one-step path and for the teacher path."""
    K, d = teacher.cfg.K, teacher.cfg.latent_dim
    xi = np.random.default_rng(seed).standard_normal((len(utts), K, d))
    cond = Conditions.from_utterances(utts)

    def encode():
        c = Conditions.from_utterances(utts)
        with ad.no_grad():
            student.condition_features(c)

    fn = one_step_fn(student)
    lat = fn(xi, omega, cond)
    stages = {
        "condition_encoding": _best_time(encode, repeats),
        "student_forward": _best_time(lambda: fn(xi, omega, cond), repeats),
        "prosody_decode": _best_time(lambda: decoded_tracks(codec, stats, lat, cond), repeats),
    }
    teacher_lat = sample(teacher, xi, cond, omega, L)
    t_teacher = _best_time(lambda: sample(teacher, xi, cond, omega, L), 1)
    t_teacher += stages["condition_encoding"] + _best_time(lambda: decoded_tracks(codec, stats, teacher_lat, cond), 1)
    return TimingReport(stages, t_teacher, sum(stages.values()))
