"""``tvsd`` command-line entry point.

Work directory layout (``--out``, default ``./tvsd-work``)::

    corpus/            generated corpus
    checkpoints/       codec, diffusion, student_pretrain, student (manifest + blob)
    logs/              one training log CSV per stage
    distill_set.bin    teacher samples used for distillation
    samples/, edit/, bench/
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bench import (
    DISTILL_COLUMNS,
    EVAL_COLUMNS,
    SWEEP_COLUMNS,
    TIMING_COLUMNS,
    SweepSpec,
    bottleneck_sweep,
    decoded_tracks,
    distill_comparison,
    expressiveness_cv,
    prompt_similarity,
    timing_report,
    write_csv,
)
from .checkpoint import Checkpoint, checkpoint_exists, load_checkpoint, save_checkpoint
from .codec import ProsodyCodec, codes_to_csv
from .config import Config, ConfigError, parse_list
from .corpus import Corpus, Utterance, corpus_checksum, gen_corpus, load_corpus, save_corpus
from .diffusion import (
    Conditions,
    Denoiser,
    DiffusionTrainer,
    LatentStats,
    build_latent_set,
    sample,
)
from .distill import (
    PretrainTrainer,
    StudentTrainer,
    generate_distill_set,
    load_distill_set,
    one_step_fn,
    save_distill_set,
    student_from_pretrained,
)
from .track import ProsodyTrack, mask_prosody
from .training import CodecTrainer, Trainer

LOG_COLUMNS = {
    "codec": CodecTrainer.log_columns,
    "diffusion": DiffusionTrainer.log_columns,
    "student-pretrain": ("step", "loss"),
    "distill": ("step", "loss"),
}
CKPT_NAMES = {"codec": "codec", "diffusion": "diffusion", "student-pretrain": "student_pretrain", "distill": "student"}


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- workspace


class Workspace:
    def __init__(self, root: str | Path, config: Config):
        self.root = Path(root)
        self.config = config

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    def ckpt(self, stage: str) -> Path:
        return self.root / "checkpoints" / f"{CKPT_NAMES[stage]}.json"

    def log_path(self, stage: str) -> Path:
        return self.root / "logs" / f"{CKPT_NAMES[stage]}.csv"

    @property
    def distill_set_path(self) -> Path:
        return self.root / "distill_set.bin"

    def require(self, stage: str) -> Checkpoint:
        p = self.ckpt(stage)
        if not checkpoint_exists(p):
            raise CommandError(f"missing {stage} checkpoint at {p}; run 'tvsd train {stage}' first")
        return load_checkpoint(p)

    def corpus(self) -> Corpus:
        if not (self.corpus_dir / "manifest.json").exists():
            raise CommandError(f"no corpus in {self.corpus_dir}; run 'tvsd gen-corpus' first")
        return load_corpus(self.corpus_dir)

    def split(self) -> tuple[list[Utterance], list[Utterance]]:
        return self.corpus().split(self.config["corpus.holdout_speakers"])

    def codec(self) -> ProsodyCodec:
        ck = self.require("codec")
        codec = ProsodyCodec(self.config.codec(), self.config["codec.seed"])
        codec.load_state_dict(_strip(ck.tensors, "codec."))
        return codec

    def teacher(self) -> tuple[Denoiser, LatentStats]:
        ck = self.require("diffusion")
        model = Denoiser(self.config.diffusion(), self.config["diffusion.seed"])
        model.load_state_dict(_strip(ck.tensors, "denoiser."))
        return model, LatentStats(ck.tensors["stats.mean"], ck.tensors["stats.std"])

    def student(self, stage: str = "distill") -> Denoiser:
        ck = self.require(stage)
        model = Denoiser(self.config.diffusion(), self.config["distill.seed"])
        model.load_state_dict(_strip(ck.tensors, "student."))
        return model


def _strip(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _save_trainer(ws: Workspace, stage: str, tr: Trainer, seed: int, extra: dict | None = None) -> Path:
    tensors = tr.state_tensors()
    stats = [k for k in tensors if k.startswith("stats.")]
    meta = {"stage": stage, "step": tr.step_count, "rng_state": tr.rng_state()}
    meta.update(extra or {})
    return save_checkpoint(ws.ckpt(stage), Checkpoint(tensors, ws.config.snapshot(), {"seed": seed}, stats, meta))


def _resume(ws: Workspace, stage: str, tr: Trainer) -> None:
    ck = load_checkpoint(ws.ckpt(stage))
    tr.load_state_tensors(ck.tensors)
    tr.set_rng_state(ck.meta["rng_state"])
    tr.step_count = int(ck.meta["step"])


class _CsvLog:
    def __init__(self, path: Path, columns: Sequence[str], append: bool):
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and path.exists())
        self.f = open(path, "w" if fresh else "a", newline="")
        self.w = csv.writer(self.f)
        self.columns = columns
        if fresh:
            self.w.writerow(columns)

    def __call__(self, row: dict[str, float]) -> None:
        self.w.writerow([repr(float(row.get(c, 0.0))) if c != "step" else int(row["step"]) for c in self.columns])

    def close(self) -> None:
        self.f.close()


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(ws: Workspace, force: bool = False) -> str:
    corpus = gen_corpus(ws.config.corpus())
    try:
        save_corpus(corpus, ws.corpus_dir, force=force)
    except FileExistsError as e:
        raise CommandError(str(e)) from None
    return corpus_checksum(ws.corpus_dir)


def _build_trainer(ws: Workspace, stage: str) -> tuple[Trainer, int, int]:
    cfg = ws.config
    train, _ = ws.split()
    if stage == "codec":
        seed = cfg["codec.seed"]
        tcfg = cfg.codec_train()
        return CodecTrainer(ProsodyCodec(cfg.codec(), seed), train, tcfg, seed), tcfg.steps, seed
    codec = ws.codec()
    if stage == "diffusion":
        seed = cfg["diffusion.seed"]
        data = build_latent_set(codec, train)
        tcfg = cfg.diffusion_train()
        return DiffusionTrainer(Denoiser(cfg.diffusion(), seed), data, tcfg, seed), tcfg.steps, seed
    teacher, stats = ws.teacher()
    dcfg = cfg.distill()
    seed = cfg["distill.seed"]
    if stage == "student-pretrain":
        data = build_latent_set(codec, train, stats)
        tr = PretrainTrainer(Denoiser(cfg.diffusion(), seed + 1), data, dcfg, seed)
        return tr, dcfg.pretrain_steps, seed
    if stage == "distill":
        student = student_from_pretrained(ws.student("student-pretrain"))
        dset = _distill_set(ws, teacher, train)
        tr = StudentTrainer(student, dset, codec, stats, dcfg, seed)
        return tr, dcfg.epochs * tr.steps_per_epoch, seed
    raise CommandError(f"unknown training stage {stage!r}")


def _distill_set(ws: Workspace, teacher: Denoiser, train: Sequence[Utterance]):
    dcfg = ws.config.distill()
    p = ws.distill_set_path
    if p.exists():
        ds = load_distill_set(p)
        if len(ds) == dcfg.count:
            return ds
    ds = generate_distill_set(teacher, train, dcfg.count, ws.config["distill.seed"], dcfg)
    save_distill_set(ds, p)
    return ds


def cmd_train(ws: Workspace, stage: str, resume: bool = False, echo=None) -> Path:
    tr, total, seed = _build_trainer(ws, stage)
    if resume and checkpoint_exists(ws.ckpt(stage)):
        _resume(ws, stage, tr)
    log = _CsvLog(ws.log_path(stage), LOG_COLUMNS[stage], append=resume)
    try:
        remaining = max(total - tr.step_count, 0)
        tr.run(remaining, log)
    finally:
        log.close()
    path = _save_trainer(ws, stage, tr, seed)
    if echo and tr.history:
        echo(f"{stage}: step {tr.step_count} loss {tr.history[-1]['loss']:.5f} -> {path}")
    return path


def _eval_utts(ws: Workspace, n: int | None = None) -> list[Utterance]:
    _, held = ws.split()
    if not held:
        raise CommandError("no held-out speakers; set corpus.holdout_speakers >= 1")
    return held[: n or ws.config["bench.eval_utts"]]


def write_track_csv(track: ProsodyTrack, path: Path) -> None:
    rows = [(i, int(p), repr(float(a)), repr(float(b)))
            for i, (p, a, b) in enumerate(zip(track.frame_to_phoneme(), track.pitch, track.energy))]
    write_csv(path, ("frame", "phoneme", "pitch", "energy"), rows)


def cmd_sample(ws: Workspace, use_student: bool, guidance: float, steps: int, seed: int, count: int) -> Path:
    codec = ws.codec()
    teacher, stats = ws.teacher()
    utts = _eval_utts(ws, count)
    cond = Conditions.from_utterances(utts)
    K, d = teacher.cfg.K, teacher.cfg.latent_dim
    xi = np.random.default_rng(seed).standard_normal((len(utts), K, d))
    if use_student:
        lat = one_step_fn(ws.student())(xi, guidance, cond)
        kind = "student"
    else:
        lat = sample(teacher, xi, cond, guidance, steps)
        kind = "teacher"
    tracks = decoded_tracks(codec, stats, lat, cond)
    out = ws.root / "samples" / kind
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for u, t in zip(utts, tracks):
        write_track_csv(t, out / f"utt_{u.utt_id:05d}.csv")
        rows.append((u.utt_id, t.num_phonemes, t.num_frames, repr(float(t.durations.mean())),
                     repr(float(t.pitch.mean())), repr(float(t.pitch.std()))))
    write_csv(out / "summary.csv", ("utt_id", "num_phonemes", "num_frames", "mean_duration", "pitch_mean",
                                    "pitch_std"), rows)
    latent = stats.destandardize(lat)
    save_checkpoint(out / "latents.json", Checkpoint({"latent": latent, "xi": xi}, ws.config.snapshot(),
                                                     {"seed": seed}, [], {"kind": kind, "guidance": guidance,
                                                                          "steps": 1 if use_student else steps}))
    if codec.rvq is not None:
        codes, _, _ = codec.rvq.assign(latent @ codec.rvq.down.data)
        codes_to_csv(codes, out / "codes.csv")
    return out


def edit_prosody(codec: ProsodyCodec, utt: Utterance, span: tuple[int, int]) -> tuple[ProsodyTrack, ProsodyTrack]:
    """Mask ``span``, re-encode and decode, then splice: returns (edited track, raw decoder track).

    Unmasked phonemes keep their original durations and frame values exactly; the masked
    span takes the decoder's rounded durations and its frame-level predictions.
    """
    track = utt.track
    masked = mask_prosody(track, span)
    start, stop = span
    if start == stop:
        return ProsodyTrack(track.pitch.copy(), track.energy.copy(), track.durations.copy()), masked
    with ad.no_grad():
        h, m = codec.encode([masked])
        q = codec.quantize(h, m)
        style = h if q is None else q.h_q
        first = codec.decode(style, m, [utt.phonemes])
        dur = track.durations.copy()
        dur[start:stop] = first.up_durations[0, start:stop]
        dec = codec.decode(style, m, [utt.phonemes], dur[None, :])
    new = ProsodyTrack(dec.pitch.data[0].copy(), dec.energy.data[0].copy(), dur)
    ob, nb = track.boundaries(), new.boundaries()
    pitch, energy = new.pitch.copy(), new.energy.copy()
    for i in range(track.num_phonemes):
        if start <= i < stop:
            continue
        pitch[nb[i] : nb[i + 1]] = track.pitch[ob[i] : ob[i + 1]]
        energy[nb[i] : nb[i + 1]] = track.energy[ob[i] : ob[i + 1]]
    fm = np.zeros(new.num_frames, bool)
    fm[nb[start] : nb[stop]] = True
    pm = np.zeros(new.num_phonemes, bool)
    pm[start:stop] = True
    return ProsodyTrack(pitch, energy, dur, fm, pm), new


def cmd_edit(ws: Workspace, utt_id: int, span: tuple[int, int]) -> Path:
    codec = ws.codec()
    corpus = ws.corpus()
    match = [u for u in corpus.utterances if u.utt_id == utt_id]
    if not match:
        raise CommandError(f"no utterance {utt_id}")
    utt = match[0]
    if not 0 <= span[0] <= span[1] <= utt.track.num_phonemes:
        raise CommandError(f"span {span} outside [0, {utt.track.num_phonemes}]")
    edited, _ = edit_prosody(codec, utt, span)
    out = ws.root / "edit"
    out.mkdir(parents=True, exist_ok=True)
    write_track_csv(utt.track, out / f"utt_{utt_id:05d}_before.csv")
    write_track_csv(edited, out / f"utt_{utt_id:05d}_after.csv")
    return out


def cmd_bench(ws: Workspace, which: str, echo=None) -> Path:
    cfg = ws.config
    out = ws.root / "bench"
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["bench.seed"]
    if which == "sweep":
        train, held = ws.split()
        spec = SweepSpec(
            cfg.codec(), cfg.diffusion(),
            dataclasses.replace(cfg.codec_train(), steps=cfg["bench.codec_steps"]),
            dataclasses.replace(cfg.diffusion_train(), steps=cfg["bench.diffusion_steps"]),
            cfg["bench.sample_steps"], cfg["bench.sample_omega"], cfg["bench.sample_repeats"],
        )
        res = bottleneck_sweep(spec, train, held or train, parse_list(cfg["bench.codebook_sizes"]),
                               parse_list(cfg["bench.K_values"]), seed, echo)
        path = out / "sweep.csv"
        write_csv(path, SWEEP_COLUMNS, [r.row() for r in res])
        return path
    if which == "distill":
        train, _ = ws.split()
        codec = ws.codec()
        teacher, stats = ws.teacher()
        data = build_latent_set(codec, train, stats)
        pre = ws.student("student-pretrain") if checkpoint_exists(ws.ckpt("student-pretrain")) else None
        sizes = parse_list(cfg["distill.sizes"]) or None
        methods = [m.strip() for m in cfg["distill.methods"].split(",") if m.strip()]
        art = distill_comparison(codec, teacher, data, _eval_utts(ws), train, cfg.distill(), seed, methods, sizes,
                                 pre, echo)
        path = out / "distill.csv"
        write_csv(path, DISTILL_COLUMNS, [r.row() for r in art.rows])
        return path
    if which == "eval":
        codec = ws.codec()
        teacher, stats = ws.teacher()
        utts = _eval_utts(ws)
        cond = Conditions.from_utterances(utts)
        xi = np.random.default_rng([seed, 0xE7A1]).standard_normal((len(utts), teacher.cfg.K, teacher.cfg.latent_dim))
        dcfg = cfg.distill()
        rows = []
        cv = expressiveness_cv([u.track for u in utts])
        rows += [("ground_truth.cv_pitch", cv[0]), ("ground_truth.cv_energy", cv[1]), ("ground_truth.cv_sum", cv[2])]
        paths = {"teacher": sample(teacher, xi, cond, dcfg.eval_omega, dcfg.teacher_steps)}
        if checkpoint_exists(ws.ckpt("distill")):
            paths["student"] = one_step_fn(ws.student())(xi, dcfg.eval_omega, cond)
        for name, lat in paths.items():
            tracks = decoded_tracks(codec, stats, lat, cond)
            cv = expressiveness_cv(tracks)
            rows += [(f"{name}.cv_pitch", cv[0]), (f"{name}.cv_energy", cv[1]), (f"{name}.cv_sum", cv[2])]
            for k, r in prompt_similarity([u.prompt for u in utts], tracks).items():
                rows.append((f"{name}.r_{k}", r))
        path = out / "eval.csv"
        write_csv(path, EVAL_COLUMNS, rows)
        return path
    if which == "timing":
        codec = ws.codec()
        teacher, stats = ws.teacher()
        rep = timing_report(codec, stats, teacher, ws.student(), _eval_utts(ws), cfg.distill().eval_omega,
                            cfg.distill().teacher_steps, seed, cfg["bench.timing_repeats"])
        path = out / "timing.csv"
        write_csv(path, TIMING_COLUMNS, rep.rows())
        if echo:
            echo(f"speedup {rep.speedup:.1f}x")
        return path
    raise CommandError(f"unknown bench {which!r}")


# ---------------------------------------------------------------- argument parsing


def _span(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError("span must look like START:STOP") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="override the seed of the stage being run")
    common.add_argument("--out", default="tvsd-work", help="work directory")

    p = argparse.ArgumentParser(prog="tvsd", description="Prosody codec, style diffusion and distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic corpus")
    g.add_argument("--force", action="store_true", help="overwrite an existing corpus")

    t = sub.add_parser("train", parents=[common], help="train one pipeline stage")
    t.add_argument("stage", choices=list(CKPT_NAMES))
    t.add_argument("--resume", action="store_true", help="continue from this stage's checkpoint")

    s = sub.add_parser("sample", parents=[common], help="sample prosody for held-out utterances")
    who = s.add_mutually_exclusive_group()
    who.add_argument("--teacher", action="store_true", help="guided DDIM teacher (default)")
    who.add_argument("--student", action="store_true", help="one-step distilled student")
    s.add_argument("--guidance", type=float, default=5.0)
    s.add_argument("--steps", type=int, default=100, help="DDIM steps (teacher only)")
    s.add_argument("--count", type=int, default=8)

    e = sub.add_parser("edit", parents=[common], help="mask a phoneme span and regenerate it")
    e.add_argument("--utt", type=int, required=True)
    e.add_argument("--span", type=_span, required=True, help="START:STOP phoneme indices")

    b = sub.add_parser("bench", parents=[common], help="run a benchmark and write its CSV")
    b.add_argument("which", choices=["sweep", "distill", "eval", "timing"])

    sub.add_parser("config", parents=[common], help="print the resolved configuration")
    return p


_SEED_KEY = {"gen-corpus": "corpus.seed", "bench": "bench.seed"}
_STAGE_SEED = {"codec": "codec.seed", "diffusion": "diffusion.seed", "student-pretrain": "distill.seed",
               "distill": "distill.seed"}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = Config.load(args.config, args.set)
        if args.seed is not None:
            key = _SEED_KEY.get(args.command) or _STAGE_SEED.get(getattr(args, "stage", ""))
            if key:
                config.set(key, args.seed)
        ws = Workspace(args.out, config)
        if args.command == "gen-corpus":
            print(cmd_gen_corpus(ws, args.force))
        elif args.command == "train":
            cmd_train(ws, args.stage, args.resume, print)
        elif args.command == "sample":
            seed = args.seed if args.seed is not None else 0
            print(cmd_sample(ws, args.student, args.guidance, args.steps, seed, args.count))
        elif args.command == "edit":
            print(cmd_edit(ws, args.utt, args.span))
        elif args.command == "bench":
            print(cmd_bench(ws, args.which, print))
        elif args.command == "config":
            sys.stdout.write(config.dumps())
    except (CommandError, ConfigError, ad.NonFiniteError) as e:
        print(f"tvsd: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"tvsd: I/O error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
