from __future__ import annotations

import hashlib

import pytest

from tvsd.bench import DISTILL_COLUMNS, SWEEP_COLUMNS, read_csv
from tvsd.checkpoint import load_checkpoint
from tvsd.cli import Workspace, build_parser, cmd_train, main
from tvsd.config import Config

from tiny import TINY_CONFIG

# default-config corpus checksum, computed once when this fixture was created
DEFAULT_CORPUS_SHA = "cfccd466c4fdb4059be3caf9cbc3a5c0b87c5be10b2c2c1d098596f1802752ce"


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY_CONFIG)
    return p


def files_digest(root) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(cfg_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("work")
    assert run("gen-corpus", "--config", cfg_file, "--out", out) == 0
    for stage in ("codec", "diffusion", "student-pretrain", "distill"):
        assert run("train", stage, "--config", cfg_file, "--out", out) == 0
    return out


def test_parser_defaults():
    a = build_parser().parse_args(["sample"])
    assert (a.guidance, a.steps, a.teacher, a.student) == (5.0, 100, False, False)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["edit", "--utt", "1", "--span", "3"])


def test_default_corpus_checksum_and_overwrite_guard(tmp_path, capsys):
    assert run("gen-corpus", "--out", tmp_path) == 0
    assert capsys.readouterr().out.strip() == DEFAULT_CORPUS_SHA
    assert run("gen-corpus", "--out", tmp_path) == 2
    assert run("gen-corpus", "--out", tmp_path, "--force", "--seed", "5") == 0
    assert capsys.readouterr().out.strip() != DEFAULT_CORPUS_SHA


def test_config_errors_and_printing(tmp_path, capsys):
    assert run("config", "--set", "codec.nope=1") == 2
    assert run("config", "--set", "codec.K=5") == 0
    assert "codec.K = 5" in capsys.readouterr().out
    bad = tmp_path / "bad.cfg"
    bad.write_text("codec.d_model = x\n")
    assert run("config", "--config", bad) == 2
    assert run("config", "--config", tmp_path / "missing.cfg") == 3


def test_stage_dependencies(cfg_file, tmp_path):
    assert run("train", "codec", "--config", cfg_file, "--out", tmp_path) == 2
    assert run("gen-corpus", "--config", cfg_file, "--out", tmp_path) == 0
    assert run("train", "diffusion", "--config", cfg_file, "--out", tmp_path) == 2
    assert run("train", "codec", "--config", cfg_file, "--out", tmp_path) == 0
    assert run("train", "distill", "--config", cfg_file, "--out", tmp_path) == 2
    assert run("sample", "--config", cfg_file, "--out", tmp_path) == 2


def test_pipeline_outputs_and_logs(pipeline):
    for name in ("codec", "diffusion", "student_pretrain", "student"):
        ck = load_checkpoint(pipeline / "checkpoints" / f"{name}.json")
        assert ck.meta["step"] > 0
        assert (pipeline / "logs" / f"{name}.csv").exists()
    rows = read_csv(pipeline / "logs" / "codec.csv")
    assert list(rows[0])[:5] == ["step", "loss", "L_dur", "L_f0", "L_n"]
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert load_checkpoint(pipeline / "checkpoints" / "diffusion.json").latent_stats == ["stats.mean", "stats.std"]
    assert (pipeline / "distill_set.bin").exists()


def test_sampling_is_reproducible(pipeline, cfg_file):
    assert run("sample", "--config", cfg_file, "--out", pipeline, "--steps", "3", "--seed", "4", "--count", "2") == 0
    first = files_digest(pipeline / "samples" / "teacher")
    assert "summary.csv" in first and "codes.csv" in first
    assert run("sample", "--config", cfg_file, "--out", pipeline, "--steps", "3", "--seed", "4", "--count", "2") == 0
    assert files_digest(pipeline / "samples" / "teacher") == first
    assert run("sample", "--config", cfg_file, "--out", pipeline, "--student", "--steps", "7", "--seed", "4") == 0
    a = files_digest(pipeline / "samples" / "student")
    assert run("sample", "--config", cfg_file, "--out", pipeline, "--student", "--steps", "99", "--seed", "4") == 0
    assert files_digest(pipeline / "samples" / "student") == a
    ck = load_checkpoint(pipeline / "samples" / "student" / "latents.json")
    assert ck.meta["steps"] == 1


def test_edit_command(pipeline, cfg_file):
    ws = Workspace(pipeline, Config.load(cfg_file))
    u = ws.corpus().utterances[0]
    n = u.track.num_phonemes
    assert run("edit", "--config", cfg_file, "--out", pipeline, "--utt", u.utt_id, "--span", f"0:{n + 1}") == 2
    assert run("edit", "--config", cfg_file, "--out", pipeline, "--utt", 999, "--span", "0:1") == 2
    assert run("edit", "--config", cfg_file, "--out", pipeline, "--utt", u.utt_id, "--span", "0:0") == 0
    d = pipeline / "edit"
    before = (d / f"utt_{u.utt_id:05d}_before.csv").read_bytes()
    assert (d / f"utt_{u.utt_id:05d}_after.csv").read_bytes() == before


def test_bench_commands(pipeline, cfg_file):
    for which in ("eval", "timing", "distill", "sweep"):
        assert run("bench", which, "--config", cfg_file, "--out", pipeline) == 0
    b = pipeline / "bench"
    sweep = read_csv(b / "sweep.csv")
    assert [r["config"] for r in sweep] == ["cb=8,K=3", "cb=none,K=3"]
    assert list(sweep[0]) == list(SWEEP_COLUMNS)
    distill = read_csv(b / "distill.csv")
    assert list(distill[0]) == list(DISTILL_COLUMNS)
    assert {r["method"] for r in distill} == {"pretrained", "simulation", "cd", "add"}
    assert {r["init"] for r in distill if r["method"] == "simulation"} == {"pretrained", "teacher"}
    names = [r["metric"] for r in read_csv(b / "eval.csv")]
    assert "teacher.cv_pitch" in names and "student.r_pitch_mean" in names
    stages = [r["stage"] for r in read_csv(b / "timing.csv")]
    assert stages[:3] == ["condition_encoding", "student_forward", "prosody_decode"]


def test_bench_honours_seed(pipeline, cfg_file):
    def eval_with(seed):
        assert run("bench", "eval", "--config", cfg_file, "--out", pipeline, "--seed", seed) == 0
        return (pipeline / "bench" / "eval.csv").read_bytes()

    assert eval_with(1) == eval_with(1)
    assert eval_with(1) != eval_with(2)


def test_rerun_is_bit_identical(pipeline, cfg_file, tmp_path):
    assert run("gen-corpus", "--config", cfg_file, "--out", tmp_path) == 0
    assert run("train", "codec", "--config", cfg_file, "--out", tmp_path) == 0
    assert files_digest(tmp_path / "corpus") == files_digest(pipeline / "corpus")
    a = load_checkpoint(tmp_path / "checkpoints" / "codec.json")
    b = load_checkpoint(pipeline / "checkpoints" / "codec.json")
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in b.tensors)


@pytest.mark.parametrize("stage", ["codec", "diffusion", "student-pretrain", "distill"])
def test_resume_matches_uninterrupted(pipeline, cfg_file, tmp_path, stage):
    base = Config.load(cfg_file)
    key = {"codec": "codec.steps", "diffusion": "diffusion.steps", "student-pretrain": "distill.pretrain_steps",
           "distill": "distill.epochs"}[stage]
    full, half = (10, 5) if stage != "distill" else (4, 2)
    ws_full = Workspace(tmp_path / "full", base)
    ws_half = Workspace(tmp_path / "half", base)
    for ws in (ws_full, ws_half):
        (ws.root).mkdir()
        for sub in ("corpus", "checkpoints"):
            src = pipeline / sub
            for p in src.rglob("*"):
                if p.is_file():
                    dst = ws.root / sub / p.relative_to(src)
                    dst.parent.mkdir(parents=True, exist_ok=True)
                    dst.write_bytes(p.read_bytes())
        if (pipeline / "distill_set.bin").exists():
            (ws.root / "distill_set.bin").write_bytes((pipeline / "distill_set.bin").read_bytes())
    base.set(key, full)
    cmd_train(ws_full, stage)
    ws_half.config = Config.load(cfg_file, [f"{key}={half}"])
    cmd_train(ws_half, stage)
    ws_half.config = Config.load(cfg_file, [f"{key}={full}"])
    cmd_train(ws_half, stage, resume=True)
    name = {"student-pretrain": "student_pretrain", "distill": "student"}.get(stage, stage)
    a = read_csv(ws_full.root / "logs" / f"{name}.csv")
    b = read_csv(ws_half.root / "logs" / f"{name}.csv")
    assert a == b and len(a) >= 4
    ca = load_checkpoint(ws_full.ckpt(stage))
    cb = load_checkpoint(ws_half.ckpt(stage))
    assert all(ca.tensors[k].tobytes() == cb.tensors[k].tobytes() for k in ca.tensors)
