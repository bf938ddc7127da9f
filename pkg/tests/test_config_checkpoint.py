from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvsd.checkpoint import Checkpoint, checkpoint_exists, load_checkpoint, save_checkpoint
from tvsd.codec import CodecConfig
from tvsd.config import SCHEMA, Config, ConfigError, describe, parse_lines, parse_list
from tvsd.training import CodecTrainConfig


def test_defaults_mirror_dataclasses():
    cfg = Config()
    assert cfg.codec() == CodecConfig()
    assert cfg.codec_train() == CodecTrainConfig()
    d = cfg.diffusion()
    assert (d.latent_dim, d.K) == (CodecConfig().d_model, CodecConfig().K)
    assert "codec.vocab" not in SCHEMA and "diffusion.K" not in SCHEMA


def test_load_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\ncodec.d_model = 16  # trailing\ncodec.adversarial = yes\n\ndistill.lr = 0.5\n")
    cfg = Config.load(p, ["codec.d_model=24"])
    assert cfg["codec.d_model"] == 24
    assert cfg["codec.adversarial"] is True
    assert cfg["distill.lr"] == 0.5
    assert cfg.diffusion().latent_dim == 24


@pytest.mark.parametrize("line", ["nokey", "codec.nope = 1", "codec.d_model = abc", "codec.adversarial = maybe"])
def test_bad_lines_rejected(line):
    with pytest.raises(ConfigError):
        Config.load(None, [line])


def test_dumps_roundtrip():
    cfg = Config.load(None, ["codec.K = 3", "bench.codebook_sizes = 8,none", "codec.adversarial = true"])
    again = Config.load(None, [ln for ln in cfg.dumps().splitlines()])
    assert again.snapshot() == cfg.snapshot()


def test_parse_list_and_describe():
    assert parse_list("64, 256,none") == [64, 256, None]
    assert parse_list("") == []
    assert parse_list("0.5,1", float) == [0.5, 1.0]
    text = describe()
    assert all(k in text for k in SCHEMA)
    assert len(parse_lines(["corpus.seed = 4"])) == 1


def _ckpt(rng):
    return Checkpoint({"a": rng.standard_normal((3, 2)), "b": np.array(7.0), "c": np.zeros((0, 4))},
                      {"codec.d_model": 8}, {"seed": 1, "rng": "{}"}, ["a"], {"step": 5})


def test_checkpoint_roundtrip_bitwise(tmp_path):
    ck = _ckpt(np.random.default_rng(0))
    path = save_checkpoint(tmp_path / "m", ck)
    assert path.suffix == ".json" and checkpoint_exists(tmp_path / "m")
    back = load_checkpoint(path)
    for k, v in ck.tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()
    assert (back.config, back.seeds, back.latent_stats, back.meta) == (ck.config, ck.seeds, ck.latent_stats, ck.meta)


def test_overwrite_removes_old_blob_and_detects_corruption(tmp_path):
    rng = np.random.default_rng(1)
    save_checkpoint(tmp_path / "m.json", _ckpt(rng))
    save_checkpoint(tmp_path / "m.json", _ckpt(rng))
    blobs = list(tmp_path.glob("m.*.bin"))
    assert len(blobs) == 1
    assert not list(tmp_path.glob("*.tmp"))
    raw = bytearray(blobs[0].read_bytes())
    raw[0] ^= 1
    blobs[0].write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.json")


def test_missing_and_foreign_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.json")
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=5), st.integers(0, 99))
def test_property_checkpoint_lossless(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {f"t{i}": rng.standard_normal(s) * 10.0 ** rng.integers(-300, 300) for i, s in enumerate(shapes)}
    d = tmp_path_factory.mktemp("ck")
    back = load_checkpoint(save_checkpoint(d / "p", Checkpoint(tensors)))
    for k, v in tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes()
