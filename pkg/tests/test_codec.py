from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rvq_grad_check

from tvsd.autodiff import Tensor
from tvsd.codec import (
    LAMBDA_F0,
    LAMBDA_N,
    CodecConfig,
    DecoderOutput,
    ProsodyCodec,
    ResidualVQ,
    TrackBatch,
    codes_from_csv,
    codes_to_csv,
    duration_upsample,
    prosody_losses,
    sample_mask_span,
    upsample_index,
)
from tvsd.corpus import CorpusConfig, gen_corpus
from tvsd.track import ProsodyTrack, mask_prosody, renormalize_prosody
from tvsd.training import CodecTrainConfig, CodecTrainer

TINY = CodecConfig(d_model=8, heads=2, ff_dim=16, kernel=3, wide_kernel=5, enc_blocks=2, dec_blocks=1, K=4,
                   codes_per_book=16, max_phonemes=128)


def random_track(rng, n):
    d = rng.integers(1, 5, n)
    T = int(d.sum())
    return ProsodyTrack(rng.standard_normal(T), rng.standard_normal(T), d)


@pytest.fixture(scope="module")
def utts():
    return gen_corpus(CorpusConfig(seed=0, num_speakers=2, utts_per_speaker=3, max_phonemes=12)).utterances


def test_duration_upsample_examples():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = duration_upsample([2, 1, 3], table).data
    np.testing.assert_array_equal(out, table.data[[0, 0, 1, 2, 2, 2]])
    np.testing.assert_array_equal(duration_upsample([1], table).data, table.data[:1])
    with pytest.raises(ValueError):
        duration_upsample([1, 0], table)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=30))
def test_property_upsample_frames(durs):
    table = Tensor(np.random.default_rng(0).standard_normal((30, 2)))
    assert duration_upsample(durs, table).shape[0] == sum(durs)
    idx, off, m = upsample_index(np.array([durs]), np.ones((1, len(durs)), bool))
    assert m.sum() == sum(durs)
    np.testing.assert_array_equal(idx[0], np.repeat(np.arange(len(durs)), durs))
    assert (off[0] < np.repeat(durs, durs)).all()


def test_encode_fixed_length_and_deterministic():
    codec = ProsodyCodec(TINY, seed=0)
    rng = np.random.default_rng(0)
    tracks = [random_track(rng, 5), random_track(rng, 60)]
    h, m = codec.encode(tracks)
    assert h.shape == (2, TINY.K, TINY.d_model) and m.all()
    h2, _ = codec.encode(tracks)
    np.testing.assert_array_equal(h.data, h2.data)
    # batched rows equal single-row encodes
    h1, _ = codec.encode(tracks[1:])
    np.testing.assert_allclose(h1.data[0], h.data[1], atol=1e-12)


def test_fully_masked_input_gives_finite_latent():
    codec = ProsodyCodec(TINY, seed=0)
    t = random_track(np.random.default_rng(1), 6)
    h, _ = codec.encode([mask_prosody(t, (0, 6))])
    assert np.isfinite(h.data).all()


def test_frame_level_codec_without_quantiser():
    cfg = dataclasses.replace(TINY, K=0, codes_per_book=0)
    codec = ProsodyCodec(cfg, seed=0)
    assert codec.rvq is None
    t = random_track(np.random.default_rng(2), 4)
    h, m = codec.encode([t])
    assert h.shape == (1, t.num_frames, cfg.d_model) and m.all()


def test_codebook_size_leaves_encoder_and_decoder_init_unchanged():
    a = ProsodyCodec(TINY, seed=5)
    b = ProsodyCodec(dataclasses.replace(TINY, codes_per_book=64), seed=5)
    np.testing.assert_array_equal(a.encoder.in_proj.weight.data, b.encoder.in_proj.weight.data)
    np.testing.assert_array_equal(a.decoder.dur_head.weight.data, b.decoder.dur_head.weight.data)


def make_rvq(seed=0, stages=9, codes=32, d=8):
    return ResidualVQ(np.random.default_rng(seed), d, stages, codes, 4)


def test_rvq_zero_code_pinned_and_zero_codes_give_zero():
    rvq = make_rvq()
    np.testing.assert_array_equal(rvq.books.data[:, 0], 0.0)
    np.testing.assert_array_equal(rvq.dequantize(np.zeros((3, 9), int)), 0.0)
    assert rvq.dequantize(np.zeros((5, 9), int)).shape == (5, 8)


def test_rvq_residual_norms_nonincreasing_and_roundtrip():
    rvq = make_rvq()
    h = Tensor(np.random.default_rng(1).standard_normal((50, 8)))
    q = rvq(h)
    assert (np.diff(q.residual_norms, axis=-1) <= 1e-12).all()
    assert q.codes.shape == (50, 9)
    assert rvq.dequantize(q.codes).tobytes() == q.h_q.data.tobytes()


def test_rvq_exact_stage_one_code_has_zero_residual():
    rvq = make_rvq()
    code = rvq.books.data[0, 7]
    codes, norms, _ = rvq.assign(code[None])
    assert codes[0, 0] == 7
    assert norms[0, 1] == 0.0
    np.testing.assert_array_equal(codes[0, 1:], 0)


def test_rvq_errors():
    rvq = make_rvq()
    with pytest.raises(IndexError):
        rvq.dequantize(np.full((1, 9), 32))
    with pytest.raises(ValueError):
        rvq.dequantize(np.zeros((1, 3), int))
    with pytest.raises(ValueError):
        ResidualVQ(np.random.default_rng(0), 8, 2, 0, 4)


def test_rvq_gradients_with_fixed_assignment():
    rvq = make_rvq(stages=3, codes=5, d=6)
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    codes = rvq(h).codes
    rep, agree = rvq_grad_check(rvq, h, codes, Tensor(rng.standard_normal((4, 6))))
    assert rep.passed, rep.max_rel_error
    assert agree < 1e-12


def test_usage_reseeds_dead_codes_from_stage_residuals():
    rvq = make_rvq(stages=2, codes=4, d=8)
    z = np.random.default_rng(0).standard_normal((6, 4))
    codes = np.zeros((6, 2), int)
    residuals = [z, z + 100.0]
    assert rvq.update_usage(codes, residuals, None, dead_after=2, rng=np.random.default_rng(0)) == 0
    rvq.update_usage(codes, residuals, None, 2, np.random.default_rng(0))
    n = rvq.update_usage(codes, residuals, None, 2, np.random.default_rng(0))
    assert n == 6  # codes 1..3 in both stages, never entry 0
    np.testing.assert_array_equal(rvq.books.data[:, 0], 0.0)
    assert (rvq.books.data[1, 1:] > 50).all()
    assert np.isin(rvq.books.data[0, 1:], z).all()


def test_decode_shapes_and_determinism(utts):
    codec = ProsodyCodec(TINY, seed=0)
    out = codec.forward([u.track for u in utts[:2]], [u.phonemes for u in utts[:2]])
    tb = TrackBatch.from_tracks([u.track for u in utts[:2]])
    assert out.decoded.durations.shape == tb.durations.shape
    assert out.decoded.pitch.shape == tb.pitch.shape
    assert (out.decoded.durations.data > 0).all()
    again = codec.forward([u.track for u in utts[:2]], [u.phonemes for u in utts[:2]])
    np.testing.assert_array_equal(out.decoded.pitch.data, again.decoded.pitch.data)
    with pytest.raises(ValueError):
        codec.decode(out.style.data, out.latent_mask, np.zeros((2, 0), int))


def test_decode_inference_uses_rounded_durations(utts):
    codec = ProsodyCodec(TINY, seed=0)
    h, m = codec.style([utts[0].track])
    dec = codec.decode(h, m, [utts[0].phonemes])
    expect = np.maximum(np.rint(dec.durations.data), 1)
    np.testing.assert_array_equal(dec.up_durations, expect)
    assert dec.pitch.shape[1] == expect.sum()


def _as_pred(track, pitch_shift=0.0):
    T = track.num_frames
    return DecoderOutput(Tensor(track.durations[None].astype(float)), Tensor(track.pitch[None] + pitch_shift),
                         Tensor(track.energy[None]), np.ones((1, track.num_phonemes), bool),
                         np.ones((1, T), bool), track.durations[None], [])


def test_prosody_losses_examples():
    t = random_track(np.random.default_rng(4), 7)
    assert prosody_losses([t], _as_pred(t)).values() == (0.0, 0.0, 0.0)
    assert prosody_losses([t], _as_pred(t, 0.3)).f0.item() == pytest.approx(0.3)
    assert (LAMBDA_F0, LAMBDA_N) == (0.1, 1.0)
    other = random_track(np.random.default_rng(5), 3)
    with pytest.raises(ValueError):
        prosody_losses([other], _as_pred(t))


def test_mask_span_sampling_bounds():
    rng = np.random.default_rng(0)
    spans = [sample_mask_span(10, rng, 0.5) for _ in range(400)]
    empty = sum(s == (0, 0) for s in spans)
    assert 150 < empty < 250
    for a, b in spans:
        assert 0 <= a <= b <= 10


def test_mask_empty_and_full_span():
    t = random_track(np.random.default_rng(6), 5)
    e = mask_prosody(t, (0, 0))
    np.testing.assert_array_equal(e.pitch, t.pitch)
    assert not e.frame_mask.any()
    f = mask_prosody(t, (0, 5))
    assert f.frame_mask.all() and (f.pitch == 0).all()


def test_renormalize_examples():
    rng = np.random.default_rng(7)
    t = random_track(rng, 5)
    same = renormalize_prosody(t, t)
    np.testing.assert_allclose(same.pitch, t.pitch, atol=1e-12)
    shifted = ProsodyTrack(t.pitch + 1.0, t.energy, t.durations)
    p = random_track(rng, 3)
    np.testing.assert_allclose(renormalize_prosody(shifted, p).pitch, renormalize_prosody(t, p).pitch, atol=1e-12)


def test_codes_csv_roundtrip(tmp_path):
    codes = np.random.default_rng(0).integers(0, 256, (4, 9))
    codes_to_csv(codes, tmp_path / "c.csv")
    np.testing.assert_array_equal(codes_from_csv(tmp_path / "c.csv"), codes)


def test_codec_training_reduces_loss(utts):
    codec = ProsodyCodec(TINY, seed=0)
    tr = CodecTrainer(codec, utts, CodecTrainConfig(steps=40, batch=4, lr=3e-3), seed=0)
    hist = tr.run(40)
    first = np.mean([r["loss"] for r in hist[:5]])
    last = np.mean([r["loss"] for r in hist[-5:]])
    assert last < first
    np.testing.assert_array_equal(codec.rvq.books.data[:, 0], 0.0)


def test_adversarial_codec_step_runs(utts):
    codec = ProsodyCodec(TINY, seed=0)
    cfg = CodecTrainConfig(batch=2, lr=1e-3, adversarial=True, adv_warmup=1, disc_blocks=1)
    tr = CodecTrainer(codec, utts, cfg, seed=0)
    hist = tr.run(3)
    assert hist[0]["adv_d"] == 0.0 and hist[-1]["adv_d"] > 0.0
