from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvsd import autodiff as ad
from tvsd.adversarial import MultimodalDiscriminator, disc_forward, feature_matching, lsgan_losses
from tvsd.autodiff import Tensor
from tvsd.codec import CodecConfig, ProsodyCodec
from tvsd.corpus import CorpusConfig, gen_corpus
from tvsd.nn import ConformerConfig, lengths_to_mask
from tvsd.training import CodecTrainConfig, CodecTrainer

CC = ConformerConfig(8, 2, 4, 3, 16)


def make_disc(seed=0, sample_dim=2):
    return MultimodalDiscriminator(np.random.default_rng(seed), sample_dim, [6, 5], CC, blocks=1)


def conditions(rng, B=2):
    return [(Tensor(rng.standard_normal((B, 3, 6))), np.ones((B, 3), bool)),
            (Tensor(rng.standard_normal((B, 4, 5))), lengths_to_mask([4, 2], 4))]


def test_output_length_is_sample_plus_conditions_and_deterministic():
    rng = np.random.default_rng(0)
    disc = make_disc()
    sample = Tensor(rng.standard_normal((2, 7, 2)))
    conds = conditions(rng)
    logits, feats = disc_forward(disc, sample, np.ones((2, 7), bool), conds)
    assert logits.shape == (2, 7 + 3 + 4)
    assert len(feats) == 1
    again, _ = disc_forward(disc, sample, np.ones((2, 7), bool), conds)
    np.testing.assert_array_equal(logits.data, again.data)


def test_shape_errors():
    rng = np.random.default_rng(0)
    disc = make_disc()
    with pytest.raises(ValueError):
        disc(Tensor(np.zeros((2, 7, 3))), np.ones((2, 7), bool), conditions(rng))
    with pytest.raises(ValueError):
        disc(Tensor(np.zeros((2, 7, 2))), np.ones((2, 7), bool), conditions(rng)[:1])


def test_discriminator_grad_check():
    rng = np.random.default_rng(1)
    disc = make_disc(seed=2)
    sample = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
    conds = conditions(rng)
    w = None

    def loss():
        nonlocal w
        out = disc(sample, lengths_to_mask([3, 2], 3), conds)
        if w is None:
            w = Tensor(rng.standard_normal(out.logits.shape))
        return ad.mul(out.logits, w).sum()

    loss()
    params = dict(disc.named_parameters())
    params["sample"] = sample
    rep = ad.grad_check(loss, params)
    assert rep.passed, rep.worst


def test_lsgan_examples():
    ones, zeros, half = (Tensor(np.full((2, 3), v)) for v in (1.0, 0.0, 0.5))
    assert lsgan_losses(half, ones)[0].item() == 0.0
    assert lsgan_losses(ones, zeros)[1].item() == 0.0
    assert lsgan_losses(half, half)[0].item() == pytest.approx(0.25)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_property_lsgan_nonnegative(real, fake):
    g, d = lsgan_losses(Tensor(np.array(real)), Tensor(np.array(fake)))
    assert g.item() >= 0 and d.item() >= 0


def test_feature_matching_examples():
    rng = np.random.default_rng(0)
    f = [Tensor(rng.standard_normal((3, 4, 5))) for _ in range(2)]
    assert feature_matching(f, f).item() == 0.0
    off = feature_matching([f[0]], [f[0] + Tensor(np.full((3, 4, 5), -0.7))])
    assert off.item() == pytest.approx(0.7)
    perm = [2, 0, 1]
    g = [Tensor(rng.standard_normal((3, 4, 5))) for _ in range(2)]
    a = feature_matching(f, g).item()
    b = feature_matching([Tensor(x.data[perm]) for x in f], [Tensor(x.data[perm]) for x in g]).item()
    assert a == pytest.approx(b, rel=1e-12)
    with pytest.raises(ValueError):
        feature_matching(f, g[:1])


def test_adversarial_codec_training_stays_finite():
    utts = gen_corpus(CorpusConfig(seed=0, num_speakers=2, utts_per_speaker=4, max_phonemes=10)).utterances
    cfg = CodecConfig(d_model=8, heads=2, ff_dim=16, kernel=3, wide_kernel=5, enc_blocks=1, dec_blocks=1, K=4,
                      codes_per_book=16)
    tcfg = CodecTrainConfig(steps=2000, batch=2, lr=1e-3, adversarial=True, adv_warmup=1000, disc_blocks=1)
    tr = CodecTrainer(ProsodyCodec(cfg, seed=0), utts, tcfg, seed=0)
    hist = tr.run(tcfg.steps)
    for key in ("L_dur", "L_f0", "L_n", "adv_g", "adv_d", "fm"):
        assert np.isfinite([r[key] for r in hist]).all()
    assert hist[-1]["adv_d"] > 0
