from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvsd import autodiff as ad
from tvsd.autodiff import Tensor
from tvsd.nn import (
    PAPER_CONFORMER,
    AdamW,
    ConformerBlock,
    ConformerConfig,
    ConformerStack,
    CrossAttention,
    Linear,
    MultiHeadAttention,
    lengths_to_mask,
    pack_segments,
    sinusoidal_embed,
)

TINY = ConformerConfig(8, 2, 4, 3, 16)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_config_validation_and_paper_values():
    assert (PAPER_CONFORMER.model_dim, PAPER_CONFORMER.num_heads, PAPER_CONFORMER.head_dim,
            PAPER_CONFORMER.conv_kernel_size, PAPER_CONFORMER.feedforward_dim) == (512, 8, 64, 31, 1024)
    with pytest.raises(ValueError):
        ConformerConfig(8, 3, 4, 3, 16)
    with pytest.raises(ValueError):
        ConformerConfig(8, 2, 4, 4, 16)


def test_sinusoidal_embed_shape_and_odd_dim():
    e = sinusoidal_embed(np.array([0.0, 1.0]), 6)
    assert e.shape == (2, 6)
    np.testing.assert_array_equal(e[0, 0::2], 0.0)
    np.testing.assert_array_equal(e[0, 1::2], 1.0)
    with pytest.raises(ValueError):
        sinusoidal_embed(0.0, 5)


def test_conformer_shape_and_determinism():
    block = ConformerBlock(rng(), TINY)
    x = Tensor(rng(1).standard_normal((2, 5, 8)))
    y1, y2 = block(x).data, block(x).data
    assert y1.shape == (2, 5, 8)
    np.testing.assert_array_equal(y1, y2)


def test_conformer_padding_does_not_leak():
    block = ConformerBlock(rng(), TINY)
    x = rng(1).standard_normal((1, 7, 8))
    mask = np.array([[True] * 5 + [False] * 2])
    a = block(Tensor(x), mask).data[0, :5]
    x2 = x.copy()
    x2[0, 5:] = 1e3
    b = block(Tensor(x2), mask).data[0, :5]
    np.testing.assert_allclose(a, b, atol=1e-12)
    c = block(Tensor(x[:, :5])).data[0]
    np.testing.assert_allclose(a, c, atol=1e-12)


def test_conformer_grad_check_with_mask():
    block = ConformerBlock(rng(), TINY)
    x = Tensor(rng(1).standard_normal((2, 4, 8)), requires_grad=True)
    mask = np.array([[True] * 4, [True, True, True, False]])
    w = Tensor(rng(2).standard_normal((2, 4, 8)))
    params = dict(block.named_parameters())
    params["x"] = x
    rep = ad.grad_check(lambda: ad.mul(block(x, mask), w).sum(), params)
    assert rep.passed, rep.worst


def test_cross_attention_fixed_length_and_grads():
    ca = CrossAttention(rng(), 8, 2, 3)
    for L in (1, 6):
        assert ca(Tensor(rng(L).standard_normal((2, L, 8)))).shape == (2, 3, 8)
    seq = Tensor(rng(3).standard_normal((2, 5, 8)), requires_grad=True)
    mask = lengths_to_mask([5, 2], 5)
    out, w = ca(seq, mask, return_weights=True)
    np.testing.assert_array_equal(w.data[1, :, :, 2:], 0.0)
    params = dict(ca.named_parameters())
    params["seq"] = seq
    target = Tensor(rng(4).standard_normal((2, 3, 8)))
    rep = ad.grad_check(lambda: ad.mul(ca(seq, mask), target).sum(), params)
    assert rep.passed, rep.worst


def test_attention_weights_rows_sum_to_one():
    mha = MultiHeadAttention(rng(), 8, 2)
    assert mha(Tensor(rng(1).standard_normal((1, 4, 8))), None).shape == (1, 4, 8)


def test_stack_features_per_block():
    st_ = ConformerStack(rng(), TINY, 1, 2, 5)
    out, feats = st_(Tensor(rng(1).standard_normal((1, 6, 8))), None, return_features=True)
    assert len(feats) == 3 and out.shape == (1, 6, 8)


def test_pack_segments_batched_equals_per_row():
    a = Tensor(rng(1).standard_normal((2, 3, 4)))
    b = Tensor(rng(2).standard_normal((2, 2, 4)))
    ma = lengths_to_mask([3, 1], 3)
    mb = lengths_to_mask([1, 2], 2)
    p = pack_segments([(a, ma), (b, mb)])
    np.testing.assert_array_equal(p.mask.sum(1), [4, 3])
    np.testing.assert_array_equal(p.x.data[1, 0], a.data[1, 0])
    np.testing.assert_array_equal(p.x.data[1, 1:3], b.data[1, :2])
    seg, m = p.segment(1, 2)
    np.testing.assert_array_equal(seg.data[m], b.data[mb])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_property_pack_lengths(la, lb):
    n = min(len(la), len(lb))
    la, lb = la[:n], lb[:n]
    a = Tensor(np.ones((n, max(la), 2)))
    b = Tensor(2 * np.ones((n, max(lb), 2)))
    p = pack_segments([(a, lengths_to_mask(la)), (b, lengths_to_mask(lb))])
    np.testing.assert_array_equal(p.mask.sum(1), np.add(la, lb))
    assert (p.x.data[p.mask] > 0).all()


def test_adamw_decreases_quadratic_and_state_roundtrip():
    lin = Linear(rng(), 3, 1)
    x = rng(1).standard_normal((32, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]])
    opt = AdamW(list(lin.named_parameters()), lr=0.05)
    first = None
    for _ in range(200):
        loss = ad.mse_loss(lin(Tensor(x)), y)
        first = loss.item() if first is None else first
        opt.step(ad.backward(loss, lin.parameters()))
    assert loss.item() < 0.01 * first
    opt2 = AdamW(list(lin.named_parameters()), lr=0.05)
    opt2.load_state_dict(opt.state_dict())
    assert opt2.t == opt.t
    for a, b in zip(opt.m + opt.v, opt2.m + opt2.v):
        np.testing.assert_array_equal(a, b)


def test_adamw_clips_and_rejects_nan():
    lin = Linear(rng(), 2, 1, bias=False)
    opt = AdamW(list(lin.named_parameters()), lr=0.1, clip_norm=1.0)
    assert opt.step([np.array([[30.0], [40.0]])]) == pytest.approx(50.0)
    with pytest.raises(ad.NonFiniteError):
        opt.step([np.array([[np.nan], [0.0]])])


def test_state_dict_roundtrip_and_errors():
    a, b = Linear(rng(0), 2, 2), Linear(rng(1), 2, 2)
    b.copy_from(a)
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    with pytest.raises(KeyError):
        b.load_state_dict({})
    with pytest.raises(ValueError):
        b.load_state_dict({"weight": np.zeros((3, 3)), "bias": np.zeros(2)})
