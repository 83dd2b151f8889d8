import dataclasses

import numpy as np
import pytest

from fvb import blocks as B
from fvb.errors import ShapeError, StateError
from fvb.reparam import identity_kernel
from fvb.tensor import BnParams, ConvParams, batch_norm_inference, conv2d, gelu, layer_norm, mhsa


def zeros_like_conv(p: ConvParams) -> ConvParams:
    return dataclasses.replace(p, weight=np.zeros_like(p.weight), bias=np.zeros_like(p.bias))


def identity_bn(c: int) -> BnParams:
    return BnParams(np.ones(c, np.float32), np.zeros(c, np.float32), np.zeros(c, np.float32), np.ones(c, np.float32), 0.0)


def rand_x(rng, c, h, w=None):
    return rng.uniform(-1, 1, (1, c, h, h if w is None else w)).astype(np.float32)


def test_stem_output_shape(rng):
    p = B.make_stem(rng, 96)
    assert B.stem_forward(rand_x(rng, 3, 256), p).shape == (1, 96, 64, 64)
    assert B.stem_forward(rand_x(rng, 3, 64), p).shape == (1, 96, 16, 16)


def test_stem_rejects_indivisible_input(rng):
    with pytest.raises(ShapeError):
        B.stem_forward(rand_x(rng, 3, 102), B.make_stem(rng, 8))


def test_patch_embed_shape_and_params(rng):
    p = B.make_patch_embed(rng, 96, 192)
    assert B.patch_embed_forward(rand_x(rng, 96, 64), p).shape == (1, 192, 32, 32)
    assert len(p.branches) == 2


def test_patch_embed_form_mismatch(rng):
    p = B.make_patch_embed(rng, 8, 16)
    with pytest.raises(StateError):
        B.PatchEmbedParams(form=B.INFERENCE, branches=p.branches, pointwise=p.pointwise, pointwise_bn=p.pointwise_bn)
    with pytest.raises(StateError):
        B.PatchEmbedParams(form=B.TRAIN, folded_dw=p.branches[0][0], folded_pw=p.pointwise)


def test_repmixer_zero_dw_identity_bn_is_residual(rng):
    c = 6
    p = B.RepMixerParams(form=B.TRAIN, mix_dw=zeros_like_conv(B.make_repmixer(rng, c).mix_dw), bn=identity_bn(c))
    x = rand_x(rng, c, 5)
    np.testing.assert_array_equal(B.repmixer_forward(x, p), x)


def test_repmixer_inference_dirac_is_identity(rng):
    p = B.RepMixerParams(form=B.INFERENCE, mix_dw=identity_kernel(6, 3))
    x = rand_x(rng, 6, 5)
    np.testing.assert_array_equal(B.repmixer_forward(x, p), x)


def test_repmixer_form_mismatch(rng):
    p = B.make_repmixer(rng, 4)
    with pytest.raises(StateError):
        B.RepMixerParams(form=B.INFERENCE, mix_dw=p.mix_dw, bn=p.bn)
    with pytest.raises(StateError):
        B.RepMixerParams(form=B.TRAIN, mix_dw=p.mix_dw)


def test_convffn_dead_branch(rng):
    p = B.make_convffn(rng, 8)
    p = dataclasses.replace(p, fc2=zeros_like_conv(p.fc2))
    x = rand_x(rng, 8, 4)
    np.testing.assert_array_equal(B.convffn_forward(x, p), x)


def test_convffn_hidden_width():
    p = B.make_convffn(np.random.default_rng(0), 96)
    assert p.fc1.out_channels == 384
    assert p.fc2.in_channels == 384


def test_convffn_ratio_violation(rng):
    p = B.make_convffn(rng, 8)
    with pytest.raises(ShapeError):
        dataclasses.replace(p, ratio=3.0)


def test_convffn_matches_recomposition(rng):
    p = B.make_convffn(rng, 8)
    x = rand_x(rng, 8, 6)
    y = batch_norm_inference(conv2d(x, p.pre_dw), p.pre_bn)
    want = x + conv2d(gelu(conv2d(y, p.fc1)), p.fc2)
    assert np.abs(B.convffn_forward(x, p) - want).max() <= 1e-5


def test_attention_all_zero_is_identity(rng):
    p = B.make_attn_block(rng, 64)
    z = zeros_like_conv
    p = dataclasses.replace(
        p,
        cpe=z(p.cpe),
        wq=z(p.wq),
        wk=z(p.wk),
        wv=z(p.wv),
        wo=z(p.wo),
        ffn=dataclasses.replace(p.ffn, fc1=z(p.ffn.fc1), fc2=z(p.ffn.fc2)),
    )
    x = rand_x(rng, 64, 3)
    np.testing.assert_array_equal(B.attn_block_forward(x, p), x)


@pytest.mark.parametrize("c,heads", [(768, 12), (1536, 24)])
def test_attention_heads_from_width(c, heads):
    rng = np.random.default_rng(0)
    assert B.make_attn_block(rng, c).heads == heads


def test_attention_matches_recomposition(rng):
    p = B.make_attn_block(rng, 64)
    x = rand_x(rng, 64, 2)
    x1 = x + conv2d(x, p.cpe)
    x2 = x1 + mhsa(layer_norm(x1, p.norm_gamma, p.norm_beta, p.norm_eps), p.wq, p.wk, p.wv, p.wo, p.heads)
    want = B.convffn_forward(x2, p.ffn)
    assert np.abs(B.attn_block_forward(x, p) - want).max() <= 1e-5


def test_attention_head_divisibility(rng):
    p = B.make_attn_block(rng, 64)
    with pytest.raises(ShapeError):
        dataclasses.replace(p, heads=3)


def test_block_kind_and_param_count(rng):
    blk = B.make_repmixer_block(rng, 8)
    assert B.block_kind(blk) == "repmixer_block"
    assert B.num_params(blk) == sum(a.size for a in B.iter_arrays(blk))
    with pytest.raises(TypeError):
        B.block_forward(np.zeros((1, 1, 1, 1), np.float32), object())


def test_random_init_deterministic():
    a = B.make_attn_block(np.random.default_rng(5), 64)
    b = B.make_attn_block(np.random.default_rng(5), 64)
    for u, v in zip(B.iter_arrays(a), B.iter_arrays(b)):
        np.testing.assert_array_equal(u, v)
