import numpy as np
import pytest

from fvb import blocks as B
from fvb import encoder as E
from fvb.errors import ShapeError, UsageError
from fvb.reparam import fold_model
from fvb.tensor import ConvParams, conv2d

GOLDEN_FASTVITHD_PARAMS = 126_355_808


def test_builtin_configs():
    hd = E.builtin_config("fastvithd")
    assert hd.num_stages == 5 and hd.stage_dims[-1] == 1536 and hd.downsample_factor == 64
    naive = E.builtin_config("fastvit_naive_scaled")
    assert naive.num_stages == 4 and list(naive.stage_dims) == [128, 256, 512, 1024]
    assert E.builtin_config("fastvit_approx").downsample_factor == 32
    with pytest.raises(UsageError, match="mystery"):
        E.builtin_config("mystery")


@pytest.mark.parametrize(
    "override",
    [
        dict(stage_dims=(96, 192, 384, 768, 1500)),
        dict(stage_depths=(2, 12, 24, 4)),
        dict(stage_kinds=("repmixer",) * 4 + ("conv",)),
        dict(multiscale="maxpool"),
        dict(stage_dims=(8, 16, 32, 64, 128), stage_kinds=("attention",) * 5),
        dict(ffn_ratio=0.0),
    ],
)
def test_invalid_config(override):
    with pytest.raises(UsageError):
        E.builtin_config("fastvithd", **override)


def test_build_determinism():
    cfg = E.tiny_config("fastvithd")
    a, b, c = E.build(cfg, seed=0), E.build(cfg, seed=0), E.build(cfg, seed=1)
    pa, pb, pc = (list(B.iter_arrays([m.stem, m.patch_embeds, m.stages, m.multiscale, m.projector])) for m in (a, b, c))
    assert all(np.array_equal(u, v) for u, v in zip(pa, pb))
    assert any(not np.array_equal(u, v) for u, v in zip(pa, pc))


def test_fastvithd_structure():
    model = E.build(E.builtin_config("fastvithd"), seed=0)
    ids = [bid for bid, _ in model.named_blocks()]
    assert sum(1 for i in ids if ".block" in i) == 44
    assert sum(1 for i in ids if i.endswith(".embed")) == 4
    assert ids[0] == "stem"
    assert model.num_params() == E.count_params(model.config, B.TRAIN)
    assert [blk.heads for blk in model.stages[3][:1] + model.stages[4][:1]] == [12, 24]
    grid = E.forward(model, np.zeros((1, 3, 256, 256), np.float32))
    assert grid.grid == (4, 4) and grid.count == 16
    assert grid.tokens.shape == (1, 16, 896)


def test_forward_rejects_indivisible_resolution(tiny_hd):
    with pytest.raises(ShapeError, match="64"):
        E.forward(tiny_hd, np.zeros((1, 3, 100, 100), np.float32))
    with pytest.raises(ShapeError):
        E.forward(tiny_hd, np.zeros((1, 4, 64, 64), np.float32))


@pytest.mark.parametrize("name,factor", [("fastvithd", 64), ("fastvit_approx", 32), ("fastvit_naive_scaled", 32)])
def test_token_law(name, factor):
    model = E.build(E.tiny_config(name, width=16 if name == "fastvit_naive_scaled" else 8), seed=0)
    for res in (factor, 2 * factor, 4 * factor):
        g = E.forward(model, np.zeros((1, 3, res, res), np.float32))
        assert g.count == (res // factor) ** 2 == E.token_count(model.config, res)


def test_token_ratio_hd_vs_fastvit():
    for res in (256, 512, 1024):
        assert E.token_count(E.builtin_config("fastvit_approx"), res) == 4 * E.token_count(E.builtin_config("fastvithd"), res)
    assert E.token_count(E.builtin_config("fastvithd"), 1024) == 256


def test_forward_is_pure(tiny_hd, rng):
    x = rng.uniform(-1, 1, (1, 3, 128, 128)).astype(np.float32)
    np.testing.assert_array_equal(E.forward(tiny_hd, x).tokens, E.forward(tiny_hd, x).tokens)


def test_folded_model_matches_train(tiny_hd, rng):
    folded, _ = fold_model(tiny_hd, probes=0)
    x = rng.uniform(-1, 1, (1, 3, 128, 128)).astype(np.float32)
    assert np.abs(E.forward(folded, x).tokens - E.forward(tiny_hd, x).tokens).max() <= 1e-3


def test_param_counts():
    hd = E.builtin_config("fastvithd")
    n = E.count_params(hd)
    assert n == GOLDEN_FASTVITHD_PARAMS
    assert abs(n - 125.1e6) / 125.1e6 <= 0.10
    assert E.count_params(hd, B.TRAIN) > n
    doubled = E.builtin_config("fastvithd", stage_dims=tuple(2 * d for d in hd.stage_dims))
    assert E.count_params(doubled) > 2 * n


@pytest.mark.parametrize("name", E.BUILTIN_NAMES)
def test_param_count_matches_built_model(name):
    cfg = E.tiny_config(name, width=16 if name == "fastvit_naive_scaled" else 8, depth=2)
    model = E.build(cfg, seed=3)
    assert model.num_params() == E.count_params(cfg, B.TRAIN)
    folded, _ = fold_model(model, probes=0)
    assert folded.num_params() == E.count_params(cfg, B.INFERENCE)


def test_flops_properties():
    hd = E.builtin_config("fastvithd")
    assert E.count_flops(hd, 512) < E.count_flops(hd, 1024)
    a, b = E.flops_breakdown(hd, 512), E.flops_breakdown(hd, 1024)
    assert b["stage5.attention"] == 16 * a["stage5.attention"]
    naive = E.builtin_config("fastvit_naive_scaled")
    assert E.count_flops(naive, 768) > E.count_flops(hd, 768)
    assert E.count_flops(hd, 512, B.INFERENCE) < E.count_flops(hd, 512, B.TRAIN)
    with pytest.raises(ShapeError):
        E.count_flops(hd, 500)


@pytest.mark.parametrize("name", E.BUILTIN_NAMES)
def test_flops_strictly_increasing(name):
    cfg = E.builtin_config(name)
    f = [E.count_flops(cfg, r) for r in range(128, 1025, 64)]
    assert all(x < y for x, y in zip(f, f[1:]))


def _proj(rng, cin, cout):
    return B.random_conv(rng, cout, cin, 1)


def test_multiscale_single_feature_is_projection(rng):
    feat = rng.standard_normal((1, 6, 2, 2)).astype(np.float32)
    params = E.MultiscaleParams(method="avgpool", taps=(0,), pools=(None,), proj=_proj(rng, 6, 4))
    np.testing.assert_array_equal(E.multiscale_aggregate([feat], params, (2, 2)), conv2d(feat, params.proj))


def test_multiscale_avgpool_constant_and_shapes(rng):
    feats = [np.full((1, 2, 8, 8), 1.5, np.float32), np.full((1, 4, 4, 4), 1.5, np.float32), np.full((1, 8, 2, 2), 1.5, np.float32)]
    ident = np.zeros((14, 14, 1, 1), np.float32)
    ident[np.arange(14), np.arange(14)] = 1
    proj = ConvParams(ident, np.zeros(14, np.float32))
    avg = E.MultiscaleParams("avgpool", (0, 1, 2), (None, None, None), proj)
    out = E.multiscale_aggregate(feats, avg, (2, 2))
    assert np.all(out == 1.5)
    pools = (B.random_conv(rng, 2, 2, 4, stride=4, groups=2, padding=0), B.random_conv(rng, 4, 4, 2, stride=2, groups=4, padding=0), None)
    dw = E.MultiscaleParams("dwconv", (0, 1, 2), pools, proj)
    assert E.multiscale_aggregate(feats, dw, (2, 2)).shape == out.shape


def test_multiscale_non_integer_ratio(rng):
    params = E.MultiscaleParams("avgpool", (0,), (None,), _proj(rng, 2, 2))
    with pytest.raises(ShapeError):
        E.multiscale_aggregate([np.zeros((1, 2, 6, 6), np.float32)], params, (4, 4))


@pytest.mark.parametrize("method", E.MULTISCALE_METHODS)
def test_multiscale_methods_end_to_end(method):
    model = E.build(E.tiny_config("fastvithd", multiscale=method), seed=0)
    g = E.forward(model, np.ones((1, 3, 128, 128), np.float32))
    assert g.tokens.shape == (1, 4, 32)
    assert model.num_params() == E.count_params(model.config, B.TRAIN)


def test_config_digest_stable():
    assert E.builtin_config("fastvithd").digest() == E.builtin_config("fastvithd").digest()
    assert E.builtin_config("fastvithd").digest() != E.builtin_config("fastvithd", multiscale="none").digest()
