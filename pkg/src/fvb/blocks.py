"""Encoder building blocks, each in train form (multi-branch, with BN) or
inference form (folded, single branch).

Block kinds:

* stem: conv3x3/s2 + BN, GELU, then a stride-2 patch-embed unit (x4 total)
* patch_embed: k parallel 7x7/s2 depthwise conv+BN branches summed, then 1x1 conv+BN
* repmixer: ``x + BN(DW3x3(x))``, folds to a single depthwise 3x3 conv
* convffn: ``x + fc2(GELU(fc1(BN(DW7x7(x)))))``
* attention: CPE residual, pre-norm MHSA residual, then ConvFFN
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from .errors import ShapeError, StateError
from .tensor import (
    DTYPE,
    BnParams,
    ConvParams,
    batch_norm_inference,
    conv2d,
    gelu,
    layer_norm,
    mhsa,
)

TRAIN = "train"
INFERENCE = "inference"
FORMS = (TRAIN, INFERENCE)

HEAD_DIM = 64
FFN_RATIO = 4.0
NUM_BRANCHES = 2


def _check_form(form: str, train_ok: bool, infer_ok: bool, kind: str) -> None:
    if form not in FORMS:
        raise StateError(f"{kind}: unknown form {form!r}")
    if form == TRAIN and not train_ok:
        raise StateError(f"{kind}: train form requires its train-time parameters and no folded ones")
    if form == INFERENCE and not infer_ok:
        raise StateError(f"{kind}: inference form requires folded parameters and no train-time branches")


def _is_depthwise(p: ConvParams, channels: int, k: int, stride: int) -> bool:
    return (
        p.groups == channels
        and p.weight.shape == (channels, 1, k, k)
        and p.stride == stride
        and p.padding == (k - 1) // 2
    )


@dataclass(frozen=True)
class PatchEmbedParams:
    form: str
    branches: tuple | None = None  # ((ConvParams, BnParams), ...) train only
    pointwise: ConvParams | None = None
    pointwise_bn: BnParams | None = None
    folded_dw: ConvParams | None = None
    folded_pw: ConvParams | None = None

    def __post_init__(self):
        train_ok = bool(self.branches) and self.pointwise is not None and self.pointwise_bn is not None
        train_ok = train_ok and self.folded_dw is None and self.folded_pw is None
        infer_ok = self.folded_dw is not None and self.folded_pw is not None
        infer_ok = infer_ok and not self.branches and self.pointwise is None and self.pointwise_bn is None
        _check_form(self.form, train_ok, infer_ok, "patch_embed")
        if self.form == TRAIN:
            c = self.branches[0][0].out_channels
            for conv, bn in self.branches:
                if not _is_depthwise(conv, c, 7, 2):
                    raise ShapeError("patch_embed branches must be 7x7 stride-2 depthwise convs")
                if bn.channels != c:
                    raise ShapeError("patch_embed branch BN channel mismatch")
        else:
            c = self.folded_dw.out_channels
            if not _is_depthwise(self.folded_dw, c, 7, 2):
                raise ShapeError("folded patch_embed dw must be a 7x7 stride-2 depthwise conv")

    @property
    def in_channels(self) -> int:
        dw = self.branches[0][0] if self.form == TRAIN else self.folded_dw
        return dw.in_channels

    @property
    def out_channels(self) -> int:
        pw = self.pointwise if self.form == TRAIN else self.folded_pw
        return pw.out_channels


@dataclass(frozen=True)
class StemParams:
    form: str
    conv: ConvParams  # 3x3 stride 2
    conv_bn: BnParams | None
    embed: PatchEmbedParams

    def __post_init__(self):
        ok_train = self.conv_bn is not None and self.embed.form == TRAIN
        ok_infer = self.conv_bn is None and self.embed.form == INFERENCE
        _check_form(self.form, ok_train, ok_infer, "stem")
        if self.conv.kernel_size != 3 or self.conv.stride != 2:
            raise ShapeError("stem conv must be 3x3 stride 2")


@dataclass(frozen=True)
class RepMixerParams:
    form: str
    mix_dw: ConvParams
    bn: BnParams | None = None

    def __post_init__(self):
        _check_form(self.form, self.bn is not None, self.bn is None, "repmixer")
        c = self.mix_dw.out_channels
        if not _is_depthwise(self.mix_dw, c, 3, 1):
            raise ShapeError("repmixer kernel must be a 3x3 stride-1 depthwise conv")


@dataclass(frozen=True)
class ConvFfnParams:
    form: str
    pre_dw: ConvParams
    pre_bn: BnParams | None
    fc1: ConvParams
    fc2: ConvParams
    ratio: float = FFN_RATIO

    def __post_init__(self):
        _check_form(self.form, self.pre_bn is not None, self.pre_bn is None, "convffn")
        c = self.pre_dw.out_channels
        if not _is_depthwise(self.pre_dw, c, 7, 1):
            raise ShapeError("convffn pre_dw must be a 7x7 stride-1 depthwise conv")
        hidden = round(self.ratio * c)
        if self.fc1.out_channels != hidden or self.fc1.in_channels != c:
            raise ShapeError(
                f"convffn expansion-ratio violation: fc1 maps {self.fc1.in_channels}->"
                f"{self.fc1.out_channels}, expected {c}->{hidden} (ratio {self.ratio})"
            )
        if self.fc2.in_channels != hidden or self.fc2.out_channels != c:
            raise ShapeError(f"convffn fc2 must map {hidden}->{c}")


@dataclass(frozen=True)
class AttnBlockParams:
    cpe: ConvParams
    norm_gamma: np.ndarray
    norm_beta: np.ndarray
    wq: ConvParams
    wk: ConvParams
    wv: ConvParams
    wo: ConvParams
    heads: int
    ffn: ConvFfnParams
    norm_eps: float = 1e-5

    def __post_init__(self):
        c = self.cpe.out_channels
        if c % HEAD_DIM or self.heads != c // HEAD_DIM:
            raise ShapeError(
                f"attention block head-divisibility error: {c} channels need heads = c/{HEAD_DIM}"
            )
        if not _is_depthwise(self.cpe, c, 7, 1):
            raise ShapeError("attention cpe must be a 7x7 stride-1 depthwise conv")

    @property
    def form(self) -> str:
        return self.ffn.form


@dataclass(frozen=True)
class RepMixerBlockParams:
    mixer: RepMixerParams
    ffn: ConvFfnParams

    def __post_init__(self):
        if self.mixer.form != self.ffn.form:
            raise StateError("repmixer block: mixer and ffn forms differ")

    @property
    def form(self) -> str:
        return self.mixer.form


# ------------------------------------------------------------------ forward


def stem_forward(x: np.ndarray, p: StemParams) -> np.ndarray:
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"stem input {h}x{w} not divisible by 4")
    y = conv2d(x, p.conv)
    if p.form == TRAIN:
        y = batch_norm_inference(y, p.conv_bn)
    return patch_embed_forward(gelu(y), p.embed)


def patch_embed_forward(x: np.ndarray, p: PatchEmbedParams) -> np.ndarray:
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"patch_embed input {h}x{w} must have even spatial dims")
    if p.form == TRAIN:
        y = None
        for conv, bn in p.branches:
            branch = batch_norm_inference(conv2d(x, conv), bn)
            y = branch if y is None else y + branch
        return batch_norm_inference(conv2d(y, p.pointwise), p.pointwise_bn)
    return conv2d(conv2d(x, p.folded_dw), p.folded_pw)


def repmixer_forward(x: np.ndarray, p: RepMixerParams) -> np.ndarray:
    if p.form == TRAIN:
        return x + batch_norm_inference(conv2d(x, p.mix_dw), p.bn)
    return conv2d(x, p.mix_dw)


def convffn_forward(x: np.ndarray, p: ConvFfnParams) -> np.ndarray:
    y = conv2d(x, p.pre_dw)
    if p.form == TRAIN:
        y = batch_norm_inference(y, p.pre_bn)
    return x + conv2d(gelu(conv2d(y, p.fc1)), p.fc2)


def attn_block_forward(x: np.ndarray, p: AttnBlockParams) -> np.ndarray:
    c = x.shape[1]
    if c % HEAD_DIM:
        raise ShapeError(f"attention block needs channels divisible by {HEAD_DIM}, got {c}")
    x1 = x + conv2d(x, p.cpe)
    normed = layer_norm(x1, p.norm_gamma, p.norm_beta, p.norm_eps)
    x2 = x1 + mhsa(normed, p.wq, p.wk, p.wv, p.wo, p.heads)
    return convffn_forward(x2, p.ffn)


def repmixer_block_forward(x: np.ndarray, p: RepMixerBlockParams) -> np.ndarray:
    return convffn_forward(repmixer_forward(x, p.mixer), p.ffn)


def block_forward(x: np.ndarray, p) -> np.ndarray:
    """Dispatch on parameter type."""
    if isinstance(p, RepMixerBlockParams):
        return repmixer_block_forward(x, p)
    if isinstance(p, AttnBlockParams):
        return attn_block_forward(x, p)
    if isinstance(p, PatchEmbedParams):
        return patch_embed_forward(x, p)
    if isinstance(p, StemParams):
        return stem_forward(x, p)
    if isinstance(p, RepMixerParams):
        return repmixer_forward(x, p)
    if isinstance(p, ConvFfnParams):
        return convffn_forward(x, p)
    raise TypeError(f"not a block parameter object: {type(p).__name__}")


KIND_OF = {
    StemParams: "stem",
    PatchEmbedParams: "patch_embed",
    RepMixerParams: "repmixer",
    ConvFfnParams: "convffn",
    AttnBlockParams: "attention",
    RepMixerBlockParams: "repmixer_block",
}


def block_kind(p) -> str:
    return KIND_OF[type(p)]


def iter_arrays(obj):
    """Yield every ndarray reachable from a parameter object."""
    if isinstance(obj, np.ndarray):
        yield obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from iter_arrays(getattr(obj, f.name))
    elif isinstance(obj, (tuple, list)):
        for item in obj:
            yield from iter_arrays(item)


def num_params(obj) -> int:
    return sum(a.size for a in iter_arrays(obj))


# ----------------------------------------------------------- random init


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return ((rng.random(shape, dtype=np.float32) * 2.0 - 1.0) * bound).astype(DTYPE)


def random_conv(rng, out_ch: int, in_ch: int, k: int, stride: int = 1, groups: int = 1, padding=None, gain: float = 1.0) -> ConvParams:
    """Conv with weights and bias ~ U(-b, b), b = gain / sqrt(fan_in)."""
    icg = in_ch // groups
    bound = gain / np.sqrt(icg * k * k)
    return ConvParams(
        weight=_uniform(rng, (out_ch, icg, k, k), bound),
        bias=_uniform(rng, (out_ch,), bound),
        stride=stride,
        padding=(k - 1) // 2 if padding is None else padding,
        groups=groups,
    )


def random_bn(rng, c: int) -> BnParams:
    return BnParams(
        gamma=(0.5 + rng.random(c, dtype=np.float32)).astype(DTYPE),
        beta=_uniform(rng, (c,), 0.1),
        running_mean=_uniform(rng, (c,), 0.1),
        running_var=(0.5 + rng.random(c, dtype=np.float32)).astype(DTYPE),
        eps=1e-5,
    )


def make_patch_embed(rng, in_ch: int, out_ch: int, branches: int = NUM_BRANCHES) -> PatchEmbedParams:
    return PatchEmbedParams(
        form=TRAIN,
        branches=tuple(
            (random_conv(rng, in_ch, in_ch, 7, stride=2, groups=in_ch), random_bn(rng, in_ch))
            for _ in range(branches)
        ),
        pointwise=random_conv(rng, out_ch, in_ch, 1),
        pointwise_bn=random_bn(rng, out_ch),
    )


def make_stem(rng, width: int, in_ch: int = 3, branches: int = NUM_BRANCHES) -> StemParams:
    return StemParams(
        form=TRAIN,
        conv=random_conv(rng, width, in_ch, 3, stride=2),
        conv_bn=random_bn(rng, width),
        embed=make_patch_embed(rng, width, width, branches),
    )


def make_repmixer(rng, c: int) -> RepMixerParams:
    return RepMixerParams(form=TRAIN, mix_dw=random_conv(rng, c, c, 3, groups=c), bn=random_bn(rng, c))


def make_convffn(rng, c: int, ratio: float = FFN_RATIO) -> ConvFfnParams:
    hidden = round(ratio * c)
    return ConvFfnParams(
        form=TRAIN,
        pre_dw=random_conv(rng, c, c, 7, groups=c),
        pre_bn=random_bn(rng, c),
        fc1=random_conv(rng, hidden, c, 1),
        fc2=random_conv(rng, c, hidden, 1),
        ratio=ratio,
    )


def make_repmixer_block(rng, c: int, ratio: float = FFN_RATIO) -> RepMixerBlockParams:
    return RepMixerBlockParams(mixer=make_repmixer(rng, c), ffn=make_convffn(rng, c, ratio))


def make_attn_block(rng, c: int, ratio: float = FFN_RATIO) -> AttnBlockParams:
    return AttnBlockParams(
        cpe=random_conv(rng, c, c, 7, groups=c),
        norm_gamma=(0.5 + rng.random(c, dtype=np.float32)).astype(DTYPE),
        norm_beta=_uniform(rng, (c,), 0.1),
        wq=random_conv(rng, c, c, 1),
        wk=random_conv(rng, c, c, 1),
        wv=random_conv(rng, c, c, 1),
        wo=random_conv(rng, c, c, 1),
        heads=c // HEAD_DIM,
        ffn=make_convffn(rng, c, ratio),
    )
