"""Structural reparameterization.

Train-form blocks carry batch norms and parallel depthwise branches. All of
those are linear, so each block folds offline into plain convolutions that
compute the same function.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .blocks import (
    INFERENCE,
    TRAIN,
    AttnBlockParams,
    ConvFfnParams,
    PatchEmbedParams,
    RepMixerBlockParams,
    RepMixerParams,
    StemParams,
    block_forward,
    block_kind,
)
from .errors import ShapeError, StateError
from .tensor import DTYPE, BnParams, ConvParams

FOLD_TOLERANCE = 1e-4
DEFAULT_PROBES = 8
DEFAULT_PROBE_SEED = 0


@dataclass(frozen=True)
class FoldReport:
    block_id: str
    kind: str
    max_abs_diff: float
    probe_count: int
    probe_seed: int = DEFAULT_PROBE_SEED

    @property
    def ok(self) -> bool:
        return self.max_abs_diff <= FOLD_TOLERANCE


def fold_bn_into_conv(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Return a conv equal to ``BN(conv(x))`` for every x."""
    if bn.channels != conv.out_channels:
        raise ShapeError(
            f"cannot fold BN with {bn.channels} channels into conv with out_ch {conv.out_channels}"
        )
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    weight = conv.weight.astype(np.float64) * scale[:, None, None, None]
    bias = bn.beta.astype(np.float64) + (conv.bias.astype(np.float64) - bn.running_mean) * scale
    return dataclasses.replace(conv, weight=weight.astype(DTYPE), bias=bias.astype(DTYPE))


def identity_kernel(channels: int, k: int) -> ConvParams:
    """Depthwise k x k Dirac kernel: conv2d(x, identity_kernel(c, k)) == x."""
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"identity kernel size must be odd, got {k}")
    weight = np.zeros((channels, 1, k, k), dtype=DTYPE)
    weight[:, 0, k // 2, k // 2] = 1.0
    return ConvParams(
        weight=weight,
        bias=np.zeros(channels, dtype=DTYPE),
        stride=1,
        padding=(k - 1) // 2,
        groups=channels,
    )


def merge_parallel_branches(branches) -> ConvParams:
    """Sum parallel convs into one; smaller kernels are zero-padded around the centre."""
    branches = list(branches)
    if not branches:
        raise ShapeError("no branches to merge")
    first = branches[0]
    if len(branches) == 1:
        return first
    k_max = max(b.kernel_size for b in branches)
    for b in branches:
        if (b.stride, b.groups, b.out_channels, b.in_channels) != (
            first.stride,
            first.groups,
            first.out_channels,
            first.in_channels,
        ):
            raise ShapeError("branches differ in stride, groups or channel counts")
        if (k_max - b.kernel_size) % 2:
            raise ShapeError("kernel sizes must differ by an even amount to centre-align")
    weight = np.zeros((first.out_channels, first.weight.shape[1], k_max, k_max), dtype=np.float64)
    bias = np.zeros(first.out_channels, dtype=np.float64)
    for b in branches:
        off = (k_max - b.kernel_size) // 2
        weight[:, :, off : off + b.kernel_size, off : off + b.kernel_size] += b.weight
        bias += b.bias
    return ConvParams(
        weight=weight.astype(DTYPE),
        bias=bias.astype(DTYPE),
        stride=first.stride,
        padding=(k_max - 1) // 2,
        groups=first.groups,
    )


def _fold_patch_embed(p: PatchEmbedParams) -> PatchEmbedParams:
    dw = merge_parallel_branches(fold_bn_into_conv(conv, bn) for conv, bn in p.branches)
    pw = fold_bn_into_conv(p.pointwise, p.pointwise_bn)
    return PatchEmbedParams(form=INFERENCE, folded_dw=dw, folded_pw=pw)


def _fold_repmixer(p: RepMixerParams) -> RepMixerParams:
    c = p.mix_dw.out_channels
    merged = merge_parallel_branches(
        [identity_kernel(c, p.mix_dw.kernel_size), fold_bn_into_conv(p.mix_dw, p.bn)]
    )
    return RepMixerParams(form=INFERENCE, mix_dw=merged)


def _fold_convffn(p: ConvFfnParams) -> ConvFfnParams:
    return dataclasses.replace(
        p, form=INFERENCE, pre_dw=fold_bn_into_conv(p.pre_dw, p.pre_bn), pre_bn=None
    )


def _fold_stem(p: StemParams) -> StemParams:
    return StemParams(
        form=INFERENCE,
        conv=fold_bn_into_conv(p.conv, p.conv_bn),
        conv_bn=None,
        embed=_fold_patch_embed(p.embed),
    )


def fold_params(p):
    """Convert any train-form block parameters to inference form."""
    if p.form != TRAIN:
        raise StateError(f"{block_kind(p)} block is already folded")
    if isinstance(p, PatchEmbedParams):
        return _fold_patch_embed(p)
    if isinstance(p, RepMixerParams):
        return _fold_repmixer(p)
    if isinstance(p, ConvFfnParams):
        return _fold_convffn(p)
    if isinstance(p, StemParams):
        return _fold_stem(p)
    if isinstance(p, AttnBlockParams):
        return dataclasses.replace(p, ffn=_fold_convffn(p.ffn))
    if isinstance(p, RepMixerBlockParams):
        return RepMixerBlockParams(mixer=_fold_repmixer(p.mixer), ffn=_fold_convffn(p.ffn))
    raise TypeError(f"not a foldable block: {type(p).__name__}")


def _probe_channels(p) -> int:
    if isinstance(p, StemParams):
        return p.conv.in_channels
    if isinstance(p, PatchEmbedParams):
        return p.in_channels
    if isinstance(p, RepMixerParams):
        return p.mix_dw.in_channels
    if isinstance(p, ConvFfnParams):
        return p.pre_dw.in_channels
    if isinstance(p, AttnBlockParams):
        return p.cpe.in_channels
    if isinstance(p, RepMixerBlockParams):
        return p.mixer.mix_dw.in_channels
    raise TypeError(type(p).__name__)


def probe_inputs(channels: int, count: int = DEFAULT_PROBES, seed: int = DEFAULT_PROBE_SEED, hw: int = 8):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1.0, 1.0, (1, channels, hw, hw)).astype(DTYPE) for _ in range(count)]


def max_abs_diff(a_params, b_params, inputs) -> float:
    worst = 0.0
    for x in inputs:
        diff = np.abs(block_forward(x, a_params) - block_forward(x, b_params))
        worst = max(worst, float(diff.max()))
    return worst


def fold_block(p, block_id: str = "block", probes: int = DEFAULT_PROBES, seed: int = DEFAULT_PROBE_SEED, hw: int = 8):
    """Fold ``p`` and measure train-vs-inference disagreement on random probes.

    Returns ``(inference_params, FoldReport)``.
    """
    if probes < 1:
        raise ShapeError("need at least one probe input")
    folded = fold_params(p)
    inputs = probe_inputs(_probe_channels(p), probes, seed, hw)
    report = FoldReport(
        block_id=block_id,
        kind=block_kind(p),
        max_abs_diff=max_abs_diff(p, folded, inputs),
        probe_count=probes,
        probe_seed=seed,
    )
    return folded, report


def fold_model(model, probes: int = DEFAULT_PROBES, seed: int = DEFAULT_PROBE_SEED, hw: int = 8):
    """Fold every block of a train-form ``EncoderModel``.

    Returns ``(inference_model, [FoldReport, ...])`` in forward order.
    Multi-scale and projector weights carry no BN and are shared unchanged.
    ``probes=0`` skips the equivalence check and returns no reports.
    """
    if model.form != TRAIN:
        raise StateError("model is already folded")
    folded, reports = {}, []
    for block_id, params in model.named_blocks():
        if probes == 0:
            folded[block_id] = fold_params(params)
            continue
        folded[block_id], report = fold_block(params, block_id, probes, seed, hw)
        reports.append(report)
    return model.replace_blocks(INFERENCE, folded), reports
