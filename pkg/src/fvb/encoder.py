"""Full encoder assembly: configs, seeded construction, forward pass,
analytic parameter and MAC counts, multi-scale fusion and the projector."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from .errors import ShapeError, UsageError
from .tensor import DTYPE, ConvParams, avg_pool, conv2d, gelu

MULTISCALE_METHODS = ("none", "avgpool", "dwconv")
STAGE_KINDS = ("repmixer", "attention")
NUM_TAPS = 3


@dataclass(frozen=True)
class EncoderConfig:
    name: str
    stage_depths: tuple
    stage_dims: tuple
    stage_kinds: tuple
    stem_factor: int = 4
    patch_embed_between_stages: bool = True
    ffn_ratio: float = 4.0
    head_dim: int = B.HEAD_DIM
    multiscale: str = "dwconv"
    projector_dim: int = 896
    in_channels: int = 3
    branches: int = B.NUM_BRANCHES

    def __post_init__(self):
        for name in ("stage_depths", "stage_dims", "stage_kinds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def downsample_factor(self) -> int:
        return self.stem_factor * 2 ** (self.num_stages - 1)

    @property
    def final_dim(self) -> int:
        return self.stage_dims[-1]

    @property
    def taps(self) -> tuple:
        """Stage indices (0-based) fused by the multi-scale head: the last three."""
        return tuple(range(max(0, self.num_stages - NUM_TAPS), self.num_stages))

    def validate(self) -> "EncoderConfig":
        n = len(self.stage_depths)
        if n == 0 or n != len(self.stage_dims) or n != len(self.stage_kinds):
            raise UsageError(
                f"{self.name}: stage_depths, stage_dims and stage_kinds must have equal non-zero length"
            )
        if any(d < 1 for d in self.stage_depths) or any(c < 1 for c in self.stage_dims):
            raise UsageError(f"{self.name}: depths and dims must be positive")
        for a, b in zip(self.stage_dims, self.stage_dims[1:]):
            if b != 2 * a:
                raise UsageError(f"{self.name}: stage dims must double between stages, got {a} -> {b}")
        for kind, dim in zip(self.stage_kinds, self.stage_dims):
            if kind not in STAGE_KINDS:
                raise UsageError(f"{self.name}: unknown stage kind {kind!r}")
            if kind == "attention" and dim % self.head_dim:
                raise UsageError(f"{self.name}: attention stage width {dim} not divisible by {self.head_dim}")
        if self.stem_factor != 4 or not self.patch_embed_between_stages:
            raise UsageError(f"{self.name}: stem factor must be 4 with patch embeds between stages")
        if self.head_dim != B.HEAD_DIM:
            raise UsageError(f"{self.name}: head_dim is fixed at {B.HEAD_DIM}")
        if self.multiscale not in MULTISCALE_METHODS:
            raise UsageError(f"{self.name}: unknown multiscale method {self.multiscale!r}")
        hidden = self.ffn_ratio * self.stage_dims[0]
        if self.ffn_ratio <= 0 or any(abs(self.ffn_ratio * c - round(self.ffn_ratio * c)) > 1e-9 for c in self.stage_dims):
            raise UsageError(f"{self.name}: ffn_ratio {self.ffn_ratio} must give integer hidden widths ({hidden})")
        if self.projector_dim < 1 or self.in_channels < 1 or self.branches < 1:
            raise UsageError(f"{self.name}: projector_dim, in_channels and branches must be positive")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("stage_depths", "stage_dims", "stage_kinds"):
            d[k] = list(d[k])
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_BUILTINS = {
    "fastvithd": dict(
        stage_depths=(2, 12, 24, 4, 2),
        stage_dims=(96, 192, 384, 768, 1536),
        stage_kinds=("repmixer", "repmixer", "repmixer", "attention", "attention"),
        ffn_ratio=4.0,
    ),
    # MobileCLIP MCi2 stand-in; only its token math is meant to be faithful
    "fastvit_approx": dict(
        stage_depths=(2, 6, 10, 2),
        stage_dims=(64, 128, 256, 512),
        stage_kinds=("repmixer", "repmixer", "repmixer", "attention"),
        ffn_ratio=3.0,
    ),
    "fastvit_naive_scaled": dict(
        stage_depths=(2, 12, 16, 6),
        stage_dims=(128, 256, 512, 1024),
        stage_kinds=("repmixer", "repmixer", "attention", "attention"),
        ffn_ratio=3.0,
    ),
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin_config(name: str, **overrides) -> EncoderConfig:
    if name not in _BUILTINS:
        raise UsageError(f"unknown encoder config {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    kw = dict(_BUILTINS[name])
    kw.update(overrides)
    return EncoderConfig(name=name, **kw).validate()


def tiny_config(name: str = "fastvithd", width: int = 8, depth: int = 1, **overrides) -> EncoderConfig:
    """Same stage layout as a builtin, with narrow stages for fast tests.

    Attention stages need width divisible by 64, so ``width`` is the first
    stage width and must make every attention stage reach 64.
    """
    base = _BUILTINS[name]
    n = len(base["stage_dims"])
    kw = dict(
        stage_dims=tuple(width * 2**i for i in range(n)),
        stage_depths=(depth,) * n,
        projector_dim=32,
    )
    kw.update(overrides)
    return builtin_config(name, **kw)


@dataclass(frozen=True)
class MultiscaleParams:
    method: str
    taps: tuple  # stage indices
    pools: tuple  # per tap: ConvParams (dwconv, ratio > 1) or None
    proj: ConvParams  # 1x1, sum(tap widths) -> final width


@dataclass(frozen=True)
class ProjectorParams:
    fc1: ConvParams
    fc2: ConvParams


@dataclass(frozen=True)
class EncoderModel:
    config: EncoderConfig
    form: str
    stem: B.StemParams
    patch_embeds: tuple  # one per stage after the first
    stages: tuple  # tuple of per-stage block tuples
    multiscale: MultiscaleParams | None
    projector: ProjectorParams
    seed: int | None = None

    def __post_init__(self):
        cfg = self.config
        if len(self.stages) != cfg.num_stages or len(self.patch_embeds) != cfg.num_stages - 1:
            raise ShapeError("stage or patch-embed count does not match config")
        for depth, stage in zip(cfg.stage_depths, self.stages):
            if len(stage) != depth:
                raise ShapeError(f"stage has {len(stage)} blocks, config says {depth}")
        forms = {self.stem.form, *(p.form for p in self.patch_embeds)}
        forms |= {b.form for stage in self.stages for b in stage}
        if forms != {self.form}:
            raise ShapeError(f"model form {self.form!r} but blocks have forms {sorted(forms)}")

    def named_blocks(self):
        """(block_id, params) in forward order, foldable blocks only."""
        yield "stem", self.stem
        for i, stage in enumerate(self.stages):
            if i > 0:
                yield f"stage{i + 1}.embed", self.patch_embeds[i - 1]
            for j, blk in enumerate(stage):
                yield f"stage{i + 1}.block{j}", blk

    def num_params(self) -> int:
        total = B.num_params(self.stem) + B.num_params(self.patch_embeds) + B.num_params(self.stages)
        return total + B.num_params(self.multiscale) + B.num_params(self.projector)

    def replace_blocks(self, form: str, mapping: dict) -> "EncoderModel":
        """Copy with every block id in ``mapping`` swapped for its new params."""
        stem = mapping.get("stem", self.stem)
        embeds = tuple(mapping.get(f"stage{i + 2}.embed", p) for i, p in enumerate(self.patch_embeds))
        stages = tuple(
            tuple(mapping.get(f"stage{i + 1}.block{j}", b) for j, b in enumerate(stage))
            for i, stage in enumerate(self.stages)
        )
        return dataclasses.replace(self, form=form, stem=stem, patch_embeds=embeds, stages=stages)


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray  # (n, seq, dim)
    grid: tuple  # (gh, gw)

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.grid[0] * self.grid[1]:
            raise ShapeError(f"token grid {self.grid} inconsistent with tokens {self.tokens.shape}")

    @property
    def count(self) -> int:
        return self.tokens.shape[1]


# ------------------------------------------------------------------ build


def build(config: EncoderConfig, seed: int = 0) -> EncoderModel:
    """Randomly initialise a train-form model; deterministic in (config, seed)."""
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    dims = cfg.stage_dims
    stem = B.make_stem(rng, dims[0], cfg.in_channels, cfg.branches)
    embeds, stages = [], []
    for i, (depth, dim, kind) in enumerate(zip(cfg.stage_depths, dims, cfg.stage_kinds)):
        if i > 0:
            embeds.append(B.make_patch_embed(rng, dims[i - 1], dim, cfg.branches))
        make = B.make_repmixer_block if kind == "repmixer" else B.make_attn_block
        stages.append(tuple(make(rng, dim, cfg.ffn_ratio) for _ in range(depth)))

    multiscale = None
    if cfg.multiscale != "none":
        last = cfg.num_stages - 1
        pools = []
        for t in cfg.taps:
            ratio = 2 ** (last - t)
            if cfg.multiscale == "dwconv" and ratio > 1:
                pools.append(B.random_conv(rng, dims[t], dims[t], ratio, stride=ratio, groups=dims[t], padding=0))
            else:
                pools.append(None)
        fused = sum(dims[t] for t in cfg.taps)
        multiscale = MultiscaleParams(
            method=cfg.multiscale,
            taps=cfg.taps,
            pools=tuple(pools),
            proj=B.random_conv(rng, cfg.final_dim, fused, 1),
        )
    projector = ProjectorParams(
        fc1=B.random_conv(rng, cfg.projector_dim, cfg.final_dim, 1),
        fc2=B.random_conv(rng, cfg.projector_dim, cfg.projector_dim, 1),
    )
    return EncoderModel(
        config=cfg,
        form=B.TRAIN,
        stem=stem,
        patch_embeds=tuple(embeds),
        stages=tuple(stages),
        multiscale=multiscale,
        projector=projector,
        seed=seed,
    )


# ---------------------------------------------------------------- forward


def check_resolution(config: EncoderConfig, h: int, w: int | None = None) -> None:
    w = h if w is None else w
    f = config.downsample_factor
    if h % f or w % f or h < f or w < f:
        raise ShapeError(f"input resolution {h}x{w} must be a positive multiple of {f} for {config.name}")


def multiscale_aggregate(features, params: MultiscaleParams, target_grid) -> np.ndarray:
    """Bring every tapped feature map to ``target_grid``, concat channels, 1x1 project."""
    gh, gw = target_grid
    pooled = []
    for feat, pool in zip(features, params.pools):
        h, w = feat.shape[2:]
        if h % gh or w % gw or h // gh != w // gw:
            raise ShapeError(f"feature {h}x{w} cannot be pooled to {gh}x{gw} by an integer ratio")
        ratio = h // gh
        if ratio == 1:
            pooled.append(feat)
        elif params.method == "avgpool":
            pooled.append(avg_pool(feat, ratio, ratio))
        elif params.method == "dwconv":
            if pool is None or pool.stride != ratio:
                raise ShapeError(f"no depthwise pooling conv for ratio {ratio}")
            pooled.append(conv2d(feat, pool))
        else:
            raise UsageError(f"unknown multiscale method {params.method!r}")
    return conv2d(np.concatenate(pooled, axis=1), params.proj)


def encode_features(model: EncoderModel, x: np.ndarray):
    """Run stem and stages; returns the per-stage output feature maps."""
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input (n, {cfg.in_channels}, h, w), got {x.shape}")
    check_resolution(cfg, x.shape[2], x.shape[3])
    y = B.stem_forward(np.asarray(x, dtype=DTYPE), model.stem)
    feats = []
    for i, stage in enumerate(model.stages):
        if i > 0:
            y = B.patch_embed_forward(y, model.patch_embeds[i - 1])
        for blk in stage:
            y = B.block_forward(y, blk)
        feats.append(y)
    return feats


def forward(model: EncoderModel, x: np.ndarray) -> TokenGrid:
    feats = encode_features(model, x)
    y = feats[-1]
    grid = y.shape[2:]
    if model.multiscale is not None:
        y = multiscale_aggregate([feats[t] for t in model.multiscale.taps], model.multiscale, grid)
    p = model.projector
    y = conv2d(gelu(conv2d(y, p.fc1)), p.fc2)
    n, d = y.shape[:2]
    tokens = np.ascontiguousarray(y.reshape(n, d, -1).transpose(0, 2, 1))
    return TokenGrid(tokens=tokens, grid=(int(grid[0]), int(grid[1])))


def token_count(config: EncoderConfig, h: int, w: int | None = None) -> int:
    w = h if w is None else w
    check_resolution(config, h, w)
    f = config.downsample_factor
    return (h // f) * (w // f)


# ------------------------------------------------------- analytic counting


def _conv_p(out_ch, in_ch, k, groups=1):
    return out_ch * (in_ch // groups) * k * k + out_ch


def count_params(config: EncoderConfig, form: str = B.INFERENCE) -> int:
    """Exact parameter count from the config alone (no model is built)."""
    cfg = config.validate()
    if form not in B.FORMS:
        raise UsageError(f"unknown form {form!r}")
    train = form == B.TRAIN
    bn = (lambda c: 4 * c) if train else (lambda c: 0)
    k = cfg.branches if train else 1

    def embed(cin, cout):
        return k * (_conv_p(cin, cin, 7, cin) + bn(cin)) + _conv_p(cout, cin, 1) + bn(cout)

    def ffn(c):
        h = round(cfg.ffn_ratio * c)
        return _conv_p(c, c, 7, c) + bn(c) + _conv_p(h, c, 1) + _conv_p(c, h, 1)

    dims = cfg.stage_dims
    total = _conv_p(dims[0], cfg.in_channels, 3) + bn(dims[0]) + embed(dims[0], dims[0])
    for i, (depth, c, kind) in enumerate(zip(cfg.stage_depths, dims, cfg.stage_kinds)):
        if i > 0:
            total += embed(dims[i - 1], c)
        if kind == "repmixer":
            blk = _conv_p(c, c, 3, c) + bn(c) + ffn(c)
        else:
            blk = _conv_p(c, c, 7, c) + 2 * c + 4 * _conv_p(c, c, 1) + ffn(c)
        total += depth * blk
    if cfg.multiscale != "none":
        last = cfg.num_stages - 1
        for t in cfg.taps:
            r = 2 ** (last - t)
            if cfg.multiscale == "dwconv" and r > 1:
                total += _conv_p(dims[t], dims[t], r, dims[t])
        total += _conv_p(cfg.final_dim, sum(dims[t] for t in cfg.taps), 1)
    total += _conv_p(cfg.projector_dim, cfg.final_dim, 1) + _conv_p(cfg.projector_dim, cfg.projector_dim, 1)
    return total


def flops_breakdown(config: EncoderConfig, res: int, form: str = B.INFERENCE) -> dict:
    """Multiply-accumulate counts per component for a res x res input.

    Convs count out * in/groups * k^2 per output pixel; batch norms (train
    form only) one MAC per element; attention counts both N x N matmuls.
    Elementwise activations, softmax and layer norm are not counted.
    """
    cfg = config.validate()
    check_resolution(cfg, res)
    if form not in B.FORMS:
        raise UsageError(f"unknown form {form!r}")
    train = form == B.TRAIN
    k = cfg.branches if train else 1
    out: dict[str, int] = {}

    def add(key, v):
        out[key] = out.get(key, 0) + int(v)

    def conv(key, cout, cin, ks, hw, groups=1):
        add(key, cout * (cin // groups) * ks * ks * hw)

    def bn(key, c, hw):
        if train:
            add(key, c * hw)

    dims = cfg.stage_dims
    s = res // 2
    conv("stem", dims[0], cfg.in_channels, 3, s * s)
    bn("stem", dims[0], s * s)
    s //= 2
    for _ in range(k):
        conv("stem", dims[0], dims[0], 7, s * s, dims[0])
        bn("stem", dims[0], s * s)
    conv("stem", dims[0], dims[0], 1, s * s)
    bn("stem", dims[0], s * s)

    for i, (depth, c, kind) in enumerate(zip(cfg.stage_depths, dims, cfg.stage_kinds)):
        tag = f"stage{i + 1}"
        if i > 0:
            cin = dims[i - 1]
            s //= 2
            for _ in range(k):
                conv(f"{tag}.embed", cin, cin, 7, s * s, cin)
                bn(f"{tag}.embed", cin, s * s)
            conv(f"{tag}.embed", c, cin, 1, s * s)
            bn(f"{tag}.embed", c, s * s)
        hw = s * s
        hidden = round(cfg.ffn_ratio * c)
        for _ in range(depth):
            if kind == "repmixer":
                conv(f"{tag}.mixer", c, c, 3, hw, c)
                bn(f"{tag}.mixer", c, hw)
            else:
                conv(f"{tag}.cpe", c, c, 7, hw, c)
                conv(f"{tag}.qkvo", 4 * c, c, 1, hw)
                add(f"{tag}.attention", 2 * hw * hw * c)
            conv(f"{tag}.ffn", c, c, 7, hw, c)
            bn(f"{tag}.ffn", c, hw)
            conv(f"{tag}.ffn", hidden, c, 1, hw)
            conv(f"{tag}.ffn", c, hidden, 1, hw)

    g = s * s
    if cfg.multiscale != "none":
        last = cfg.num_stages - 1
        for t in cfg.taps:
            r = 2 ** (last - t)
            if cfg.multiscale == "dwconv" and r > 1:
                conv("multiscale", dims[t], dims[t], r, g, dims[t])
        conv("multiscale", cfg.final_dim, sum(dims[t] for t in cfg.taps), 1, g)
    conv("projector", cfg.projector_dim, cfg.final_dim, 1, g)
    conv("projector", cfg.projector_dim, cfg.projector_dim, 1, g)
    return out


def count_flops(config: EncoderConfig, res: int, form: str = B.INFERENCE) -> int:
    return sum(flops_breakdown(config, res, form).values())
