"""On-disk model format: a JSON manifest plus one FVT1 file per array.

The manifest mirrors the parameter dataclass tree. Arrays become
``{"tensor": filename, "shape": [...]}`` leaves; non-rank-4 arrays are stored
with leading unit dims and reshaped on load.
"""

from __future__ import annotations

import json
from dataclasses import fields, is_dataclass
from pathlib import Path

import numpy as np

from . import blocks as B
from .encoder import EncoderConfig, EncoderModel, MultiscaleParams, ProjectorParams
from .errors import FormatError, FvbError, UsageError
from .tensor import DTYPE, BnParams, ConvParams, read_fvt, write_fvt

MANIFEST_FORMAT = "fvb-model"
MANIFEST_VERSION = 1

_TYPES = {
    cls.__name__: cls
    for cls in (
        ConvParams,
        BnParams,
        B.PatchEmbedParams,
        B.StemParams,
        B.RepMixerParams,
        B.ConvFfnParams,
        B.AttnBlockParams,
        B.RepMixerBlockParams,
        MultiscaleParams,
        ProjectorParams,
    )
}


def _encode(obj, name: str, out: dict):
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    if isinstance(obj, np.ndarray):
        fname = f"{name}.fvt"
        out[fname] = obj
        return {"tensor": fname, "shape": list(obj.shape)}
    if is_dataclass(obj):
        return {
            "type": type(obj).__name__,
            "fields": {f.name: _encode(getattr(obj, f.name), f"{name}.{f.name}", out) for f in fields(obj)},
        }
    if isinstance(obj, (tuple, list)):
        return {"items": [_encode(v, f"{name}.{i}", out) for i, v in enumerate(obj)]}
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _decode(node, root: Path):
    if node is None or isinstance(node, (bool, int, float, str)):
        return node
    if not isinstance(node, dict):
        raise FormatError(f"unexpected manifest node {node!r}")
    if "tensor" in node:
        path = root / node["tensor"]
        try:
            arr = read_fvt(path)
        except UsageError as exc:
            raise FormatError(f"missing tensor file: {exc}") from None
        shape = tuple(node["shape"])
        if int(np.prod(shape)) != arr.size:
            raise FormatError(f"{path}: holds {arr.size} values, manifest expects shape {shape}")
        return arr.reshape(shape).astype(DTYPE)
    if "items" in node:
        return tuple(_decode(v, root) for v in node["items"])
    if "type" in node:
        cls = _TYPES.get(node["type"])
        if cls is None:
            raise FormatError(f"unknown parameter type {node['type']!r}")
        kwargs = {k: _decode(v, root) for k, v in node["fields"].items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise FormatError(f"bad fields for {node['type']}: {exc}") from None
    raise FormatError(f"unrecognised manifest node with keys {sorted(node)}")


def _as_rank4(a: np.ndarray) -> np.ndarray:
    return a.reshape((1,) * (4 - a.ndim) + a.shape) if a.ndim < 4 else a


def save_model(model: EncoderModel, directory) -> Path:
    """Write ``manifest.json`` and tensor files into ``directory``; returns the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    arrays: dict = {}
    block_nodes = [
        {"id": bid, "kind": B.block_kind(p), "form": p.form, "params": _encode(p, bid, arrays)}
        for bid, p in model.named_blocks()
    ]
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "form": model.form,
        "seed": model.seed,
        "blocks": block_nodes,
        "multiscale": _encode(model.multiscale, "multiscale", arrays),
        "projector": _encode(model.projector, "projector", arrays),
    }
    for fname, arr in arrays.items():
        write_fvt(root / fname, _as_rank4(arr))
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _manifest_path(path) -> Path:
    path = Path(path)
    return path / "manifest.json" if path.is_dir() else path


def load_model(path) -> EncoderModel:
    """Inverse of ``save_model``; accepts the manifest or its directory."""
    path = _manifest_path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a model manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    try:
        cfg = EncoderConfig(**doc["config"]).validate()
        root = path.parent
        blocks = {b["id"]: _decode(b["params"], root) for b in doc["blocks"]}
        stages = tuple(
            tuple(blocks[f"stage{i + 1}.block{j}"] for j in range(depth))
            for i, depth in enumerate(cfg.stage_depths)
        )
        embeds = tuple(blocks[f"stage{i + 1}.embed"] for i in range(1, cfg.num_stages))
        return EncoderModel(
            config=cfg,
            form=doc["form"],
            stem=blocks["stem"],
            patch_embeds=embeds,
            stages=stages,
            multiscale=_decode(doc["multiscale"], root),
            projector=_decode(doc["projector"], root),
            seed=doc.get("seed"),
        )
    except FormatError:
        raise
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete manifest ({exc})") from None
    except FvbError as exc:
        raise FormatError(f"{path}: inconsistent model: {exc}") from None
