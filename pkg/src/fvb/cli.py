"""``fvb`` command-line entry point."""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, budget, encoder, reparam, serialize, tiler
from .blocks import FORMS, INFERENCE, TRAIN
from .errors import FormatError, FvbError, ShapeError, StateError, UsageError
from .ppm import read_ppm
from .report import pareto_svg, summary_markdown
from .tensor import FVT_MAGIC, decode_fvt, encode_fvt, resize_bilinear

log = logging.getLogger("fvb")

TTFT_MISMATCH = 0.01
FIXTURES = {"table6": "table6_prefill.csv", "llava15": "llava15_vicuna7b.csv"}

_INT_LIST = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["encoder"],
    "properties": {
        "encoder": {"enum": list(encoder.BUILTIN_NAMES)},
        "overrides": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stage_depths": _INT_LIST,
                "stage_dims": _INT_LIST,
                "stage_kinds": {"type": "array", "items": {"enum": list(encoder.STAGE_KINDS)}, "minItems": 1},
                "ffn_ratio": {"type": "number", "exclusiveMinimum": 0},
                "projector_dim": {"type": "integer", "minimum": 1},
                "branches": {"type": "integer", "minimum": 1},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "resolution": {"type": "integer", "minimum": 1},
        "form": {"enum": list(FORMS)},
        "multiscale": {"enum": list(encoder.MULTISCALE_METHODS)},
        "tile": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode"],
            "properties": {
                "mode": {"enum": [tiler.STATIC, tiler.DYNAMIC]},
                "tile_size": {"type": "integer", "minimum": 1},
                "grid": {"type": "string", "pattern": "^[0-9]+x[0-9]+$"},
                "include_base": {"type": "boolean"},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tokens": {"type": "string"},
                "sidecar": {"type": "string"},
                "dir": {"type": "string"},
            },
        },
    },
}


# ----------------------------------------------------------------- helpers


def load_run_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"{path}: run config invalid at {where}: {exc.message}") from None
    return doc


def _run_config(args) -> dict:
    return load_run_config(args.run_config) if getattr(args, "run_config", None) else {}


def _pick(cli_value, rc: dict, key: str, default=None):
    if cli_value is not None:
        return cli_value
    return rc.get(key, default)


def _config(args, rc: dict) -> encoder.EncoderConfig:
    name = getattr(args, "config", None) or rc.get("encoder", "fastvithd")
    overrides = dict(rc.get("overrides", {}))
    ms = getattr(args, "multiscale", None) or rc.get("multiscale")
    if ms:
        overrides["multiscale"] = ms
    return encoder.builtin_config(name, **overrides)


def _model(args, rc: dict) -> encoder.EncoderModel:
    if getattr(args, "manifest", None):
        return serialize.load_model(args.manifest)
    seed = _pick(args.seed, rc, "seed", 0)
    return encoder.build(_config(args, rc), seed=seed)


def _as_form(model, form: str):
    if model.form == form:
        return model
    if form == TRAIN:
        raise StateError("cannot unfold an inference-form model back to train form")
    folded, _ = reparam.fold_model(model, probes=0)
    return folded


def _write(path, data) -> None:
    path = Path(path)
    try:
        if path.parent != Path(""):
            path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            path.write_text(data)
        else:
            path.write_bytes(data)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _emit(text: str, path) -> None:
    if path:
        _write(path, text)
    else:
        sys.stdout.write(text)


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _csv_source(name: str) -> Path:
    path = Path(name)
    if not path.exists() and name in FIXTURES:
        return budget.fixture_path(FIXTURES[name])
    return path


def _read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        head = path.open("rb").read(4)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    if head == FVT_MAGIC:
        x = decode_fvt(path.read_bytes(), str(path))
        if x.shape[0] != 1:
            raise ShapeError(f"{path}: expected a single image, got batch of {x.shape[0]}")
        return x
    return read_ppm(path)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise UsageError(f"expected on/off, got {text!r}")
    return text == "on"


# ---------------------------------------------------------------- commands


def cmd_encode(args) -> int:
    rc = _run_config(args)
    outputs = rc.get("outputs", {})
    out = args.out or outputs.get("tokens")
    if not out:
        raise UsageError("no output path: pass --out or set outputs.tokens")
    sidecar = args.sidecar or outputs.get("sidecar") or f"{out}.json"
    form = _pick(args.form, rc, "form", INFERENCE)

    image = _read_image(args.image)
    model = _model(args, rc)
    model = _as_form(model, form)
    cfg = model.config

    res = _pick(args.res, rc, "resolution")
    if res is not None:
        if res < 1:
            raise ShapeError(f"invalid resolution {res}")
        if image.shape[2:] != (res, res):
            image = resize_bilinear(image, res, res)

    tile = dict(rc.get("tile", {}))
    mode = args.tile_mode or tile.get("mode", tiler.STATIC)
    grid = tiler.parse_grid(args.grid or tile.get("grid", "1x1"))
    include_base = _on_off(args.base) if args.base else tile.get("include_base", True)
    tile_size = args.tile_size or tile.get("tile_size")
    plan = tiler.plan(
        mode,
        image.shape[2:],
        tile_size=tile_size,
        grid=grid,
        downsample_factor=cfg.downsample_factor,
        include_base=include_base,
    )
    result = tiler.encode_tiled(model, image, plan, workers=args.workers)
    n, seq, dim = result.tokens.shape
    _write(out, encode_fvt(result.tokens.reshape(n, seq, dim, 1)))
    meta = {
        "tokens_file": Path(out).name,
        "layout": "n,seq,dim,1",
        "shape": [n, seq, dim, 1],
        "grid": list(result.grid),
        "token_count": int(seq),
        "encoder": cfg.name,
        "config_hash": cfg.digest(),
        "seed": model.seed,
        "form": model.form,
        "input_res": list(image.shape[2:]),
        "tile": {
            "mode": plan.mode,
            "grid": list(plan.grid) if plan.grid else None,
            "tile_size": plan.tile_size,
            "include_base": plan.include_base if plan.mode == tiler.DYNAMIC else None,
        },
    }
    _write(sidecar, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d tokens (grid %dx%d) to %s", seq, *result.grid, out)
    return 0


def cmd_build(args) -> int:
    rc = _run_config(args)
    model = _model(args, rc)
    model = _as_form(model, _pick(args.form, rc, "form", TRAIN))
    out = args.out or rc.get("outputs", {}).get("dir")
    if not out:
        raise UsageError("no output directory: pass --out or set outputs.dir")
    try:
        path = serialize.save_model(model, out)
    except OSError as exc:
        raise UsageError(f"cannot write model to {out}: {exc.strerror}") from None
    print(path)
    return 0


def cmd_fold_check(args) -> int:
    rc = _run_config(args)
    model = _model(args, rc)
    if model.form != TRAIN:
        raise StateError("model is already folded")
    folded, reports = reparam.fold_model(model, probes=args.probes, seed=args.probe_seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("block_id", "kind", "max_abs_diff", "probes", "probe_seed", "ok"))
    for r in reports:
        writer.writerow((r.block_id, r.kind, f"{r.max_abs_diff:.6e}", r.probe_count, r.probe_seed, int(r.ok)))
    _emit(buf.getvalue(), args.csv)
    if args.out:
        serialize.save_model(folded, args.out)
    bad = [r for r in reports if not r.ok]
    worst = max((r.max_abs_diff for r in reports), default=0.0)
    log.info("%d blocks folded, worst max abs diff %.3e", len(reports), worst)
    if bad:
        log.error("%d blocks exceed tolerance %.0e: %s", len(bad), reparam.FOLD_TOLERANCE, ", ".join(r.block_id for r in bad))
        return 1
    return 0


def cmd_tokens(args) -> int:
    if args.family in budget.FAMILIES:
        n = budget.visual_tokens(budget.family(args.family), args.res)
    elif args.family in encoder.BUILTIN_NAMES:
        n = encoder.token_count(encoder.builtin_config(args.family), args.res)
    else:
        raise UsageError(f"unknown encoder family {args.family!r}; choose from {', '.join(budget.FAMILIES)}")
    print(n)
    return 0


def cmd_params(args) -> int:
    rc = _run_config(args)
    cfg = _config(args, rc)
    print(encoder.count_params(cfg, args.form))
    return 0


def cmd_flops(args) -> int:
    rc = _run_config(args)
    cfg = _config(args, rc)
    if args.breakdown:
        for key, v in encoder.flops_breakdown(cfg, args.res, args.form).items():
            print(f"{key}\t{v}")
    print(encoder.count_flops(cfg, args.res, args.form))
    return 0


def cmd_tile(args) -> int:
    rc = _run_config(args)
    cfg = _config(args, rc)
    p = tiler.plan(
        args.mode,
        args.res,
        tile_size=args.tile_size,
        grid=tiler.parse_grid(args.grid) if args.grid else None,
        downsample_factor=cfg.downsample_factor,
        include_base=_on_off(args.base),
    )
    doc = {
        "mode": p.mode,
        "input_res": list(p.input_res),
        "canvas": list(p.canvas),
        "grid": list(p.grid) if p.grid else None,
        "tile_size": p.tile_size,
        "include_base": p.include_base if p.mode == tiler.DYNAMIC else None,
        "encodings": p.num_encodings,
        "tokens": p.token_count(),
    }
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    rc = _run_config(args)
    if args.res:
        resolutions = _int_list(args.res)
    elif "resolution" in rc:
        resolutions = [rc["resolution"]]
    else:
        raise UsageError("no resolutions: pass --res")
    model = _model(args, rc)
    for r in resolutions:
        encoder.check_resolution(model.config, r)
    model = _as_form(model, _pick(args.form, rc, "form", INFERENCE))
    records = bench.sweep(model, resolutions, warmup=args.warmup, iters=args.iters, threads=args.threads)
    _emit(bench.records_to_csv(records), args.out)
    return 0


def _ttft_table(rows) -> tuple:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow((*budget.CSV_FIELDS[:-1], "ttft_ms", "reported_ttft_ms", "status"))
    flagged = []
    for row in rows:
        p = row.point
        if abs(p.ttft_ms - (p.enc_latency_ms + p.prefill_ms)) > 1e-9:
            raise FormatError(f"line {row.line}: TTFT is not encoder + prefill latency")
        status = ""
        if row.reported_ttft_ms is not None:
            rel = abs(p.ttft_ms - row.reported_ttft_ms) / max(abs(row.reported_ttft_ms), 1e-12)
            status = "ok" if rel <= TTFT_MISMATCH else "MISMATCH"
            if status == "MISMATCH":
                flagged.append((row, rel))
        r = p.as_row()
        writer.writerow(
            (
                r["encoder"],
                r["llm"],
                r["resolution"],
                r["visual_tokens"],
                r["enc_latency_ms"],
                r["prefill_ms"],
                budget._fmt(p.ttft_ms),
                "" if row.reported_ttft_ms is None else budget._fmt(row.reported_ttft_ms),
                status,
            )
        )
    return buf.getvalue(), flagged


def cmd_ttft(args) -> int:
    rows = budget.load_points_csv(_csv_source(args.csv))
    text, flagged = _ttft_table(rows)
    _emit(text, args.out)
    for row, rel in flagged:
        p = row.point
        log.warning(
            "line %d (%s/%s): computed %.1f ms vs reported %.1f ms (%.1f%% off)",
            row.line, p.encoder, p.llm, p.ttft_ms, row.reported_ttft_ms, 100 * rel,
        )
    return 1 if flagged and args.strict else 0


def _pareto_points(path, skip_missing: bool) -> list:
    rows = budget.load_points_csv(_csv_source(path))
    points = []
    for row in rows:
        if row.point.accuracy is None:
            if skip_missing:
                continue
            raise FormatError(f"line {row.line}: missing value for accuracy")
        points.append(row.point)
    if not points:
        raise FormatError(f"{path}: no rows with accuracy")
    return points


def cmd_pareto(args) -> int:
    points = _pareto_points(args.csv, args.skip_missing)
    front = budget.pareto_frontier(points)
    _emit(budget.write_frontier_csv(points, front), args.out)
    if args.svg:
        _write(args.svg, pareto_svg(points, front, log_x=args.log_x))
    return 0


def cmd_report(args) -> int:
    rc = _run_config(args)
    out = Path(args.out_dir)
    cfg = None if args.manifest else _config(args, rc)
    records = []
    if args.res:
        model = _model(args, rc)
        cfg = model.config
        resolutions = _int_list(args.res)
        for r in resolutions:
            encoder.check_resolution(cfg, r)
        model = _as_form(model, INFERENCE)
        records = bench.sweep(model, resolutions, warmup=args.warmup, iters=args.iters, threads=args.threads)
        _write(out / "bench.csv", bench.records_to_csv(records))

    rows = budget.load_points_csv(_csv_source(args.csv))
    text, flagged = _ttft_table(rows)
    _write(out / "ttft.csv", text)
    points = [r.point for r in rows if r.point.accuracy is not None]
    front = budget.pareto_frontier(points)
    if points:
        _write(out / "pareto.csv", budget.write_frontier_csv(points, front))
        _write(out / "pareto.svg", pareto_svg(points, front, log_x=True))
    if cfg is None:
        cfg = serialize.load_model(args.manifest).config
    summary = summary_markdown(cfg.name, encoder.count_params(cfg), records, [r.point for r in rows], front)
    if flagged:
        summary += "\n## Reported TTFT mismatches\n\n" + "".join(
            f"- line {r.line}: {r.point.encoder}/{r.point.llm} computed {r.point.ttft_ms:.1f} ms, "
            f"reported {r.reported_ttft_ms:g} ms\n"
            for r, _ in flagged
        )
    _write(out / "summary.md", summary)
    print(out)
    return 0


# ------------------------------------------------------------------ parser


def _model_args(p, manifest=True) -> None:
    p.add_argument("--config", choices=encoder.BUILTIN_NAMES, help="builtin encoder config")
    p.add_argument("--run-config", metavar="JSON", help="run configuration file")
    p.add_argument("--seed", type=int, help="init seed (default 0)")
    p.add_argument("--multiscale", choices=encoder.MULTISCALE_METHODS)
    if manifest:
        p.add_argument("--manifest", help="load a saved model instead of building one")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fvb", description="Hybrid vision encoder toolkit and latency budgeting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a PPM or FVT1 image into visual tokens")
    _model_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="token file (FVT1)")
    p.add_argument("--sidecar", help="JSON sidecar path (default: OUT.json)")
    p.add_argument("--res", type=int, help="resize the image to RES x RES first")
    p.add_argument("--form", choices=FORMS)
    p.add_argument("--tile-mode", choices=(tiler.STATIC, tiler.DYNAMIC))
    p.add_argument("--tile-size", type=int)
    p.add_argument("--grid", help="tile grid, e.g. 2x2")
    p.add_argument("--base", help="append base thumbnail: on/off")
    p.add_argument("--workers", type=int, default=1, help="tiles encoded concurrently")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("build", help="build a seeded model and save it as a manifest")
    _model_args(p, manifest=False)
    p.add_argument("--form", choices=FORMS)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("fold-check", help="fold a train-form model and verify equivalence per block")
    _model_args(p)
    p.add_argument("--probes", type=int, default=reparam.DEFAULT_PROBES)
    p.add_argument("--probe-seed", type=int, default=reparam.DEFAULT_PROBE_SEED)
    p.add_argument("--csv", help="per-block report (default: stdout)")
    p.add_argument("--out", help="write the folded model to this directory")
    p.set_defaults(func=cmd_fold_check)

    p = sub.add_parser("tokens", help="visual token count for an encoder family at a resolution")
    p.add_argument("family")
    p.add_argument("res", type=int)
    p.set_defaults(func=cmd_tokens)

    p = sub.add_parser("params", help="analytic parameter count")
    p.add_argument("config", nargs="?", choices=encoder.BUILTIN_NAMES)
    p.add_argument("--run-config", metavar="JSON")
    p.add_argument("--form", choices=FORMS, default=INFERENCE)
    p.add_argument("--multiscale", choices=encoder.MULTISCALE_METHODS)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", help="analytic multiply-accumulate count")
    p.add_argument("config", nargs="?", choices=encoder.BUILTIN_NAMES)
    p.add_argument("res", type=int)
    p.add_argument("--run-config", metavar="JSON")
    p.add_argument("--form", choices=FORMS, default=INFERENCE)
    p.add_argument("--multiscale", choices=encoder.MULTISCALE_METHODS)
    p.add_argument("--breakdown", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("tile", help="describe a static or dynamic tiling plan")
    p.add_argument("--config", choices=encoder.BUILTIN_NAMES)
    p.add_argument("--run-config", metavar="JSON")
    p.add_argument("--mode", choices=(tiler.STATIC, tiler.DYNAMIC), default=tiler.STATIC)
    p.add_argument("--res", type=int, required=True, help="input image resolution")
    p.add_argument("--tile", "--tile-size", dest="tile_size", type=int)
    p.add_argument("--grid")
    p.add_argument("--base", default="on")
    p.add_argument("--multiscale", choices=encoder.MULTISCALE_METHODS)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("bench", help="time encoder forward passes over resolutions")
    _model_args(p)
    p.add_argument("--res", help="comma-separated resolutions")
    p.add_argument("--form", choices=FORMS)
    p.add_argument("--warmup", type=int, default=bench.DEFAULT_WARMUP)
    p.add_argument("--iters", type=int, default=bench.DEFAULT_ITERS)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ttft", help="recompute TTFT for each CSV row and flag mismatches")
    p.add_argument("csv", help=f"CSV path or bundled fixture ({', '.join(FIXTURES)})")
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 1 on any mismatch")
    p.set_defaults(func=cmd_ttft)

    p = sub.add_parser("pareto", help="mark the (TTFT, accuracy) Pareto frontier")
    p.add_argument("csv", help=f"CSV path or bundled fixture ({', '.join(FIXTURES)})")
    p.add_argument("--out")
    p.add_argument("--svg")
    p.add_argument("--log-x", action="store_true")
    p.add_argument("--skip-missing", action="store_true", help="drop rows without accuracy")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("report", help="bench + ttft + pareto bundled into one directory")
    _model_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--csv", default="llava15")
    p.add_argument("--res", help="comma-separated bench resolutions (omit to skip timing)")
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    limit = os.environ.get("FVB_THREADS")
    try:
        ctx = threadpool_limits(limits=bench.thread_cap(10**6)) if limit else contextlib.nullcontext()
        with ctx:
            return args.func(args)
    except FvbError as exc:
        print(f"fvb: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
