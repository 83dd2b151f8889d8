"""Visual-token accounting, LLM prefill interpolation, TTFT composition and
(TTFT, accuracy) Pareto frontiers."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, UsageError

PATCH = "patch"
HIERARCHICAL = "hierarchical"

CSV_FIELDS = ("encoder", "llm", "resolution", "visual_tokens", "enc_latency_ms", "prefill_ms", "accuracy")
DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class EncoderFamily:
    name: str
    kind: str
    factor: int  # patch size for ``patch`` kind, total downsampling otherwise

    def __post_init__(self):
        if self.kind not in (PATCH, HIERARCHICAL):
            raise UsageError(f"unknown encoder family kind {self.kind!r}")
        if self.factor < 1:
            raise UsageError(f"{self.name}: factor must be positive")


FAMILIES = {
    f.name: f
    for f in (
        EncoderFamily("vit14", PATCH, 14),
        EncoderFamily("vit16", PATCH, 16),
        EncoderFamily("fastvit", HIERARCHICAL, 32),
        EncoderFamily("fastvithd", HIERARCHICAL, 64),
        EncoderFamily("convnext_l", HIERARCHICAL, 32),
        EncoderFamily("convnext_xxl", HIERARCHICAL, 32),
    )
}


def family(name: str) -> EncoderFamily:
    try:
        return FAMILIES[name]
    except KeyError:
        raise UsageError(f"unknown encoder family {name!r}; choose from {', '.join(FAMILIES)}") from None


def visual_tokens(fam: EncoderFamily, res: int) -> int:
    """(res / factor)^2; refuses to round."""
    if res < 1 or res % fam.factor:
        raise ShapeError(f"resolution {res} not divisible by {fam.name} factor {fam.factor}")
    return (res // fam.factor) ** 2


def token_density_ratio(a: EncoderFamily, b: EncoderFamily) -> float:
    """How many times fewer tokens ``a`` emits than ``b`` at equal resolution."""
    return (a.factor / b.factor) ** 2


@dataclass(frozen=True)
class LlmProfile:
    name: str
    prefill_points: tuple  # ((tokens, ms), ...) strictly increasing in tokens

    def __post_init__(self):
        pts = tuple((int(t), float(ms)) for t, ms in self.prefill_points)
        if not pts:
            raise UsageError(f"{self.name}: empty prefill profile")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise UsageError(f"{self.name}: prefill token counts must be strictly increasing")
        if any(ms < 0 or t < 0 for t, ms in pts):
            raise UsageError(f"{self.name}: negative token count or latency")
        object.__setattr__(self, "prefill_points", pts)


def prefill_latency(llm: LlmProfile, tokens: float) -> float:
    """Piecewise-linear in token count; linear extrapolation off either end.

    A single-point profile is treated as flat.
    """
    if tokens < 0:
        raise UsageError(f"token count must be non-negative, got {tokens}")
    pts = llm.prefill_points
    if len(pts) == 1:
        return pts[0][1]
    xs = [t for t, _ in pts]
    ys = [ms for _, ms in pts]
    if tokens < xs[0]:
        (x0, y0), (x1, y1) = pts[0], pts[1]
    elif tokens > xs[-1]:
        (x0, y0), (x1, y1) = pts[-2], pts[-1]
    else:
        return float(np.interp(tokens, xs, ys))
    return max(0.0, y0 + (tokens - x0) * (y1 - y0) / (x1 - x0))


def ttft(enc_latency_ms: float, prefill_ms: float) -> float:
    if enc_latency_ms < 0 or prefill_ms < 0:
        raise UsageError("latencies must be non-negative")
    return enc_latency_ms + prefill_ms


@dataclass(frozen=True)
class TtftPoint:
    encoder: str
    llm: str
    resolution: int
    visual_tokens: int
    enc_latency_ms: float
    prefill_ms: float
    accuracy: float | None = None
    ttft_ms: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "ttft_ms", ttft(self.enc_latency_ms, self.prefill_ms))

    def as_row(self) -> dict:
        return {
            "encoder": self.encoder,
            "llm": self.llm,
            "resolution": self.resolution,
            "visual_tokens": self.visual_tokens,
            "enc_latency_ms": _fmt(self.enc_latency_ms),
            "prefill_ms": _fmt(self.prefill_ms),
            "accuracy": "" if self.accuracy is None else _fmt(self.accuracy),
        }


def _fmt(v: float) -> str:
    return f"{v:.6g}" if abs(v) < 1e6 else repr(v)


def ttft_breakdown(point: TtftPoint) -> tuple:
    """(vision_fraction, prefill_fraction) of the point's TTFT."""
    if point.ttft_ms <= 0:
        raise UsageError("TTFT is zero; fractions undefined")
    v = point.enc_latency_ms / point.ttft_ms
    return v, 1.0 - v


@dataclass(frozen=True)
class ParetoFrontier:
    points: tuple  # sorted by ttft ascending, accuracy strictly increasing


def _require_accuracy(points) -> None:
    for i, p in enumerate(points):
        if p.accuracy is None or (isinstance(p.accuracy, float) and math.isnan(p.accuracy)):
            raise UsageError(f"point {i} ({p.encoder}/{p.llm}@{p.resolution}) has no accuracy")


def pareto_frontier(points) -> ParetoFrontier:
    """Points not dominated in (lower TTFT, higher accuracy).

    Exact duplicates in both coordinates collapse to the first occurrence
    in input order.
    """
    points = list(points)
    _require_accuracy(points)
    order = sorted(range(len(points)), key=lambda i: (points[i].ttft_ms, -points[i].accuracy, i))
    front, best = [], -math.inf
    for i in order:
        if points[i].accuracy > best:
            front.append(points[i])
            best = points[i].accuracy
    return ParetoFrontier(points=tuple(front))


def dominates(a: TtftPoint, b: TtftPoint) -> bool:
    return (
        a.ttft_ms <= b.ttft_ms
        and a.accuracy >= b.accuracy
        and (a.ttft_ms < b.ttft_ms or a.accuracy > b.accuracy)
    )


def pareto_oracle(points) -> list:
    """O(n^2) reference: keep each point no other point dominates, first duplicate wins."""
    points = list(points)
    _require_accuracy(points)
    keep = []
    for i, p in enumerate(points):
        if any(dominates(q, p) for j, q in enumerate(points) if j != i):
            continue
        if any((q.ttft_ms, q.accuracy) == (p.ttft_ms, p.accuracy) for q in points[:i]):
            continue
        keep.append(p)
    return sorted(keep, key=lambda p: p.ttft_ms)


# --------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvRow:
    line: int
    point: TtftPoint
    reported_ttft_ms: float | None


def _num(raw: str, col: str, line: int, kind=float, optional=False):
    raw = (raw or "").strip()
    if raw == "" or raw == "-":
        if optional:
            return None
        raise FormatError(f"line {line}: missing value for {col}")
    try:
        v = kind(raw)
    except ValueError:
        raise FormatError(f"line {line}: {col}={raw!r} is not a valid {kind.__name__}") from None
    if kind is float and not math.isfinite(v):
        raise FormatError(f"line {line}: {col} must be finite")
    return v


def load_points_csv(path) -> list:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    return read_points_csv(text)


def read_points_csv(text: str) -> list:
    """Parse TTFT-point CSV text into ``CsvRow`` objects.

    An optional ``ttft_ms`` column carries a reported TTFT to check against.
    """
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in CSV_FIELDS if c not in header]
    if missing:
        raise FormatError(f"line 1: missing columns {', '.join(missing)}")
    rows = []
    for rec in reader:
        line = reader.line_num
        if None in rec:
            raise FormatError(f"line {line}: more fields than header columns")
        if any(rec.get(c) is None for c in CSV_FIELDS):
            raise FormatError(f"line {line}: fewer fields than header columns")
        try:
            point = TtftPoint(
                encoder=rec["encoder"].strip(),
                llm=rec["llm"].strip(),
                resolution=_num(rec["resolution"], "resolution", line, int),
                visual_tokens=_num(rec["visual_tokens"], "visual_tokens", line, int),
                enc_latency_ms=_num(rec["enc_latency_ms"], "enc_latency_ms", line),
                prefill_ms=_num(rec["prefill_ms"], "prefill_ms", line),
                accuracy=_num(rec["accuracy"], "accuracy", line, optional=True),
            )
        except UsageError as exc:
            raise FormatError(f"line {line}: {exc}") from None
        reported = _num(rec.get("ttft_ms"), "ttft_ms", line, optional=True) if "ttft_ms" in header else None
        rows.append(CsvRow(line=line, point=point, reported_ttft_ms=reported))
    return rows


def write_frontier_csv(points, frontier: ParetoFrontier) -> str:
    on = {id(p) for p in frontier.points}
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[*CSV_FIELDS, "on_frontier"], lineterminator="\n")
    writer.writeheader()
    for p in points:
        writer.writerow({**p.as_row(), "on_frontier": int(id(p) in on)})
    return buf.getvalue()


def profiles_from_points(points) -> dict:
    """Per-LLM prefill profiles from measured (visual_tokens, prefill_ms) pairs.

    Repeated token counts for the same LLM are averaged.
    """
    acc: dict = {}
    for p in points:
        acc.setdefault(p.llm, {}).setdefault(p.visual_tokens, []).append(p.prefill_ms)
    return {
        llm: LlmProfile(llm, tuple((t, sum(v) / len(v)) for t, v in sorted(by_tok.items())))
        for llm, by_tok in acc.items()
    }


def fixture_path(name: str) -> Path:
    return DATA_DIR / name
