"""Plain-text renderings: SVG Pareto scatter and a markdown summary."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .budget import ParetoFrontier

WIDTH, HEIGHT = 640, 420
MARGIN = 56


def _scale(lo, hi, a, b, log=False):
    if log:
        lo, hi = math.log10(lo), math.log10(hi)
    if hi == lo:
        lo, hi = lo - 1, hi + 1

    def f(v):
        v = math.log10(v) if log else v
        return a + (v - lo) * (b - a) / (hi - lo)

    return f


def pareto_svg(points, frontier: ParetoFrontier, log_x: bool = False, title: str = "TTFT vs accuracy") -> str:
    """Scatter of every point with the frontier drawn as a polyline."""
    points = list(points)
    if not points:
        raise ValueError("nothing to plot")
    xs = [p.ttft_ms for p in points]
    ys = [p.accuracy for p in points]
    if log_x and min(xs) <= 0:
        raise ValueError("log x-axis needs positive TTFT values")
    pad_y = (max(ys) - min(ys)) * 0.05 or 1.0
    sx = _scale(min(xs), max(xs), MARGIN, WIDTH - MARGIN / 2, log_x)
    sy = _scale(min(ys) - pad_y, max(ys) + pad_y, HEIGHT - MARGIN, MARGIN / 2)
    on = {id(p) for p in frontier.points}

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN / 2}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{MARGIN}" y2="{MARGIN / 2}" stroke="black"/>',
        f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 16}" text-anchor="middle">'
        f'TTFT (ms{", log scale" if log_x else ""})</text>',
        f'<text x="16" y="{HEIGHT / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2:.1f})">accuracy</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{min(xs):.4g}</text>',
        f'<text x="{WIDTH - MARGIN / 2}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{max(xs):.4g}</text>',
        f'<text x="{MARGIN - 4}" y="{sy(min(ys)):.1f}" text-anchor="end">{min(ys):.4g}</text>',
        f'<text x="{MARGIN - 4}" y="{sy(max(ys)):.1f}" text-anchor="end">{max(ys):.4g}</text>',
    ]
    if len(frontier.points) > 1:
        pts = " ".join(f"{sx(p.ttft_ms):.2f},{sy(p.accuracy):.2f}" for p in frontier.points)
        out.append(f'<polyline points="{pts}" fill="none" stroke="#d62728" stroke-width="1.5"/>')
    for p in points:
        fill = "#d62728" if id(p) in on else "#1f77b4"
        label = escape(f"{p.encoder} / {p.llm} @ {p.resolution}: {p.ttft_ms:.1f} ms, {p.accuracy:g}")
        out.append(
            f'<circle cx="{sx(p.ttft_ms):.2f}" cy="{sy(p.accuracy):.2f}" r="3.5" fill="{fill}">'
            f"<title>{label}</title></circle>"
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def summary_markdown(config_name: str, params: int, bench_records, ttft_rows, frontier: ParetoFrontier) -> str:
    parts = [f"# Benchmark summary: {config_name}\n", f"Parameters (inference form): {params:,}\n"]
    if bench_records:
        parts.append("## Encoder latency on this host\n")
        parts.append(
            markdown_table(
                ("resolution", "tokens", "GMAC", "median ms", "p90 ms"),
                [
                    (r.resolution, r.tokens, f"{r.flops / 1e9:.2f}", f"{r.median_ms:.1f}", f"{r.p90_ms:.1f}")
                    for r in bench_records
                ],
            )
        )
    if ttft_rows:
        parts.append("## TTFT (encoder + prefill)\n")
        parts.append(
            markdown_table(
                ("encoder", "llm", "resolution", "tokens", "ttft ms", "vision share"),
                [
                    (p.encoder, p.llm, p.resolution, p.visual_tokens, f"{p.ttft_ms:.1f}", f"{p.enc_latency_ms / p.ttft_ms:.0%}")
                    for p in ttft_rows
                ],
            )
        )
    if frontier.points:
        parts.append("## Pareto frontier\n")
        parts.append(
            markdown_table(
                ("encoder", "llm", "resolution", "ttft ms", "accuracy"),
                [(p.encoder, p.llm, p.resolution, f"{p.ttft_ms:.1f}", f"{p.accuracy:g}") for p in frontier.points],
            )
        )
    return "\n".join(parts)
