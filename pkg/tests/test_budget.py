import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fvb import budget as BG
from fvb.errors import FormatError, ShapeError, UsageError
from oracles import dominated_brute


def fam(name):
    return BG.family(name)


@pytest.mark.parametrize(
    "name,res,tokens",
    [
        ("vit14", 336, 576),
        ("fastvithd", 512, 64),
        ("fastvithd", 768, 144),
        ("fastvithd", 1024, 256),
        ("convnext_l", 320, 100),
    ],
)
def test_visual_tokens(name, res, tokens):
    assert BG.visual_tokens(fam(name), res) == tokens


def test_visual_tokens_refuses_to_round():
    with pytest.raises(ShapeError):
        BG.visual_tokens(fam("vit14"), 340)
    with pytest.raises(UsageError):
        BG.family("resnet")
    with pytest.raises(UsageError):
        BG.EncoderFamily("bad", BG.PATCH, 0)


def test_token_density_ratio():
    assert BG.token_density_ratio(fam("fastvit"), fam("vit14")) == pytest.approx(5.22, abs=0.005)
    assert BG.token_density_ratio(fam("fastvithd"), fam("fastvit")) == 4.0
    assert BG.token_density_ratio(fam("vit16"), fam("vit16")) == 1.0


def test_prefill_examples():
    assert BG.prefill_latency(BG.LlmProfile("q", ((256, 50.5),)), 256) == 50.5
    assert BG.prefill_latency(BG.LlmProfile("q", ((0, 0.0), (256, 50.5))), 128) == 25.25
    assert BG.prefill_latency(BG.LlmProfile("q", ((144, 97.1), (256, 116.1))), 200) == pytest.approx(106.6, abs=0.05)


def test_prefill_extrapolation_and_errors():
    prof = BG.LlmProfile("q", ((100, 10.0), (200, 20.0), (300, 40.0)))
    assert BG.prefill_latency(prof, 400) == pytest.approx(60.0)
    assert BG.prefill_latency(prof, 0) == pytest.approx(0.0)
    steep = BG.LlmProfile("s", ((100, 1.0), (200, 100.0)))
    assert BG.prefill_latency(steep, 0) == 0.0  # clamped
    with pytest.raises(UsageError):
        BG.LlmProfile("e", ())
    with pytest.raises(UsageError):
        BG.LlmProfile("e", ((10, 1.0), (10, 2.0)))
    with pytest.raises(UsageError):
        BG.LlmProfile("e", ((10, -1.0),))
    with pytest.raises(UsageError):
        BG.prefill_latency(prof, -1)


@given(st.lists(st.tuples(st.integers(0, 10_000), st.floats(0, 1e4)), min_size=2, max_size=20, unique_by=lambda p: p[0]))
def test_prefill_monotone_for_monotone_profiles(raw):
    xs = sorted(t for t, _ in raw)
    ys = sorted(ms for _, ms in raw)
    prof = BG.LlmProfile("m", tuple(zip(xs, ys)))
    queries = sorted({0, *xs, xs[-1] + 500, (xs[0] + xs[-1]) // 2})
    vals = [BG.prefill_latency(prof, q) for q in queries]
    assert all(a <= b + 1e-9 for a, b in zip(vals, vals[1:]))


def test_ttft_examples():
    assert BG.ttft(116.3, 50.5) == pytest.approx(166.8)
    assert abs(BG.ttft(116.3, 50.5) - 166) / 166 <= 0.01
    assert BG.ttft(0, 42.0) == 42.0
    assert abs(BG.ttft(54.8, 97.1) - 152) / 152 <= 0.01
    with pytest.raises(UsageError):
        BG.ttft(-1, 3)


def point(enc, pre, acc=None, **kw):
    base = dict(encoder="e", llm="l", resolution=256, visual_tokens=16)
    base.update(kw)
    return BG.TtftPoint(enc_latency_ms=enc, prefill_ms=pre, accuracy=acc, **base)


def test_ttft_point_sum_invariant():
    p = point(116.3, 50.5)
    assert p.ttft_ms == 116.3 + 50.5


def test_breakdown():
    assert BG.ttft_breakdown(point(116.3, 50.5))[0] == pytest.approx(0.697, abs=5e-4)
    assert BG.ttft_breakdown(point(3.0, 3.0)) == (0.5, 0.5)
    assert BG.ttft_breakdown(point(581.5, 336.4))[0] == pytest.approx(0.634, abs=5e-4)
    with pytest.raises(UsageError):
        BG.ttft_breakdown(point(0, 0))


def test_vision_fraction_grows_with_resolution_on_static_rows():
    rows = BG.load_points_csv(BG.fixture_path("table6_prefill.csv"))
    by_llm = {}
    for r in rows:
        p = r.point
        if p.encoder == "fastvithd" and p.llm.startswith("qwen2"):
            by_llm.setdefault(p.llm, []).append(p)
    checked = 0
    for pts in by_llm.values():
        pts.sort(key=lambda p: p.resolution)
        fr = [BG.ttft_breakdown(p)[0] for p in pts]
        assert all(a <= b for a, b in zip(fr, fr[1:]))
        checked += len(pts) > 1
    assert checked >= 2


def test_pareto_examples():
    only = point(10, 5, 50.0)
    assert BG.pareto_frontier([only]).points == (only,)
    slow, fast = point(60, 40, 60.0), point(50, 40, 61.0)
    assert BG.pareto_frontier([slow, fast]).points == (fast,)
    with pytest.raises(UsageError):
        BG.pareto_frontier([point(1, 1)])


def test_pareto_ties():
    a, b, c = point(10, 0, 5.0), point(10, 0, 4.0), point(10, 0, 5.0)
    assert BG.pareto_frontier([a, b, c]).points == (a,)
    assert BG.pareto_frontier([c, b, a]).points == (c,)


@st.composite
def suites(draw):
    n = draw(st.integers(1, 1000))
    seed = draw(st.integers(0, 2**32 - 1))
    grid = draw(st.sampled_from([5, 50, 10_000]))  # small grids force ties
    r = random.Random(seed)
    return [(float(r.randrange(grid)), float(r.randrange(grid))) for _ in range(n)], seed


@settings(max_examples=50)
@given(suites())
def test_pareto_matches_oracle_and_is_permutation_invariant(suite):
    coords, seed = suite
    pts = [point(t, 0.0, a) for t, a in coords]
    front = BG.pareto_frontier(pts).points
    want = [pts[i] for i in dominated_brute(coords)]
    assert [id(p) for p in front] == [id(p) for p in want]
    assert [id(p) for p in front] == [id(p) for p in BG.pareto_oracle(pts)]
    shuffled = pts[:]
    random.Random(seed + 1).shuffle(shuffled)
    key = lambda p: (p.ttft_ms, p.accuracy)  # noqa: E731
    assert [key(p) for p in BG.pareto_frontier(shuffled).points] == [key(p) for p in front]
    for p in front:
        assert not any(BG.dominates(q, p) for q in pts)


def test_csv_roundtrip_and_frontier_column():
    text = "encoder,llm,resolution,visual_tokens,enc_latency_ms,prefill_ms,accuracy\nx,y,256,16,1.5,2.5,60\n"
    rows = BG.read_points_csv(text)
    assert rows[0].point.ttft_ms == 4.0 and rows[0].reported_ttft_ms is None
    pts = [r.point for r in rows]
    out = BG.write_frontier_csv(pts, BG.pareto_frontier(pts))
    assert out.splitlines() == [
        "encoder,llm,resolution,visual_tokens,enc_latency_ms,prefill_ms,accuracy,on_frontier",
        "x,y,256,16,1.5,2.5,60,1",
    ]


@pytest.mark.parametrize(
    "body,needle",
    [
        ("x,y,256,16,abc,2.5,60\n", "line 2"),
        ("x,y,256,16,1.5,2.5,60\nx,y,256,16,1.5,,60\n", "line 3"),
        ("x,y,256,16,1.5,2.5,60,9\n", "line 2"),
        ("x,y,256,16,-1,2.5,60\n", "line 2"),
        ("x,y,2.5,16,1,2.5,60\n", "line 2"),
    ],
)
def test_csv_errors_name_lines(body, needle):
    header = "encoder,llm,resolution,visual_tokens,enc_latency_ms,prefill_ms,accuracy\n"
    with pytest.raises(FormatError, match=needle):
        BG.read_points_csv(header + body)


def test_csv_missing_column():
    with pytest.raises(FormatError, match="accuracy"):
        BG.read_points_csv("encoder,llm,resolution,visual_tokens,enc_latency_ms,prefill_ms\n")


def test_fixture_table6():
    rows = BG.load_points_csv(BG.fixture_path("table6_prefill.csv"))
    assert len(rows) == 25
    hd = [r for r in rows if r.point.encoder == "fastvithd" and r.point.llm == "qwen2-0.5b"]
    assert hd[0].point.ttft_ms == pytest.approx(166.8)
    anyres = [r.point for r in rows if r.point.encoder == "fastvithd_anyres_2x2"]
    assert {p.visual_tokens for p in anyres} == {1280}


def test_fixture_llava15_accuracy_complete():
    rows = BG.load_points_csv(BG.fixture_path("llava15_vicuna7b.csv"))
    assert rows and all(r.point.accuracy is not None for r in rows)
    for r in rows:
        p = r.point
        assert p.visual_tokens == BG.visual_tokens(fam(p.encoder.replace("-ft", "").replace("vit-l/14", "vit14")), p.resolution)


def test_profiles_from_points():
    rows = BG.load_points_csv(BG.fixture_path("table6_prefill.csv"))
    profs = BG.profiles_from_points(r.point for r in rows)
    v = profs["vicuna-7b"]
    assert BG.prefill_latency(v, 256) == pytest.approx(461.1)
    assert BG.prefill_latency(v, 576) == pytest.approx(1170.0)
