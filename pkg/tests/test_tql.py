import numpy as np
import pytest

from tensorlake import CountingProvider, create_dataset
from tensorlake.errors import (
    ShapeMismatchError,
    TqlSyntaxError,
    TqlTypeError,
    UnknownFunctionError,
    UnknownTensorError,
)
from tensorlake.htype import HtypeSchema
from tensorlake.tql import check_and_plan, parse, render
from tensorlake.tql.ast import BinOp, Call, Literal, SliceExpr, TensorRef
from tensorlake.tql.functions import iou, normalize_boxes

from helpers import (
    assert_view_matches_oracle,
    build_query_dataset,
    gen_query,
    oracle_execute,
    oracle_iou,
)

FIG_QUERY = """
SELECT
  images[100:500, 100:500, 0:2] as crop,
  NORMALIZE(
    boxes,
    [100, 100, 400, 400]) as box
FROM
  dataset
WHERE IOU(boxes, "training/boxes") > 0.95
ORDER BY IOU(boxes, "training/boxes")
ARRANGE BY labels
"""


def fig_schemas():
    return {
        "images": HtypeSchema(name="images", htype="image"),
        "boxes": HtypeSchema(name="boxes", htype="bbox", dtype="float32"),
        "training/boxes": HtypeSchema(name="training/boxes", htype="bbox", dtype="float32"),
        "labels": HtypeSchema(name="labels", htype="class_label", ndim=0),
    }


# --- parsing -------------------------------------------------------------------


def test_parse_full_example_query():
    ast = parse(FIG_QUERY)
    assert len(ast.projections) == 2
    crop, box = ast.projections
    assert crop[1] == "crop"
    assert isinstance(crop[0], SliceExpr)
    assert box[1] == "box"
    assert isinstance(box[0], Call) and box[0].name == "NORMALIZE"
    assert isinstance(ast.where, BinOp) and ast.where.op == ">"
    assert isinstance(ast.where.left, Call) and ast.where.left.name == "IOU"
    assert ast.where.right == Literal(0.95)
    order_expr, desc = ast.order_by
    assert isinstance(order_expr, Call) and order_expr.name == "IOU"
    assert desc is False  # ascending is the default
    assert ast.arrange_by == TensorRef("labels")


def test_parse_minimal_query():
    ast = parse("SELECT images FROM dataset")
    assert ast.projections == [(TensorRef("images"), None)]
    assert ast.where is None and ast.order_by is None
    assert ast.arrange_by is None and ast.limit is None


def test_parse_missing_projection_reports_position():
    with pytest.raises(TqlSyntaxError) as exc:
        parse("SELECT FROM dataset")
    assert exc.value.line == 1
    assert exc.value.column == 8


def test_parse_unknown_function():
    with pytest.raises(UnknownFunctionError):
        parse("SELECT BOGUS(x) FROM dataset")


def test_parse_keywords_case_insensitive():
    ast = parse("select labels from DATASET where labels == 1 order by labels desc limit 3")
    assert ast.limit == 3
    assert ast.order_by[1] is True


def test_parse_version_clause():
    ast = parse('SELECT labels FROM dataset VERSION "abc123" WHERE labels == 1')
    assert ast.version == "abc123"


def test_render_roundtrip_fixed_queries():
    for text in (
        FIG_QUERY,
        "SELECT labels FROM dataset",
        'SELECT vec[0:3] AS v FROM dataset VERSION "x" WHERE (labels == 1) AND (score > 0.5) LIMIT 5',
        "SELECT MEAN(vec) AS m FROM dataset ORDER BY score DESC ARRANGE BY labels",
    ):
        ast = parse(text)
        assert parse(render(ast)) == ast


def test_render_roundtrip_generated(rng):
    for _ in range(200):
        ast = parse(gen_query(rng))
        assert parse(render(ast)) == ast


# --- planning ------------------------------------------------------------------


def test_plan_fetch_set_matches_references():
    plan = check_and_plan(parse(FIG_QUERY), fig_schemas())
    assert set(plan.fetch_tensors) == {"images", "boxes", "training/boxes", "labels"}
    assert plan.stages == ["scan", "filter", "sort", "arrange", "project"]


def test_plan_quoted_string_resolves_to_tensor_only_when_known():
    schemas = fig_schemas()
    plan = check_and_plan(parse('SELECT labels FROM dataset WHERE CONTAINS(labels, 3)'), schemas)
    assert plan.fetch_tensors == ["labels"]
    # unknown quoted name stays a string literal, not a tensor
    with pytest.raises(TqlTypeError):
        check_and_plan(parse('SELECT labels FROM dataset WHERE labels > "zzz"'), schemas)


def test_plan_rejects_array_order_by():
    with pytest.raises(TqlTypeError):
        check_and_plan(parse("SELECT images FROM dataset ORDER BY images"), fig_schemas())


def test_plan_rejects_array_where():
    with pytest.raises(TqlTypeError):
        check_and_plan(parse("SELECT images FROM dataset WHERE images == images"), fig_schemas())


def test_plan_unknown_tensor():
    with pytest.raises(UnknownTensorError):
        check_and_plan(parse("SELECT nope FROM dataset"), fig_schemas())


def test_plan_duplicate_alias():
    with pytest.raises(TqlTypeError):
        check_and_plan(parse("SELECT labels AS a, score AS a FROM dataset"), {
            **fig_schemas(),
            "score": HtypeSchema(name="score", htype="generic", dtype="float64", ndim=0),
        })


def test_projection_pushdown_fetches_only_referenced(mem, rng):
    counting = CountingProvider(mem)
    ds = build_query_dataset(counting, rng, rows=100)
    c = ds.commit("snap")
    ds.length("labels", commit=c)
    view = ds.query("SELECT labels FROM dataset WHERE labels == 3", version=c)
    _ = [view.value("labels", i) for i in range(len(view))]
    counting.reset()
    view = ds.query("SELECT labels FROM dataset WHERE labels == 3", version=c)
    _ = [view.value("labels", i) for i in range(len(view))]
    for key in counting.keys_fetched:
        assert "/labels/" in key, f"fetched non-labels key {key}"


# --- builtins -------------------------------------------------------------------


def test_iou_identity_and_disjoint():
    box = np.array([10.0, 10.0, 5.0, 5.0])
    assert iou(box, box) == pytest.approx(1.0)
    assert iou(np.array([0, 0, 10, 10.0]), np.array([20, 20, 5, 5.0])) == 0.0


def test_iou_hand_computed_overlap():
    # LTWH (0,0,10,10) vs (5,5,10,10): intersection 5x5=25, union 200-25=175
    a = np.array([0.0, 0.0, 10.0, 10.0])
    b = np.array([5.0, 5.0, 10.0, 10.0])
    want = 25.0 / 175.0
    assert iou(a, b) == pytest.approx(want, rel=1e-12)
    assert oracle_iou(a, b) == pytest.approx(want, rel=1e-12)


def test_iou_box_sets_mean_over_pairs(rng):
    a = (rng.random((4, 4)) * 20).astype(np.float64)
    b = (rng.random((6, 4)) * 20).astype(np.float64)
    assert iou(a, b) == pytest.approx(oracle_iou(a, b), rel=1e-12)


def test_iou_zero_area_union_is_zero():
    degenerate = np.array([5.0, 5.0, 0.0, 0.0])
    assert iou(degenerate, degenerate) == 0.0


def test_iou_ltrb_format():
    a = np.array([0.0, 0.0, 10.0, 10.0])
    assert iou(a, a, fmt_a="LTRB", fmt_b="LTRB") == pytest.approx(1.0)
    assert iou(a, a, fmt_a="LTRB", fmt_b="LTRB") == pytest.approx(
        oracle_iou(a, a, "LTRB", "LTRB")
    )


def test_iou_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        iou(np.zeros((2, 3)), np.zeros((2, 4)))


def test_normalize_identity_crop():
    boxes = np.array([[10.0, 20.0, 5.0, 5.0]])
    out = normalize_boxes(boxes, [0, 0, 640, 480])
    np.testing.assert_array_equal(out, boxes)


def test_normalize_translates_origin():
    out = normalize_boxes(np.array([150.0, 150.0, 50.0, 50.0]), [100, 100, 400, 400])
    np.testing.assert_array_equal(out, [50.0, 50.0, 50.0, 50.0])


def test_normalize_ltrb_shifts_all_corners():
    out = normalize_boxes(np.array([150.0, 150.0, 200.0, 200.0]), [100, 100, 400, 400], fmt="LTRB")
    np.testing.assert_array_equal(out, [50.0, 50.0, 100.0, 100.0])


def test_normalize_bad_crop_length():
    with pytest.raises(ShapeMismatchError):
        normalize_boxes(np.zeros(4), [1, 2, 3])


def test_reductions_match_linear_scan(rng):
    from tensorlake.tql.functions import reduce_max, reduce_mean, reduce_min, reduce_sum

    for _ in range(500):
        arr = rng.integers(-1000, 1000, size=int(rng.integers(1, 50)), dtype=np.int64)
        assert reduce_sum(arr) == sum(int(v) for v in arr)
        assert reduce_min(arr) == min(int(v) for v in arr)
        assert reduce_max(arr) == max(int(v) for v in arr)
        assert reduce_mean(arr) == pytest.approx(sum(float(v) for v in arr) / len(arr))


# --- execution ------------------------------------------------------------------


def test_where_filter_matches_brute_force(mem, rng):
    ds = build_query_dataset(mem, rng, rows=1000)
    view = ds.query("SELECT labels FROM dataset WHERE labels == 3")
    want = [i for i in range(1000) if int(ds.read("labels", i)) == 3]
    assert view.row_order == want
    assert all(int(view.value("labels", p)) == 3 for p in range(len(view)))


def test_identity_view_when_no_clauses(mem, rng):
    ds = build_query_dataset(mem, rng, rows=50)
    view = ds.query("SELECT labels FROM dataset")
    assert view.row_order == list(range(50))


def test_order_by_desc_ties_stable(mem):
    ds = create_dataset(mem, {
        "key": {"htype": "generic", "dtype": "int64", "ndim": 0},
    })
    for v in (3, 1, 3, 2, 1, 3):
        ds.append("key", np.int64(v))
    view = ds.query("SELECT key FROM dataset ORDER BY key DESC")
    assert view.row_order == [0, 2, 5, 3, 1, 4]
    view_asc = ds.query("SELECT key FROM dataset ORDER BY key")
    assert view_asc.row_order == [1, 4, 3, 0, 2, 5]


def test_arrange_by_groups_contiguously(mem, rng):
    ds = build_query_dataset(mem, rng, rows=200)
    view = ds.query("SELECT labels FROM dataset ORDER BY score ARRANGE BY labels")
    values = [int(view.value("labels", p)) for p in range(len(view))]
    seen = []
    for v in values:
        if not seen or seen[-1] != v:
            seen.append(v)
    assert len(seen) == len(set(seen)), "arrange key repeated in non-contiguous runs"
    # groups ordered by first occurrence after the sort, rows stable inside
    ast = parse("SELECT labels FROM dataset ORDER BY score ARRANGE BY labels")
    rows, _ = oracle_execute(ast, ds, view.commit_id, ds.schemas)
    assert view.row_order == rows
    assert view.group_boundaries is not None
    for start, end in view.groups():
        group_vals = values[start:end]
        assert len(set(group_vals)) == 1


def test_version_scoped_query_pins_results(mem, rng):
    ds = build_query_dataset(mem, rng, rows=60)
    c = ds.commit("snap")
    before = ds.query("SELECT labels FROM dataset WHERE labels >= 3", version=c)
    for _ in range(40):
        ds.append_row({"labels": np.int64(5), "score": np.float64(0.0)})
    after = ds.query("SELECT labels FROM dataset WHERE labels >= 3", version=c)
    assert before.row_order == after.row_order
    via_clause = ds.query(f'SELECT labels FROM dataset VERSION "{c}" WHERE labels >= 3')
    assert via_clause.row_order == before.row_order
    head = ds.query("SELECT labels FROM dataset WHERE labels >= 3")
    assert len(head) > len(before)


def test_empty_samples_fail_where_but_project(mem, rng):
    ds = build_query_dataset(mem, rng, rows=80)
    empty_rows = [i for i in range(80) if ds.read("vec", i).size == 0]
    assert empty_rows, "dataset should contain empty vec samples"
    view = ds.query("SELECT vec FROM dataset WHERE MEAN(vec) > -100")
    assert not set(view.row_order) & set(empty_rows)
    proj = ds.query("SELECT vec FROM dataset")
    for i in empty_rows:
        assert proj.value("vec", proj.row_order.index(i)).size == 0


def test_generated_queries_match_oracle(mem, rng):
    ds = build_query_dataset(mem, rng, rows=150)
    commit = ds.commit("snap")
    for _ in range(60):
        text = gen_query(rng)
        ast = parse(text)
        view = ds.query(text, version=commit)
        assert_view_matches_oracle(ds, view, ast, commit)


def test_fig_query_end_to_end_small(mem, rng):
    ds = create_dataset(mem, {
        "images": "image",
        "boxes": HtypeSchema(name="boxes", htype="bbox", dtype="float32"),
        "training/boxes": HtypeSchema(name="training/boxes", htype="bbox", dtype="float32"),
        "labels": {"htype": "class_label", "dtype": "int64", "ndim": 0},
    })
    n = 14
    for i in range(n):
        base = (rng.random((1, 4)) * 100 + 10).astype(np.float32)
        jitter = float(rng.random() * 6)  # small jitter keeps IOU near 1
        moved = base + np.array([jitter, 0, 0, 0], np.float32)
        ds.append_row({
            "images": rng.integers(0, 256, (520, 520, 3), dtype=np.uint8),
            "boxes": base,
            "training/boxes": moved,
            "labels": np.int64(i % 3),
        })
    view = ds.query(FIG_QUERY)
    ast = parse(FIG_QUERY)
    assert_view_matches_oracle(ds, view, ast, view.commit_id, check_values=False)
    if len(view):
        crop = view.value("crop", 0)
        assert crop.shape == (400, 400, 2)
        src = ds.read("images", view.row_order[0])
        np.testing.assert_array_equal(crop, src[100:500, 100:500, 0:2])
