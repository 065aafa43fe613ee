"""Shared test utilities: chunk scanning and an independent row-by-row query
evaluator used as the oracle for the query engine."""

from __future__ import annotations

import math

import numpy as np

from tensorlake.chunk import parse_header
from tensorlake.dataset import TILE_SENTINEL_PREFIX


def scan_chunks(ds, tensor, commit=None):
    """Fetch and parse every regular chunk of a tensor; returns a list of
    dicts with real (not metadata) payload sizes."""
    state = ds._state_for(tensor, commit)
    out = []
    seen = set()
    for _last, chunk_id in state.chunk_enc.rows():
        if chunk_id.startswith(TILE_SENTINEL_PREFIX) or chunk_id in seen:
            continue
        seen.add(chunk_id)
        header = parse_header(ds.chunk_bytes(tensor, chunk_id, commit))
        out.append(
            {
                "name": chunk_id,
                "samples": header.sample_count,
                "payload": header.payload_size,
                "live": header.live_bytes,
            }
        )
    return out


def scan_tile_chunks(ds, tensor, commit=None):
    state = ds._state_for(tensor, commit)
    out = []
    for entry in state.tile_map.entries.values():
        for name in entry.chunks:
            header = parse_header(ds.chunk_bytes(tensor, name, commit))
            out.append({"name": name, "payload": header.payload_size})
    return out


def grid_cells_overlapping(region, tile_shape):
    """Independent count of tiles a region touches: per-dim ceil arithmetic."""
    total = 1
    for (start, stop), t in zip(region, tile_shape):
        lo = start // t
        hi = (stop - 1) // t
        total *= hi - lo + 1
    return total


# --- independent query oracle ---------------------------------------------------
#
# Deliberately naive: evaluates the AST row by row with its own semantics code
# and its own sort/group logic, so it shares nothing with the engine's
# executor beyond the parsed AST.

from tensorlake.tql.ast import (  # noqa: E402
    ArrayLiteral,
    BinOp,
    Call,
    DimIndex,
    Literal,
    SliceExpr,
    TensorRef,
    UnaryOp,
)


class OracleEmpty(Exception):
    pass


def oracle_eval(node, read, schemas, in_where=False):
    """read(path) -> sample array for the current row."""
    if isinstance(node, TensorRef):
        value = read(node.path)
        if in_where and value.size == 0:
            raise OracleEmpty()
        return value
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, ArrayLiteral):
        return np.array([oracle_eval(i, read, schemas, in_where) for i in node.items])
    if isinstance(node, SliceExpr):
        base = np.asarray(oracle_eval(node.base, read, schemas, in_where))
        key = []
        for d in node.dims:
            if isinstance(d, DimIndex):
                key.append(d.index)
            else:
                key.append(slice(d.start, d.stop))
        return base[tuple(key)]
    if isinstance(node, UnaryOp):
        v = oracle_eval(node.operand, read, schemas, in_where)
        if node.op == "NOT":
            return not _oracle_bool(v)
        return -_oracle_num(v)
    if isinstance(node, BinOp):
        if node.op == "AND":
            return _oracle_bool(oracle_eval(node.left, read, schemas, in_where)) and _oracle_bool(
                oracle_eval(node.right, read, schemas, in_where)
            )
        if node.op == "OR":
            return _oracle_bool(oracle_eval(node.left, read, schemas, in_where)) or _oracle_bool(
                oracle_eval(node.right, read, schemas, in_where)
            )
        a = oracle_eval(node.left, read, schemas, in_where)
        b = oracle_eval(node.right, read, schemas, in_where)
        if node.op in (">", ">=", "<", "<=", "==", "!="):
            a, b = _oracle_unwrap(a), _oracle_unwrap(b)
            return {
                ">": lambda: a > b, ">=": lambda: a >= b, "<": lambda: a < b,
                "<=": lambda: a <= b, "==": lambda: a == b, "!=": lambda: a != b,
            }[node.op]()
        a, b = _oracle_num(a), _oracle_num(b)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return np.float64(a) / np.float64(b)
    if isinstance(node, Call):
        args = [oracle_eval(a, read, schemas, in_where) for a in node.args]
        if node.name == "MEAN":
            arr = np.asarray(args[0], dtype=np.float64)
            return float("nan") if arr.size == 0 else float(arr.mean())
        if node.name == "SUM":
            arr = np.asarray(args[0])
            return int(arr.astype(np.int64).sum()) if arr.dtype.kind in "ibu" else float(
                arr.astype(np.float64).sum()
            )
        if node.name == "MIN":
            arr = np.asarray(args[0])
            if arr.size == 0:
                return float("nan")
            return int(arr.min()) if arr.dtype.kind in "ibu" else float(arr.min())
        if node.name == "MAX":
            arr = np.asarray(args[0])
            if arr.size == 0:
                return float("nan")
            return int(arr.max()) if arr.dtype.kind in "ibu" else float(arr.max())
        if node.name == "SHAPE":
            return np.asarray(np.asarray(args[0]).shape, dtype=np.int64)
        if node.name == "ANY":
            return bool(np.any(np.asarray(args[0])))
        if node.name == "ALL":
            return bool(np.all(np.asarray(args[0])))
        if node.name == "CONTAINS":
            arr = np.asarray(args[0])
            if isinstance(args[1], str):
                return args[1] in arr.tobytes().decode("utf-8", "replace")
            return bool(np.any(arr == args[1]))
        if node.name == "IOU":
            return oracle_iou(args[0], args[1], _fmt(node.args[0], schemas), _fmt(node.args[1], schemas))
        if node.name == "NORMALIZE":
            return oracle_normalize(args[0], args[1], _fmt(node.args[0], schemas))
    raise AssertionError(f"oracle cannot evaluate {node!r}")


def _fmt(node, schemas):
    if isinstance(node, TensorRef) and node.path in schemas and schemas[node.path].htype == "bbox":
        return schemas[node.path].bbox_format
    return "LTWH"


def _oracle_unwrap(v):
    if isinstance(v, np.ndarray) and v.size == 1:
        return v.reshape(()).item()
    return v


def _oracle_num(v):
    if isinstance(v, np.ndarray):
        return v.astype(np.int64) if v.dtype.kind in "ibu" else v.astype(np.float64)
    if isinstance(v, (bool, int, np.integer)):
        return np.int64(v)
    return np.float64(v)


def _oracle_bool(v):
    v = _oracle_unwrap(v)
    assert not isinstance(v, np.ndarray), "oracle: non-scalar boolean"
    return bool(v)


def oracle_box_corners(box, fmt):
    l, t, a, b = (float(x) for x in box)
    if fmt == "LTWH":
        return l, t, l + a, t + b
    return l, t, a, b


def oracle_iou(a, b, fmt_a="LTWH", fmt_b="LTWH"):
    if np.asarray(a).size == 0 or np.asarray(b).size == 0:
        return 0.0
    arr_a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    arr_b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    n = min(len(arr_a), len(arr_b))
    if n == 0:
        return 0.0
    scores = []
    for i in range(n):
        l1, t1, r1, b1 = oracle_box_corners(arr_a[i], fmt_a)
        l2, t2, r2, b2 = oracle_box_corners(arr_b[i], fmt_b)
        iw = min(r1, r2) - max(l1, l2)
        ih = min(b1, b2) - max(t1, t2)
        inter = max(0.0, iw) * max(0.0, ih)
        union = (r1 - l1) * (b1 - t1) + (r2 - l2) * (b2 - t2) - inter
        scores.append(inter / union if union > 0 else 0.0)
    return sum(scores) / len(scores)


def oracle_normalize(boxes, crop, fmt="LTWH"):
    crop = [float(c) for c in np.asarray(crop).reshape(-1)]
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr
    single = arr.ndim == 1
    out = np.atleast_2d(arr).copy()
    out[:, 0] -= crop[0]
    out[:, 1] -= crop[1]
    if fmt == "LTRB":
        out[:, 2] -= crop[0]
        out[:, 3] -= crop[1]
    return out[0] if single else out


def gen_query(rng) -> str:
    """Random well-typed query text over the standard oracle dataset
    (labels/score int64/float64 scalars, vec float32 1-D, boxes [k,4])."""

    def scalar_expr(depth=0):
        r = rng.random()
        if depth > 2 or r < 0.25:
            return rng.choice(["labels", "score", str(int(rng.integers(0, 6))), "2.5"])
        if r < 0.45:
            return f"MEAN(vec)" if rng.random() < 0.5 else f"SUM(vec)"
        if r < 0.6:
            return rng.choice(["MIN(vec)", "MAX(vec)", "IOU(boxes, boxes)"])
        op = rng.choice(["+", "-", "*"])
        return f"({scalar_expr(depth + 1)} {op} {scalar_expr(depth + 1)})"

    def bool_expr(depth=0):
        r = rng.random()
        if depth > 1 or r < 0.5:
            cmp = rng.choice([">", ">=", "<", "<=", "==", "!="])
            return f"{scalar_expr(depth + 1)} {cmp} {scalar_expr(depth + 1)}"
        if r < 0.6:
            return f"CONTAINS(labels, {int(rng.integers(0, 6))})"
        if r < 0.7:
            return f"ANY(vec > {float(rng.random()):.2f})"
        if r < 0.8:
            return f"NOT ({bool_expr(depth + 1)})"
        glue = rng.choice(["AND", "OR"])
        return f"({bool_expr(depth + 1)}) {glue} ({bool_expr(depth + 1)})"

    projections = []
    for _ in range(int(rng.integers(1, 4))):
        r = rng.random()
        if r < 0.35:
            projections.append(rng.choice(["labels", "score", "vec", "boxes"]))
        elif r < 0.55:
            projections.append(f"vec[0:{int(rng.integers(1, 5))}] AS s{len(projections)}")
        elif r < 0.8:
            projections.append(f"{scalar_expr()} AS e{len(projections)}")
        else:
            projections.append(f"SHAPE(vec) AS sh{len(projections)}")
    seen = set()
    unique = []
    for p in projections:
        name = p.split(" AS ")[-1]
        if name not in seen:
            seen.add(name)
            unique.append(p)
    text = "SELECT " + ", ".join(unique) + " FROM dataset"
    if rng.random() < 0.7:
        text += " WHERE " + bool_expr()
    if rng.random() < 0.5:
        direction = rng.choice(["", " ASC", " DESC"])
        text += f" ORDER BY {scalar_expr()}{direction}"
    if rng.random() < 0.4:
        text += " ARRANGE BY labels"
    if rng.random() < 0.3:
        text += f" LIMIT {int(rng.integers(0, 40))}"
    return text


def build_query_dataset(provider, rng, rows=200, policy=None):
    """Standard dataset for query-oracle comparisons, with empty samples mixed
    in so sparse NULL semantics get exercised."""
    from tensorlake import ChunkPolicy, create_dataset

    ds = create_dataset(
        provider,
        {
            "labels": {"htype": "class_label", "dtype": "int64", "ndim": 0},
            "score": {"htype": "generic", "dtype": "float64", "ndim": 0},
            "vec": {"htype": "generic", "dtype": "float32"},
            "boxes": {"htype": "bbox", "dtype": "float32"},
        },
        policy=policy or ChunkPolicy(min_bytes=2048, max_bytes=4096),
    )
    for _ in range(rows):
        row = {
            "labels": np.int64(int(rng.integers(0, 6))),
            "score": np.float64(float(rng.random() * 10 - 5)),
        }
        if rng.random() < 0.9:
            row["vec"] = rng.standard_normal(int(rng.integers(1, 7))).astype(np.float32)
        if rng.random() < 0.9:
            k = int(rng.integers(1, 4))
            row["boxes"] = (rng.random((k, 4)) * 50).astype(np.float32)
        ds.append_row(row)
    ds.flush()
    return ds


def assert_view_matches_oracle(ds, view, ast, commit, check_values=True):
    rows, project = oracle_execute(ast, ds, commit, ds.schemas)
    assert view.row_order == rows
    if not check_values:
        return
    for pos in range(len(view)):
        want = project(pos)
        for name in view.tensors():
            got = view.value(name, pos)
            expected = want[name]
            if isinstance(expected, np.ndarray) or isinstance(got, np.ndarray):
                np.testing.assert_allclose(
                    np.asarray(got, dtype=np.float64),
                    np.asarray(expected, dtype=np.float64),
                    rtol=1e-9, atol=1e-12, equal_nan=True,
                )
            elif isinstance(expected, float):
                assert got == pytest_approx(expected)
            else:
                assert got == expected, (name, pos)


def pytest_approx(v):
    import pytest

    return pytest.approx(v, rel=1e-9, abs=1e-12, nan_ok=True)


def oracle_execute(ast, ds, commit, schemas):
    """Row-by-row reference implementation of the full query pipeline."""
    from tensorlake.tql.ast import TensorRef as TR
    from tensorlake.tql.ast import walk
    from tensorlake.tql.planner import resolve_strings

    projections = [(resolve_strings(e, schemas), a) for e, a in ast.projections]
    where = resolve_strings(ast.where, schemas) if ast.where is not None else None
    order_by = (
        (resolve_strings(ast.order_by[0], schemas), ast.order_by[1]) if ast.order_by else None
    )
    arrange_by = resolve_strings(ast.arrange_by, schemas) if ast.arrange_by is not None else None

    refs = set()
    for expr in [e for e, _ in projections] + [where, order_by[0] if order_by else None, arrange_by]:
        if expr is not None:
            refs.update(n.path for n in walk(expr) if isinstance(n, TR))
    if refs:
        n = min(ds.length(t, commit=commit) for t in refs)
    else:
        n = ds.num_rows(commit)

    def reader_for(i):
        return lambda path: ds.read(path, i, commit=commit)

    rows = []
    for i in range(n):
        if where is None:
            rows.append(i)
            continue
        try:
            if _oracle_bool(oracle_eval(where, reader_for(i), schemas, in_where=True)):
                rows.append(i)
        except OracleEmpty:
            pass

    if order_by is not None:
        expr, desc = order_by
        def key(i):
            try:
                v = _oracle_unwrap(oracle_eval(expr, reader_for(i), schemas, in_where=True))
            except OracleEmpty:
                return (2, 0.0)
            if isinstance(v, np.ndarray):
                return (2, 0.0) if v.size == 0 else (1, tuple(np.asarray(v, np.float64).ravel()))
            f = float(v)
            return (2, 0.0) if math.isnan(f) else (0, f)
        rows = sorted(rows, key=key, reverse=desc)

    if arrange_by is not None:
        buckets = {}
        order = []
        for i in rows:
            v = _oracle_unwrap(oracle_eval(arrange_by, reader_for(i), schemas))
            k = (str(v.dtype), v.shape, v.tobytes()) if isinstance(v, np.ndarray) else v
            if k not in buckets:
                buckets[k] = []
                order.append(k)
            buckets[k].append(i)
        rows = [i for k in order for i in buckets[k]]

    if ast.limit is not None:
        rows = rows[: ast.limit]

    def project(position):
        i = rows[position]
        out = {}
        for expr, alias in projections:
            name = alias or (expr.path if isinstance(expr, TR) else None)
            out[name] = oracle_eval(expr, reader_for(i), schemas)
        return out

    return rows, project
