"""Query execution against a dataset at a pinned version.

Row flow follows the plan stages: scan the referenced tensors, filter by
WHERE, stable-sort by ORDER BY (ascending default), stably regroup by
ARRANGE BY (groups ordered by first occurrence after the sort), truncate by
LIMIT; projections stay lazy on the resulting view.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from tensorlake.errors import RuntimeEvalError, TqlTypeError
from tensorlake.tql.ast import (
    ArrayLiteral,
    BinOp,
    Call,
    DimIndex,
    Literal,
    SliceExpr,
    TensorRef,
    UnaryOp,
)
from tensorlake.tql.functions import (
    all_of,
    any_of,
    contains,
    iou,
    normalize_boxes,
    reduce_max,
    reduce_mean,
    reduce_min,
    reduce_sum,
    shape_of,
)
from tensorlake.tql.parser import parse
from tensorlake.tql.planner import QueryPlan, check_and_plan
from tensorlake.views import DatasetView


class _EmptySample(Exception):
    """Raised while filtering when a referenced sample has no elements; the
    row is simply excluded (sparse tensors must be queryable)."""


class Evaluator:
    """Interprets expressions row by row against dataset reads."""

    def __init__(self, ds, commit_id: str, schemas: dict, empty_check: bool = False):
        self.ds = ds
        self.commit_id = commit_id
        self.schemas = schemas
        self.empty_check = empty_check

    def read(self, path: str, index: int):
        value = self.ds.read(path, index, commit=self.commit_id)
        if self.empty_check and value.size == 0:
            raise _EmptySample(path)
        return value

    def eval(self, node, index: int):
        if isinstance(node, TensorRef):
            return self.read(node.path, index)
        if isinstance(node, Literal):
            return node.value
        if isinstance(node, ArrayLiteral):
            return np.asarray([self.eval(i, index) for i in node.items])
        if isinstance(node, SliceExpr):
            base = np.asarray(self.eval(node.base, index))
            if base.ndim < len(node.dims):
                raise TqlTypeError(
                    f"slice has {len(node.dims)} dims but value has rank {base.ndim}"
                )
            key = tuple(
                d.index if isinstance(d, DimIndex) else slice(d.start, d.stop)
                for d in node.dims
            )
            return base[key]
        if isinstance(node, UnaryOp):
            value = self.eval(node.operand, index)
            if node.op == "NOT":
                return not _truthy(value)
            return -_promote(value)
        if isinstance(node, BinOp):
            if node.op == "AND":
                return _truthy(self.eval(node.left, index)) and _truthy(self.eval(node.right, index))
            if node.op == "OR":
                return _truthy(self.eval(node.left, index)) or _truthy(self.eval(node.right, index))
            left = self.eval(node.left, index)
            right = self.eval(node.right, index)
            if node.op in (">", ">=", "<", "<=", "==", "!="):
                return _compare(node.op, left, right)
            return _arith(node.op, left, right)
        if isinstance(node, Call):
            return self.call(node, index)
        raise TqlTypeError(f"cannot evaluate {node!r}")

    def call(self, node: Call, index: int):
        args = [self.eval(a, index) for a in node.args]
        if node.name == "IOU":
            return iou(args[0], args[1], self._bbox_format(node.args[0]), self._bbox_format(node.args[1]))
        if node.name == "NORMALIZE":
            return normalize_boxes(args[0], args[1], self._bbox_format(node.args[0]))
        if node.name == "MEAN":
            return reduce_mean(args[0])
        if node.name == "SUM":
            return reduce_sum(args[0])
        if node.name == "MIN":
            return reduce_min(args[0])
        if node.name == "MAX":
            return reduce_max(args[0])
        if node.name == "SHAPE":
            return shape_of(args[0])
        if node.name == "ANY":
            return any_of(args[0])
        if node.name == "ALL":
            return all_of(args[0])
        if node.name == "CONTAINS":
            return contains(args[0], args[1])
        raise TqlTypeError(f"unhandled function {node.name}")

    def _bbox_format(self, node) -> str:
        if isinstance(node, TensorRef):
            schema = self.schemas.get(node.path)
            if schema is not None and schema.htype == "bbox":
                return schema.bbox_format
        return "LTWH"


def _promote(value):
    """Integer operands widen to int64 so reductions and sums cannot
    silently wrap; mixed int/float promotes to float64."""
    if isinstance(value, (bool, np.bool_)):
        return np.int64(value)
    if isinstance(value, (int, np.integer)):
        return np.int64(value)
    if isinstance(value, (float, np.floating)):
        return np.float64(value)
    arr = np.asarray(value)
    if arr.dtype.kind in "ibu":
        return arr.astype(np.int64)
    if arr.dtype.kind == "f":
        return arr.astype(np.float64)
    return arr


def _arith(op: str, left, right):
    a, b = _promote(left), _promote(right)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return np.float64(a) / np.float64(b) if np.isscalar(a) and np.isscalar(b) else np.asarray(a, np.float64) / np.asarray(b, np.float64)
    raise TqlTypeError(f"unknown operator {op}")


def _compare(op: str, left, right):
    if isinstance(left, str) or isinstance(right, str):
        if op == "==":
            return left == right
        if op == "!=":
            return left != right
        raise TqlTypeError(f"cannot order strings with {op}")
    a, b = _scalarize(left), _scalarize(right)
    if op == ">":
        out = a > b
    elif op == ">=":
        out = a >= b
    elif op == "<":
        out = a < b
    elif op == "<=":
        out = a <= b
    elif op == "==":
        out = a == b
    else:
        out = a != b
    if isinstance(out, np.ndarray):
        return out
    return bool(out)


def _scalarize(value):
    """Size-one arrays compare like scalars (class labels stored as (1,) or ())."""
    if isinstance(value, np.ndarray) and value.size == 1:
        return value.reshape(()).item()
    return value


def _truthy(value) -> bool:
    if isinstance(value, np.ndarray):
        if value.size == 1:
            return bool(value.reshape(()).item())
        raise TqlTypeError(
            "array used where a per-row boolean is needed; wrap in ANY(...) or ALL(...)"
        )
    return bool(value)


def _sort_key(value):
    """Deterministic total order: empties and NaNs sort after real values."""
    v = _scalarize(value)
    if isinstance(v, np.ndarray):
        if v.size == 0:
            return (2, 0.0)
        return (1, tuple(np.asarray(v, dtype=np.float64).ravel().tolist()))
    f = float(v)
    if np.isnan(f):
        return (2, 0.0)
    return (0, f)


def _group_key(value):
    v = _scalarize(value)
    if isinstance(v, np.ndarray):
        return (str(v.dtype), v.shape, v.tobytes())
    return v


def execute(plan: QueryPlan, ds, version: Optional[str] = None) -> DatasetView:
    """Run a plan against ``ds``; the view pins the resolved commit."""
    target = plan.ast.version or version
    commit_id = ds._resolve_commit(target)

    if plan.fetch_tensors:
        lengths = [ds.length(t, commit=commit_id) for t in plan.fetch_tensors]
        n = min(lengths)
    else:
        n = ds.num_rows(commit_id)

    ev = Evaluator(ds, commit_id, plan.schemas)
    filter_ev = Evaluator(ds, commit_id, plan.schemas, empty_check=True)

    rows = list(range(n))
    if plan.ast.where is not None:
        kept = []
        for i in rows:
            try:
                if _truthy(filter_ev.eval(plan.ast.where, i)):
                    kept.append(i)
            except _EmptySample:
                continue
            except (TqlTypeError, ValueError, IndexError) as e:
                raise RuntimeEvalError(f"WHERE failed: {e}", i) from e
        rows = kept

    if plan.ast.order_by is not None:
        expr, desc = plan.ast.order_by
        keys = {}
        for i in rows:
            try:
                # empty samples sort after real keys rather than erroring
                keys[i] = _sort_key(filter_ev.eval(expr, i))
            except _EmptySample:
                keys[i] = (2, 0.0)
            except (TqlTypeError, ValueError, IndexError) as e:
                raise RuntimeEvalError(f"ORDER BY failed: {e}", i) from e
        rows = sorted(rows, key=lambda i: keys[i], reverse=desc)

    group_boundaries = None
    if plan.ast.arrange_by is not None:
        groups: dict = {}
        order: list = []
        for i in rows:
            try:
                key = _group_key(ev.eval(plan.ast.arrange_by, i))
            except (TqlTypeError, ValueError, IndexError) as e:
                raise RuntimeEvalError(f"ARRANGE BY failed: {e}", i) from e
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(i)
        rows = []
        group_boundaries = []
        for key in order:
            group_boundaries.append(len(rows))
            rows.extend(groups[key])

    if plan.ast.limit is not None:
        rows = rows[: plan.ast.limit]
        if group_boundaries is not None:
            group_boundaries = [b for b in group_boundaries if b < len(rows)]

    projections = [(alias, expr) for (expr, _), alias in zip(plan.ast.projections, plan.aliases)]

    def evaluator(expr, index: int):
        try:
            return ev.eval(expr, index)
        except (TqlTypeError, ValueError, IndexError) as e:
            raise RuntimeEvalError(f"projection failed: {e}", index) from e

    from tensorlake.tql.ast import render

    return DatasetView(
        ds,
        commit_id,
        rows,
        projections=projections,
        evaluator=evaluator,
        group_boundaries=group_boundaries,
        query_text=render(plan.ast),
    )


def execute_query(ds, text: str, version: Optional[str] = None) -> DatasetView:
    """parse -> check_and_plan -> execute in one call."""
    ast = parse(text)
    plan = check_and_plan(ast, {name: ds.schema(name) for name in ds.schemas})
    return execute(plan, ds, version=version)
