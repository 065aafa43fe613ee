"""Resolution, type checking, and projection pushdown: the plan fetches
exactly the tensors a query references."""

from __future__ import annotations

from dataclasses import dataclass, field
from tensorlake.errors import TqlTypeError, UnknownTensorError
from tensorlake.htype import HtypeSchema
from tensorlake.tql.ast import (
    ArrayLiteral,
    BinOp,
    Call,
    DimIndex,
    Literal,
    Query,
    SliceExpr,
    TensorRef,
    UnaryOp,
    render_expr,
    walk,
)

# inferred expression kinds; UNKNOWN covers rank-unconstrained tensors whose
# samples may turn out scalar at runtime
SCALAR = "scalar"
ARRAY = "array"
BOOL = "bool"
STRING = "string"
UNKNOWN = "unknown"

COMPARISONS = (">", ">=", "<", "<=", "==", "!=")


@dataclass
class QueryPlan:
    """Typed query plus the exact tensor fetch set. Stages run in the fixed
    order scan -> filter -> sort -> arrange -> limit -> project."""

    ast: Query
    fetch_tensors: list[str]
    schemas: dict[str, HtypeSchema]
    aliases: list[str] = field(default_factory=list)

    @property
    def stages(self) -> list[str]:
        stages = ["scan"]
        if self.ast.where is not None:
            stages.append("filter")
        if self.ast.order_by is not None:
            stages.append("sort")
        if self.ast.arrange_by is not None:
            stages.append("arrange")
        if self.ast.limit is not None:
            stages.append("limit")
        stages.append("project")
        return stages


def resolve_strings(node, schemas: dict[str, HtypeSchema]):
    """Quoted identifiers naming a tensor become tensor refs; other strings
    stay literals."""
    if isinstance(node, Literal) and isinstance(node.value, str) and node.value in schemas:
        return TensorRef(node.value)
    if isinstance(node, SliceExpr):
        return SliceExpr(resolve_strings(node.base, schemas), node.dims)
    if isinstance(node, BinOp):
        return BinOp(node.op, resolve_strings(node.left, schemas), resolve_strings(node.right, schemas))
    if isinstance(node, UnaryOp):
        return UnaryOp(node.op, resolve_strings(node.operand, schemas))
    if isinstance(node, Call):
        return Call(node.name, tuple(resolve_strings(a, schemas) for a in node.args))
    if isinstance(node, ArrayLiteral):
        return ArrayLiteral(tuple(resolve_strings(i, schemas) for i in node.items))
    return node


def infer_kind(node, schemas: dict[str, HtypeSchema]) -> str:
    if isinstance(node, TensorRef):
        schema = schemas.get(node.path)
        if schema is None:
            raise UnknownTensorError(f"unknown tensor {node.path!r}")
        if schema.ndim == 0:
            return SCALAR
        if schema.ndim is None:
            return UNKNOWN
        return ARRAY
    if isinstance(node, Literal):
        return STRING if isinstance(node.value, str) else SCALAR
    if isinstance(node, ArrayLiteral):
        return ARRAY
    if isinstance(node, SliceExpr):
        base_kind = infer_kind(node.base, schemas)
        if base_kind not in (ARRAY, UNKNOWN):
            raise TqlTypeError(f"cannot slice a {base_kind} expression: {render_expr(node)}")
        if isinstance(node.base, TensorRef):
            ndim = schemas[node.base.path].ndim
            if ndim is not None:
                index_dims = sum(1 for d in node.dims if isinstance(d, DimIndex))
                if len(node.dims) > ndim:
                    raise TqlTypeError(
                        f"{render_expr(node)}: {len(node.dims)} slice dims on rank-{ndim} tensor"
                    )
                return SCALAR if index_dims == ndim else ARRAY
        return UNKNOWN
    if isinstance(node, UnaryOp):
        inner = infer_kind(node.operand, schemas)
        if node.op == "NOT":
            if inner == ARRAY:
                raise TqlTypeError("NOT needs a per-row boolean, got an array")
            return BOOL
        return inner
    if isinstance(node, BinOp):
        left = infer_kind(node.left, schemas)
        right = infer_kind(node.right, schemas)
        if node.op in ("AND", "OR"):
            for side in (left, right):
                if side == ARRAY:
                    raise TqlTypeError(f"{node.op} needs per-row booleans, got an array")
            return BOOL
        if node.op in COMPARISONS:
            if STRING in (left, right) and node.op not in ("==", "!="):
                raise TqlTypeError(f"cannot order strings with {node.op}")
            if left == ARRAY and right == ARRAY:
                return ARRAY  # elementwise; only valid under ANY/ALL
            if ARRAY in (left, right):
                return UNKNOWN
            return BOOL
        # arithmetic
        if ARRAY in (left, right):
            return ARRAY
        if UNKNOWN in (left, right):
            return UNKNOWN
        return SCALAR
    if isinstance(node, Call):
        if node.name in ("MEAN", "SUM", "MIN", "MAX"):
            _require_args(node, 1)
            return SCALAR
        if node.name == "SHAPE":
            _require_args(node, 1)
            return ARRAY
        if node.name in ("ANY", "ALL"):
            _require_args(node, 1)
            return BOOL
        if node.name == "CONTAINS":
            _require_args(node, 2)
            return BOOL
        if node.name == "IOU":
            _require_args(node, 2)
            return SCALAR
        if node.name == "NORMALIZE":
            _require_args(node, 2)
            return ARRAY
        raise TqlTypeError(f"unhandled function {node.name}")
    raise TqlTypeError(f"not an expression: {node!r}")


def _require_args(node: Call, n: int) -> None:
    if len(node.args) != n:
        raise TqlTypeError(f"{node.name} takes {n} argument(s), got {len(node.args)}")


def check_and_plan(ast: Query, schemas: dict[str, HtypeSchema]) -> QueryPlan:
    """Type-check the query against the schema and compute the fetch set."""
    projections = [(resolve_strings(e, schemas), alias) for e, alias in ast.projections]
    where = resolve_strings(ast.where, schemas) if ast.where is not None else None
    order_by = (
        (resolve_strings(ast.order_by[0], schemas), ast.order_by[1])
        if ast.order_by is not None
        else None
    )
    arrange_by = resolve_strings(ast.arrange_by, schemas) if ast.arrange_by is not None else None
    resolved = Query(
        projections=projections,
        version=ast.version,
        where=where,
        order_by=order_by,
        arrange_by=arrange_by,
        limit=ast.limit,
    )

    aliases: list[str] = []
    for expr, alias in resolved.projections:
        infer_kind(expr, schemas)
        name = alias or (expr.path if isinstance(expr, TensorRef) else render_expr(expr))
        if name in aliases:
            raise TqlTypeError(f"duplicate projection alias {name!r}")
        aliases.append(name)
    if where is not None:
        kind = infer_kind(where, schemas)
        if kind == ARRAY:
            raise TqlTypeError(
                "WHERE must evaluate to one boolean per row; wrap array "
                "comparisons in ANY(...) or ALL(...)"
            )
    if order_by is not None:
        kind = infer_kind(order_by[0], schemas)
        if kind == ARRAY:
            raise TqlTypeError("ORDER BY expression must be scalar per row")
    if arrange_by is not None:
        infer_kind(arrange_by, schemas)

    fetch: list[str] = []
    exprs = [e for e, _ in resolved.projections]
    for part in (where, order_by[0] if order_by else None, arrange_by):
        if part is not None:
            exprs.append(part)
    for expr in exprs:
        for node in walk(expr):
            if isinstance(node, TensorRef):
                if node.path not in schemas:
                    raise UnknownTensorError(f"unknown tensor {node.path!r}")
                if node.path not in fetch:
                    fetch.append(node.path)
    return QueryPlan(ast=resolved, fetch_tensors=fetch, schemas=schemas, aliases=aliases)
