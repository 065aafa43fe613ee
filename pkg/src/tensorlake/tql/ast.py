"""Query AST node types and the canonical renderer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union


@dataclass(frozen=True)
class TensorRef:
    path: str  # slash paths address tensors inside groups


@dataclass(frozen=True)
class Literal:
    value: Union[int, float, str]


@dataclass(frozen=True)
class ArrayLiteral:
    items: tuple


@dataclass(frozen=True)
class DimIndex:
    index: int


@dataclass(frozen=True)
class DimRange:
    start: Optional[int]
    stop: Optional[int]


@dataclass(frozen=True)
class SliceExpr:
    base: "Expression"
    dims: tuple


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * / > >= < <= == != AND OR
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class UnaryOp:
    op: str  # NOT, -
    operand: "Expression"


@dataclass(frozen=True)
class Call:
    name: str  # upper-cased builtin name
    args: tuple


Expression = Union[TensorRef, Literal, ArrayLiteral, SliceExpr, BinOp, UnaryOp, Call]


@dataclass
class Query:
    projections: list[tuple[Expression, Optional[str]]]
    version: Optional[str] = None
    where: Optional[Expression] = None
    order_by: Optional[tuple[Expression, bool]] = None  # (expr, descending)
    arrange_by: Optional[Expression] = None
    limit: Optional[int] = None


def render_expr(node: Expression) -> str:
    if isinstance(node, TensorRef):
        return node.path
    if isinstance(node, Literal):
        if isinstance(node.value, str):
            escaped = node.value.replace('"', '\\"')
            return f'"{escaped}"'
        return repr(node.value)
    if isinstance(node, ArrayLiteral):
        return "[" + ", ".join(render_expr(i) for i in node.items) + "]"
    if isinstance(node, SliceExpr):
        dims = []
        for d in node.dims:
            if isinstance(d, DimIndex):
                dims.append(str(d.index))
            else:
                lo = "" if d.start is None else str(d.start)
                hi = "" if d.stop is None else str(d.stop)
                dims.append(f"{lo}:{hi}")
        return f"{render_expr(node.base)}[{', '.join(dims)}]"
    if isinstance(node, BinOp):
        return f"({render_expr(node.left)} {node.op} {render_expr(node.right)})"
    if isinstance(node, UnaryOp):
        if node.op == "NOT":
            return f"(NOT {render_expr(node.operand)})"
        return f"(-{render_expr(node.operand)})"
    if isinstance(node, Call):
        return f"{node.name}(" + ", ".join(render_expr(a) for a in node.args) + ")"
    raise TypeError(f"not an expression node: {node!r}")


def render(query: Query) -> str:
    """Canonical query text; parse(render(q)) round-trips to an equal AST."""
    parts = []
    projs = []
    for expr, alias in query.projections:
        text = render_expr(expr)
        projs.append(f"{text} AS {alias}" if alias else text)
    parts.append("SELECT " + ", ".join(projs))
    parts.append("FROM dataset")
    if query.version is not None:
        escaped = query.version.replace('"', '\\"')
        parts.append(f'VERSION "{escaped}"')
    if query.where is not None:
        parts.append("WHERE " + render_expr(query.where))
    if query.order_by is not None:
        expr, desc = query.order_by
        parts.append("ORDER BY " + render_expr(expr) + (" DESC" if desc else " ASC"))
    if query.arrange_by is not None:
        parts.append("ARRANGE BY " + render_expr(query.arrange_by))
    if query.limit is not None:
        parts.append(f"LIMIT {query.limit}")
    return " ".join(parts)


def walk(node) -> list:
    """All expression nodes reachable from ``node``, preorder."""
    out = [node]
    if isinstance(node, SliceExpr):
        out.extend(walk(node.base))
    elif isinstance(node, BinOp):
        out.extend(walk(node.left))
        out.extend(walk(node.right))
    elif isinstance(node, UnaryOp):
        out.extend(walk(node.operand))
    elif isinstance(node, (Call, ArrayLiteral)):
        for arg in (node.args if isinstance(node, Call) else node.items):
            out.extend(walk(arg))
    return out
