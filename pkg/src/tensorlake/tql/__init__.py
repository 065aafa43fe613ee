"""Tensor Query Language: a SQL dialect extended with array indexing/slicing
and numeric built-ins, compiled against a dataset schema and executed at a
pinned version to produce a DatasetView."""

from tensorlake.tql.ast import (
    ArrayLiteral,
    BinOp,
    Call,
    DimIndex,
    DimRange,
    Literal,
    Query,
    SliceExpr,
    TensorRef,
    UnaryOp,
    render,
)
from tensorlake.tql.parser import parse
from tensorlake.tql.planner import QueryPlan, check_and_plan
from tensorlake.tql.executor import execute, execute_query

__all__ = [
    "ArrayLiteral",
    "BinOp",
    "Call",
    "DimIndex",
    "DimRange",
    "Literal",
    "Query",
    "QueryPlan",
    "SliceExpr",
    "TensorRef",
    "UnaryOp",
    "check_and_plan",
    "execute",
    "execute_query",
    "parse",
    "render",
]
