"""Hand-written lexer and recursive-descent parser for the query grammar:

    query   := SELECT proj ("," proj)* FROM "dataset" [VERSION string]
               [WHERE expr] [ORDER BY expr [ASC|DESC]] [ARRANGE BY expr]
               [LIMIT int]
    proj    := expr [AS ident]
    slice   := "[" dimslice ("," dimslice)* "]"
    dimslice := [int] ":" [int] | int

Keywords are case-insensitive; errors carry line and column.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from tensorlake.errors import TqlSyntaxError, UnknownFunctionError
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
)
from tensorlake.tql.functions import BUILTIN_FUNCTIONS

KEYWORDS = {
    "SELECT", "FROM", "WHERE", "ORDER", "ARRANGE", "BY", "ASC", "DESC",
    "LIMIT", "AS", "VERSION", "AND", "OR", "NOT", "DATASET",
}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+(\.\d+)?([eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*(/[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<op>>=|<=|==|!=|[-+*/><=(),:\[\]])
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str  # NUMBER, IDENT, KEYWORD, STRING, OP, EOF
    value: object
    line: int
    column: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise TqlSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        chunk = m.group(0)
        if m.lastgroup == "number":
            value = float(chunk) if any(c in chunk for c in ".eE") else int(chunk)
            tokens.append(Token("NUMBER", value, line, col))
        elif m.lastgroup == "ident":
            upper = chunk.upper()
            if upper in KEYWORDS and "/" not in chunk:
                tokens.append(Token("KEYWORD", upper, line, col))
            else:
                tokens.append(Token("IDENT", chunk, line, col))
        elif m.lastgroup == "string":
            body = chunk[1:-1].replace('\\"', '"').replace("\\'", "'")
            tokens.append(Token("STRING", body, line, col))
        elif m.lastgroup == "op":
            tokens.append(Token("OP", chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            col = len(chunk) - chunk.rfind("\n")
        else:
            col += len(chunk)
        pos = m.end()
    tokens.append(Token("EOF", None, line, col))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def cur(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.cur
        self.pos += 1
        return tok

    def error(self, message: str) -> TqlSyntaxError:
        return TqlSyntaxError(message, self.cur.line, self.cur.column)

    def accept_keyword(self, *names: str) -> Optional[str]:
        if self.cur.kind == "KEYWORD" and self.cur.value in names:
            return self.advance().value
        return None

    def expect_keyword(self, name: str) -> None:
        if not self.accept_keyword(name):
            raise self.error(f"expected {name}, found {self.cur.value!r}")

    def accept_op(self, *ops: str) -> Optional[str]:
        if self.cur.kind == "OP" and self.cur.value in ops:
            return self.advance().value
        return None

    def expect_op(self, op: str) -> None:
        if not self.accept_op(op):
            raise self.error(f"expected {op!r}, found {self.cur.value!r}")

    # --- grammar ----------------------------------------------------------

    def parse_query(self) -> Query:
        self.expect_keyword("SELECT")
        projections = [self.parse_projection()]
        while self.accept_op(","):
            projections.append(self.parse_projection())
        self.expect_keyword("FROM")
        self.expect_keyword("DATASET")
        version = None
        if self.accept_keyword("VERSION"):
            if self.cur.kind != "STRING":
                raise self.error("VERSION requires a quoted commit id or branch name")
            version = self.advance().value
        where = None
        if self.accept_keyword("WHERE"):
            where = self.parse_expr()
        order_by = None
        if self.accept_keyword("ORDER"):
            self.expect_keyword("BY")
            expr = self.parse_expr()
            desc = False
            if self.accept_keyword("DESC"):
                desc = True
            else:
                self.accept_keyword("ASC")
            order_by = (expr, desc)
        arrange_by = None
        if self.accept_keyword("ARRANGE"):
            self.expect_keyword("BY")
            arrange_by = self.parse_expr()
        limit = None
        if self.accept_keyword("LIMIT"):
            if self.cur.kind != "NUMBER" or not isinstance(self.cur.value, int):
                raise self.error("LIMIT requires an integer")
            limit = self.advance().value
            if limit < 0:
                raise self.error("LIMIT must be non-negative")
        if self.cur.kind != "EOF":
            raise self.error(f"unexpected trailing input {self.cur.value!r}")
        return Query(
            projections=projections,
            version=version,
            where=where,
            order_by=order_by,
            arrange_by=arrange_by,
            limit=limit,
        )

    def parse_projection(self):
        expr = self.parse_expr()
        alias = None
        if self.accept_keyword("AS"):
            if self.cur.kind != "IDENT":
                raise self.error("AS requires an identifier")
            alias = self.advance().value
        return (expr, alias)

    def parse_expr(self):
        return self.parse_or()

    def parse_or(self):
        left = self.parse_and()
        while self.accept_keyword("OR"):
            left = BinOp("OR", left, self.parse_and())
        return left

    def parse_and(self):
        left = self.parse_not()
        while self.accept_keyword("AND"):
            left = BinOp("AND", left, self.parse_not())
        return left

    def parse_not(self):
        if self.accept_keyword("NOT"):
            return UnaryOp("NOT", self.parse_not())
        return self.parse_comparison()

    def parse_comparison(self):
        left = self.parse_additive()
        op = self.accept_op(">", ">=", "<", "<=", "==", "!=")
        if op:
            return BinOp(op, left, self.parse_additive())
        if self.cur.kind == "OP" and self.cur.value == "=":
            raise self.error("use == for equality")
        return left

    def parse_additive(self):
        left = self.parse_multiplicative()
        while True:
            op = self.accept_op("+", "-")
            if not op:
                return left
            left = BinOp(op, left, self.parse_multiplicative())

    def parse_multiplicative(self):
        left = self.parse_unary()
        while True:
            op = self.accept_op("*", "/")
            if not op:
                return left
            left = BinOp(op, left, self.parse_unary())

    def parse_unary(self):
        if self.accept_op("-"):
            operand = self.parse_unary()
            if isinstance(operand, Literal) and isinstance(operand.value, (int, float)):
                return Literal(-operand.value)
            return UnaryOp("-", operand)
        return self.parse_postfix()

    def parse_postfix(self):
        expr = self.parse_primary()
        while self.cur.kind == "OP" and self.cur.value == "[":
            self.advance()
            dims = [self.parse_dimslice()]
            while self.accept_op(","):
                dims.append(self.parse_dimslice())
            self.expect_op("]")
            expr = SliceExpr(expr, tuple(dims))
        return expr

    def parse_dimslice(self):
        start = None
        if self.cur.kind == "NUMBER":
            start = self._int_token("slice bound")
        elif self.accept_op("-"):
            start = -self._int_token("slice bound")
        if self.accept_op(":"):
            stop = None
            if self.cur.kind == "NUMBER":
                stop = self._int_token("slice bound")
            elif self.accept_op("-"):
                stop = -self._int_token("slice bound")
            return DimRange(start, stop)
        if start is None:
            raise self.error("expected an index or a ':' slice")
        return DimIndex(start)

    def _int_token(self, what: str) -> int:
        if self.cur.kind != "NUMBER" or not isinstance(self.cur.value, int):
            raise self.error(f"expected an integer {what}")
        return self.advance().value

    def parse_primary(self):
        tok = self.cur
        if tok.kind == "NUMBER":
            self.advance()
            return Literal(tok.value)
        if tok.kind == "STRING":
            self.advance()
            # resolved to a tensor path at plan time when it names one
            return Literal(tok.value)
        if tok.kind == "OP" and tok.value == "(":
            self.advance()
            inner = self.parse_expr()
            self.expect_op(")")
            return inner
        if tok.kind == "OP" and tok.value == "[":
            self.advance()
            items = []
            if not (self.cur.kind == "OP" and self.cur.value == "]"):
                items.append(self.parse_expr())
                while self.accept_op(","):
                    items.append(self.parse_expr())
            self.expect_op("]")
            return ArrayLiteral(tuple(items))
        if tok.kind == "IDENT":
            name = self.advance().value
            if self.cur.kind == "OP" and self.cur.value == "(":
                upper = name.upper()
                if upper not in BUILTIN_FUNCTIONS:
                    raise UnknownFunctionError(
                        f"unknown function {name!r} (line {tok.line}, column {tok.column})"
                    )
                self.advance()
                args = []
                if not (self.cur.kind == "OP" and self.cur.value == ")"):
                    args.append(self.parse_expr())
                    while self.accept_op(","):
                        args.append(self.parse_expr())
                self.expect_op(")")
                return Call(upper, tuple(args))
            return TensorRef(name)
        raise self.error(f"expected an expression, found {tok.value!r}")


def parse(text: str) -> Query:
    """Parse query text into an AST; raises TqlSyntaxError with position."""
    return _Parser(tokenize(text)).parse_query()
