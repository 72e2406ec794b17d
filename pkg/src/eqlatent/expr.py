"""Expression trees and conversion to/from equation DAGs.

Trees are the human-facing form: shared DAG nodes expand into duplicated
subtrees, and from_expression always builds a tree-shaped DAG in post-order
(operands before operators, slot-0 operand first).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .dag import OPS, OUTPUT_TOKEN, EquationDag, input_index

__all__ = [
    "Expr",
    "MalformedTree",
    "to_expression",
    "from_expression",
    "to_prefix",
    "parse_prefix",
    "to_infix",
    "parse_infix",
    "parse_equation",
]


class MalformedTree(ValueError):
    pass


@dataclass(frozen=True)
class Expr:
    """token is "x<i>" for a variable leaf or an operator name."""

    token: str
    args: tuple["Expr", ...] = ()

    def __post_init__(self):
        if input_index(self.token) is not None:
            if self.args:
                raise MalformedTree(f"variable {self.token} cannot take arguments")
        elif self.token in OPS:
            if len(self.args) != OPS[self.token].arity:
                raise MalformedTree(
                    f"{self.token} expects {OPS[self.token].arity} args, got {len(self.args)}"
                )
        else:
            raise MalformedTree(f"unknown operator token {self.token!r}")

    def max_input(self) -> int:
        idx = input_index(self.token)
        if idx is not None:
            return idx
        return max((a.max_input() for a in self.args), default=0)


def to_expression(dag: EquationDag) -> Expr:
    """Expand a valid DAG into a tree, duplicating shared subgraphs."""

    def walk(i: int) -> Expr:
        tok = dag.nodes[i]
        if input_index(tok) is not None:
            return Expr(tok)
        return Expr(tok, tuple(walk(src) for src, _ in dag.parents(i)))

    out = dag.output_index
    if out is None or not dag.parents(out):
        raise MalformedTree("DAG has no output parent")
    return walk(dag.parents(out)[0][0])


def from_expression(tree: Expr, num_inputs: int | None = None) -> EquationDag:
    """Build a tree-shaped DAG in post-order; output node last."""
    nodes: list[str] = []
    edges: list[tuple[int, int, int]] = []

    def emit(t: Expr) -> int:
        child_ids = [emit(a) for a in t.args]
        i = len(nodes)
        nodes.append(t.token)
        for slot, c in enumerate(child_ids):
            edges.append((c, i, slot))
        return i

    root = emit(tree)
    out = len(nodes)
    nodes.append(OUTPUT_TOKEN)
    edges.append((root, out, 0))
    d = num_inputs if num_inputs is not None else max(tree.max_input(), 1)
    return EquationDag(tuple(nodes), tuple(edges), d)


def to_prefix(tree: Expr) -> str:
    parts: list[str] = []

    def walk(t: Expr):
        parts.append(t.token)
        for a in t.args:
            walk(a)

    walk(tree)
    return " ".join(parts)


def parse_prefix(text: str) -> Expr:
    tokens = text.split()
    pos = 0

    def parse() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise MalformedTree("unexpected end of prefix expression")
        tok = tokens[pos]
        pos += 1
        if input_index(tok) is not None:
            return Expr(tok)
        if tok not in OPS:
            raise MalformedTree(f"unknown operator token {tok!r}")
        return Expr(tok, tuple(parse() for _ in range(OPS[tok].arity)))

    tree = parse()
    if pos != len(tokens):
        raise MalformedTree(f"trailing tokens: {tokens[pos:]}")
    return tree


_INFIX_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
_PRECEDENCE = {"add": 1, "sub": 1, "mul": 2, "div": 2, "pow": 3}


def to_infix(tree: Expr) -> str:
    def walk(t: Expr, parent_prec: int) -> str:
        if input_index(t.token) is not None:
            return t.token
        if t.token in _INFIX_SYMBOL:
            prec = _PRECEDENCE[t.token]
            left = walk(t.args[0], prec)
            right = walk(t.args[1], prec)
            s = f"{left} {_INFIX_SYMBOL[t.token]} {right}"
            # equal precedence is parenthesized too, so reparsing is structure-exact
            if prec <= parent_prec:
                return f"({s})"
            return s
        return f"{t.token}({walk(t.args[0], 0)})"

    return walk(tree, 0)


_TOKEN_RE = re.compile(r"\s*([A-Za-z_][A-Za-z_0-9]*|[()+\-*/^,])")


def _tokenize(text: str) -> list[str]:
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise MalformedTree(f"bad character at {text[pos:]!r}")
            break
        out.append(m.group(1))
        pos = m.end()
    return out


def parse_infix(text: str) -> Expr:
    """Parse "x1 + sin(x2) * x3" style input; ^ is right-associative pow.

    Function-call notation is accepted for every operator, so prefix-style
    strings like "add(x1, x2)" parse too.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek() -> str | None:
        return tokens[pos] if pos < len(tokens) else None

    def take(expected: str | None = None) -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise MalformedTree("unexpected end of expression")
        tok = tokens[pos]
        if expected is not None and tok != expected:
            raise MalformedTree(f"expected {expected!r}, found {tok!r}")
        pos += 1
        return tok

    def parse_sum() -> Expr:
        node = parse_product()
        while peek() in ("+", "-"):
            op = "add" if take() == "+" else "sub"
            node = Expr(op, (node, parse_product()))
        return node

    def parse_product() -> Expr:
        node = parse_power()
        while peek() in ("*", "/"):
            op = "mul" if take() == "*" else "div"
            node = Expr(op, (node, parse_power()))
        return node

    def parse_power() -> Expr:
        base = parse_atom()
        if peek() == "^":
            take()
            return Expr("pow", (base, parse_power()))
        return base

    def parse_atom() -> Expr:
        tok = take()
        if tok == "(":
            node = parse_sum()
            take(")")
            return node
        if input_index(tok) is not None:
            return Expr(tok)
        if tok in OPS:
            take("(")
            args = [parse_sum()]
            while peek() == ",":
                take()
                args.append(parse_sum())
            take(")")
            return Expr(tok, tuple(args))
        raise MalformedTree(f"unknown token {tok!r}")

    tree = parse_sum()
    if pos != len(tokens):
        raise MalformedTree(f"trailing tokens: {tokens[pos:]}")
    return tree


def parse_equation(text: str) -> Expr:
    """Parse either prefix ("add x1 x2") or infix ("x1 + x2") notation."""
    stripped = text.strip()
    if re.fullmatch(r"[A-Za-z_0-9 ]+", stripped) and " " in stripped:
        return parse_prefix(stripped)
    return parse_infix(stripped)
