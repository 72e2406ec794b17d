"""Equation DAGs: structure, validity, evaluation and canonical serialization.

An equation is a rooted DAG whose source nodes are input variables x1..xd,
whose intermediate nodes are operators, and whose single sink is the output.
Node order in an :class:`EquationDag` is always a valid topological order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

__all__ = [
    "OpKind",
    "OPS",
    "EquationDag",
    "ValidityReport",
    "DomainError",
    "validate",
    "evaluate",
    "canonical_string",
    "dag_to_row",
    "dag_from_row",
    "merge_common_subexpressions",
]


@dataclass(frozen=True)
class OpKind:
    name: str
    arity: int
    commutative: bool = False


OPS: dict[str, OpKind] = {
    op.name: op
    for op in (
        OpKind("add", 2, commutative=True),
        OpKind("sub", 2),
        OpKind("mul", 2, commutative=True),
        OpKind("div", 2),
        OpKind("sqrt", 1),
        OpKind("log", 1),
        OpKind("exp", 1),
        OpKind("sin", 1),
        OpKind("cos", 1),
        OpKind("tan", 1),
        OpKind("arcsin", 1),
        OpKind("pow", 2),
    )
}

OUTPUT_TOKEN = "y"


def input_token(index: int) -> str:
    return f"x{index}"


def input_index(token: str) -> int | None:
    """Variable index of an input token ("x3" -> 3), or None."""
    if len(token) > 1 and token[0] == "x" and token[1:].isdigit():
        return int(token[1:])
    return None


@dataclass(frozen=True)
class EquationDag:
    """Nodes are tokens: "x<i>" inputs, operator names, "y" for the output.

    Edges are (src, dst, slot) index triples; slot orders the operands of
    non-commutative binary operators. The node list must be topologically
    ordered (validate() checks this).
    """

    nodes: tuple[str, ...]
    edges: tuple[tuple[int, int, int], ...]
    num_inputs: int

    def parents(self, i: int) -> list[tuple[int, int]]:
        """(src, slot) pairs of in-edges of node i, sorted by slot."""
        return sorted(((s, slot) for s, d, slot in self.edges if d == i),
                      key=lambda e: e[1])

    def children(self, i: int) -> list[int]:
        return [d for s, d, _ in self.edges if s == i]

    @property
    def output_index(self) -> int | None:
        for i, tok in enumerate(self.nodes):
            if tok == OUTPUT_TOKEN:
                return i
        return None


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    violations: tuple[tuple[int, str], ...] = ()


class DomainError(ValueError):
    """A node produced a value outside the real domain (NaN/inf)."""

    def __init__(self, node_index: int, operand):
        self.node_index = node_index
        self.operand = operand
        super().__init__(f"domain error at node {node_index} on {operand!r}")


def validate(dag: EquationDag) -> ValidityReport:
    """Structural validity: arity, acyclicity, single sink, reachability.

    Malformed structure is reported in the ValidityReport, never raised.
    """
    n = len(dag.nodes)
    violations: list[tuple[int, str]] = []

    for s, d, slot in dag.edges:
        if not (0 <= s < n and 0 <= d < n) or slot not in (0, 1):
            return ValidityReport(False, ((max(s, d, 0), "edge_index"),))

    # node order must itself be topological (edges point forward)
    for s, d, _ in dag.edges:
        if s >= d:
            violations.append((d, "acyclic"))

    in_slots: list[list[int]] = [[] for _ in range(n)]
    out_deg = [0] * n
    for s, d, slot in dag.edges:
        if 0 <= d < n:
            in_slots[d].append(slot)
        if 0 <= s < n:
            out_deg[s] += 1

    outputs = [i for i, tok in enumerate(dag.nodes) if tok == OUTPUT_TOKEN]
    if len(outputs) != 1:
        violations.append((n - 1 if n else 0, "single_output"))

    for i, tok in enumerate(dag.nodes):
        idx = input_index(tok)
        if idx is not None:
            if not (1 <= idx <= dag.num_inputs):
                violations.append((i, "input_index"))
            if in_slots[i]:
                violations.append((i, "arity"))
        elif tok == OUTPUT_TOKEN:
            if len(in_slots[i]) != 1:
                violations.append((i, "arity"))
            if out_deg[i] != 0:
                violations.append((i, "sink"))
        elif tok in OPS:
            op = OPS[tok]
            if len(in_slots[i]) != op.arity:
                violations.append((i, "arity"))
            elif op.arity == 2 and not op.commutative and sorted(in_slots[i]) != [0, 1]:
                violations.append((i, "arg_slots"))
            elif op.arity == 1 and in_slots[i] != [0]:
                violations.append((i, "arg_slots"))
        else:
            violations.append((i, "unknown_token"))

    # every node must lie on an input -> output path
    if outputs and not any(v[1] == "acyclic" for v in violations):
        reaches_out = [False] * n
        reaches_out[outputs[0]] = True
        for i in range(n - 1, -1, -1):
            if any(reaches_out[d] for d in dag.children(i)):
                reaches_out[i] = True
        from_input = [input_index(tok) is not None for tok in dag.nodes]
        for i in range(n):
            if not from_input[i] and any(from_input[s] for s, _ in dag.parents(i)):
                from_input[i] = True
        for i in range(n):
            if not (reaches_out[i] and from_input[i]):
                violations.append((i, "reachability"))

    # dedup, keep first occurrence order
    seen = set()
    uniq = tuple(v for v in violations if not (v in seen or seen.add(v)))
    return ValidityReport(len(uniq) == 0, uniq)


def _apply(tok: str, args: list[float], node_index: int) -> float:
    try:
        if tok == "add":
            v = args[0] + args[1]
        elif tok == "sub":
            v = args[0] - args[1]
        elif tok == "mul":
            v = args[0] * args[1]
        elif tok == "div":
            v = args[0] / args[1]
        elif tok == "pow":
            v = math.pow(args[0], args[1])
        elif tok == "sqrt":
            v = math.sqrt(args[0])
        elif tok == "log":
            v = math.log(args[0])
        elif tok == "exp":
            v = math.exp(args[0])
        elif tok == "sin":
            v = math.sin(args[0])
        elif tok == "cos":
            v = math.cos(args[0])
        elif tok == "tan":
            v = math.tan(args[0])
        elif tok == "arcsin":
            v = math.asin(args[0])
        else:
            raise KeyError(tok)
    except (ValueError, OverflowError, ZeroDivisionError):
        raise DomainError(node_index, tuple(args)) from None
    if math.isnan(v) or math.isinf(v):
        raise DomainError(node_index, tuple(args))
    return v


def evaluate(dag: EquationDag, x) -> float:
    """Evaluate the DAG at input vector x (length num_inputs).

    Raises DomainError when any node leaves the real domain.
    """
    values: list[float] = [0.0] * len(dag.nodes)
    for i, tok in enumerate(dag.nodes):
        idx = input_index(tok)
        if idx is not None:
            values[i] = float(x[idx - 1])
        elif tok == OUTPUT_TOKEN:
            values[i] = values[dag.parents(i)[0][0]]
        else:
            args = [values[s] for s, _ in dag.parents(i)]
            values[i] = _apply(tok, args, i)
    out = dag.output_index
    return values[out if out is not None else len(dag.nodes) - 1]


def canonical_string(dag: EquationDag) -> str:
    """Deterministic prefix form with commutative operands sorted.

    Equal strings imply structural identity modulo commutative-argument
    order; shared subgraphs are expanded, so a DAG and its tree expansion
    canonicalize identically.
    """
    memo: dict[int, str] = {}

    def walk(i: int) -> str:
        if i in memo:
            return memo[i]
        tok = dag.nodes[i]
        if input_index(tok) is not None:
            s = tok
        else:
            parts = [walk(src) for src, _ in dag.parents(i)]
            if tok in OPS and OPS[tok].commutative:
                parts.sort()
            s = " ".join([tok] + parts)
        memo[i] = s
        return s

    out = dag.output_index
    root = dag.parents(out)[0][0] if out is not None and dag.parents(out) else len(dag.nodes) - 1
    return walk(root)


def merge_common_subexpressions(dag: EquationDag) -> EquationDag:
    """Collapse structurally identical subgraphs onto shared nodes.

    Preserves evaluation semantics; slot-aware, so operand order of
    non-commutative operators is kept.
    """
    key_of: dict[int, tuple] = {}
    node_for_key: dict[tuple, int] = {}
    new_nodes: list[str] = []
    new_edges: list[tuple[int, int, int]] = []
    remap: dict[int, int] = {}

    for i, tok in enumerate(dag.nodes):
        parents = [(remap[s], slot) for s, slot in dag.parents(i)]
        key = (tok, tuple(parents))
        if key in node_for_key and tok != OUTPUT_TOKEN:
            remap[i] = node_for_key[key]
            continue
        j = len(new_nodes)
        new_nodes.append(tok)
        for s, slot in parents:
            new_edges.append((s, j, slot))
        node_for_key[key] = j
        remap[i] = j
        key_of[j] = key

    return EquationDag(tuple(new_nodes), tuple(new_edges), dag.num_inputs)


def dag_to_row(dag: EquationDag, eq_id: str, infix: str | None = None,
               canonical: str | None = None) -> str:
    """One-line corpus record; field order is fixed."""
    from . import expr  # local import to avoid a cycle

    payload = {
        "id": eq_id,
        "d": dag.num_inputs,
        "nodes": list(dag.nodes),
        "edges": [list(e) for e in dag.edges],
        "infix": infix if infix is not None else expr.to_infix(expr.to_expression(dag)),
        "canonical": canonical if canonical is not None else canonical_string(dag),
    }
    return json.dumps(payload)


def dag_from_row(line: str) -> tuple[str, EquationDag]:
    rec = json.loads(line)
    dag = EquationDag(
        nodes=tuple(rec["nodes"]),
        edges=tuple((int(s), int(d), int(slot)) for s, d, slot in rec["edges"]),
        num_inputs=int(rec["d"]),
    )
    return rec["id"], dag
