"""Evaluation metrics: reconstruction, prior-sample quality, equivalence.

Symbolic comparison uses a bounded rewrite normalizer plus a numeric
fallback on random points; there is no full computer-algebra system here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import expr
from .dag import DomainError, EquationDag, canonical_string, evaluate, validate
from .expr import Expr

__all__ = [
    "PriorSampleReport",
    "EquivalenceVerdict",
    "RewriteBudgetExceeded",
    "InsufficientDomain",
    "simplify",
    "equivalent",
    "reconstruction_accuracy",
    "prior_sample_report",
    "solution_rate",
    "moran_i",
]


class RewriteBudgetExceeded(RuntimeError):
    def __init__(self, tree: Expr):
        self.tree = tree
        super().__init__("rewrite did not reach a fixpoint within budget")


class InsufficientDomain(RuntimeError):
    pass


@dataclass
class PriorSampleReport:
    n_samples: int
    validity_pct: float
    uniqueness_pct: float
    novelty_pct: float
    sample_canonicals: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "validity_pct": self.validity_pct,
            "uniqueness_pct": self.uniqueness_pct,
            "novelty_pct": self.novelty_pct,
        }


@dataclass
class EquivalenceVerdict:
    equivalent: bool
    method: str  # canonical | numeric
    max_abs_gap: float = 0.0


def _rewrite_once(t: Expr) -> Expr:
    args = tuple(_rewrite_once(a) for a in t.args)

    # log(exp(u)) -> u; exp(log(u)) is left alone (u may be non-positive)
    if t.token == "log" and args[0].token == "exp":
        return args[0].args[0]

    if t.token in ("add", "mul"):
        # flatten same-operator chains, sort operands, re-nest left-deep
        flat: list[Expr] = []
        stack = list(args)
        while stack:
            a = stack.pop()
            if a.token == t.token:
                stack.extend(a.args)
            else:
                flat.append(a)
        flat.sort(key=_sort_key)
        node = flat[0]
        for a in flat[1:]:
            node = Expr(t.token, (node, a))
        return node

    return Expr(t.token, args)


def _sort_key(t: Expr) -> str:
    return expr.to_prefix(t)


def simplify(tree: Expr, max_passes: int = 100) -> Expr:
    """Normalize to a fixpoint of the rewrite rules (<= max_passes)."""
    current = tree
    for _ in range(max_passes):
        rewritten = _rewrite_once(current)
        if rewritten == current:
            return current
        current = rewritten
    raise RewriteBudgetExceeded(current)


def equivalent(a: Expr, b: Expr, d: int, rng: np.random.Generator | None = None,
               n_points: int = 100, min_clean: int = 30,
               rel_tol: float = 1e-6) -> EquivalenceVerdict:
    """Canonical comparison after simplify, then a numeric identity test.

    Numeric test: both sides evaluated at random points in [-2, 2]^d,
    points where either side is undefined are rejected.
    """
    try:
        if expr.to_prefix(simplify(a)) == expr.to_prefix(simplify(b)):
            return EquivalenceVerdict(True, "canonical")
    except RewriteBudgetExceeded:
        pass

    rng = rng if rng is not None else np.random.default_rng(0)
    dag_a = expr.from_expression(a, num_inputs=d)
    dag_b = expr.from_expression(b, num_inputs=d)
    clean = 0
    max_gap = 0.0
    max_mag = 1.0
    for _ in range(10_000):
        x = rng.uniform(-2.0, 2.0, size=d)
        try:
            va = evaluate(dag_a, x)
            vb = evaluate(dag_b, x)
        except DomainError:
            continue
        clean += 1
        max_gap = max(max_gap, abs(va - vb))
        max_mag = max(max_mag, abs(va))
        if clean >= n_points:
            break
    if clean < min_clean:
        raise InsufficientDomain(f"only {clean} clean points in 10,000 draws")
    return EquivalenceVerdict(max_gap <= rel_tol * max_mag, "numeric", max_gap)


def reconstruction_accuracy(model, test: list[EquationDag],
                            cond_raw: np.ndarray | None = None) -> float:
    """Deterministic protocol: z = mu, greedy decode, canonical equality."""
    if not test:
        raise ValueError("test set is empty")
    matches = 0
    with torch.no_grad():
        for i, dag in enumerate(test):
            cond = cond_raw[i] if cond_raw is not None else None
            mu, _ = model.encode(dag, cond)
            rec = model.free_decode(mu, cond, stochastic=False)[0]
            if validate(rec).valid and canonical_string(rec) == canonical_string(dag):
                matches += 1
    return 100.0 * matches / len(test)


def prior_sample_report(samples: list[EquationDag],
                        training_index: set[str]) -> PriorSampleReport:
    """Validity / uniqueness / novelty over decoded prior samples.

    Uniqueness is computed over valid samples; novelty over valid unique
    samples not present in the training canonical index.
    """
    n = len(samples)
    valid_canons = [canonical_string(g) for g in samples if validate(g).valid]
    distinct = set(valid_canons)
    novel = {c for c in distinct if c not in training_index}
    return PriorSampleReport(
        n_samples=n,
        validity_pct=100.0 * len(valid_canons) / n if n else 0.0,
        uniqueness_pct=100.0 * len(distinct) / len(valid_canons) if valid_canons else 0.0,
        novelty_pct=100.0 * len(novel) / len(distinct) if distinct else 0.0,
        sample_canonicals=valid_canons,
    )


def solution_rate(verdicts: list[EquivalenceVerdict]) -> float:
    if not verdicts:
        raise ValueError("no discovery verdicts supplied")
    return 100.0 * sum(1 for v in verdicts if v.equivalent) / len(verdicts)


def moran_i(grid: np.ndarray) -> float:
    """Moran's I spatial autocorrelation on a 2D grid, rook adjacency."""
    grid = np.asarray(grid, dtype=float)
    mean = grid.mean()
    dev = grid - mean
    num = 0.0
    w = 0
    rows, cols = grid.shape
    for dr, dc in ((0, 1), (1, 0)):
        a = dev[: rows - dr, : cols - dc]
        b = dev[dr:, dc:]
        num += 2.0 * (a * b).sum()
        w += 2 * a.size
    denom = (dev**2).sum()
    if denom == 0:
        return 0.0
    return (grid.size / w) * (num / denom)
