"""Random equation sampling and synthetic (X, y) dataset creation.

Equations are drawn as uniform random expression-tree shapes with a
weighted operator pick at every internal node and leaves uniform over the
input variables, then converted to DAG form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr
from .dag import OPS, DomainError, EquationDag, canonical_string, evaluate

__all__ = [
    "GenConfig",
    "Corpus",
    "Dataset",
    "GenerationExhausted",
    "UndefinedAlmostEverywhere",
    "sample_equation",
    "generate_corpus",
    "synthesize_dataset",
]


class GenerationExhausted(RuntimeError):
    """Could not reach the requested number of distinct equations."""


class UndefinedAlmostEverywhere(RuntimeError):
    """The equation is undefined on essentially all of the sampling box."""


def _default_weights() -> dict[str, float]:
    return {name: 1.0 for name in OPS}


@dataclass
class GenConfig:
    d: int = 3
    max_internal_nodes: int = 10
    operator_weights: dict[str, float] = field(default_factory=_default_weights)
    seed: int = 0
    input_range: tuple[float, float] = (-2.0, 2.0)

    def __post_init__(self):
        if self.max_internal_nodes < 1:
            raise ValueError("max_internal_nodes must be >= 1")
        weights = {k: float(v) for k, v in self.operator_weights.items()}
        unknown = set(weights) - set(OPS)
        if unknown:
            raise ValueError(f"unknown operators in weights: {sorted(unknown)}")
        if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
            raise ValueError("operator weights must be nonnegative with at least one positive")
        self.operator_weights = weights


@dataclass
class Corpus:
    train: list[EquationDag]
    test: list[EquationDag]
    canonical_index: set[str]
    config: GenConfig | None = None


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    source: EquationDag | None = None
    source_id: str | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise ValueError("X must be n x d and y length n")
        if len(self.y) < 1:
            raise ValueError("dataset must contain at least one row")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("dataset contains NaN/inf entries")

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _sample_tree(rng: np.random.Generator, budget: int, config: GenConfig) -> expr.Expr:
    if budget <= 0:
        return expr.Expr(f"x{rng.integers(1, config.d + 1)}")
    names = sorted(config.operator_weights)
    weights = np.array([config.operator_weights[n] for n in names])
    op = names[rng.choice(len(names), p=weights / weights.sum())]
    if OPS[op].arity == 1:
        return expr.Expr(op, (_sample_tree(rng, budget - 1, config),))
    left = int(rng.integers(0, budget))
    return expr.Expr(op, (
        _sample_tree(rng, left, config),
        _sample_tree(rng, budget - 1 - left, config),
    ))


def sample_equation(rng: np.random.Generator, config: GenConfig) -> EquationDag:
    """Draw one valid equation DAG; internal node count <= max_internal_nodes."""
    budget = int(rng.integers(1, config.max_internal_nodes + 1))
    tree = _sample_tree(rng, budget, config)
    return expr.from_expression(tree, num_inputs=config.d)


def _defined_somewhere(dag: EquationDag, config: GenConfig,
                       rng: np.random.Generator, probes: int = 250,
                       min_clean: int = 8) -> bool:
    """Probe the sampling box; equations undefined almost everywhere are
    useless downstream (no dataset can be synthesized for them)."""
    lo, hi = config.input_range
    clean = 0
    for _ in range(probes):
        try:
            y = evaluate(dag, rng.uniform(lo, hi, size=config.d))
        except DomainError:
            continue
        if abs(y) <= 1e12:
            clean += 1
            if clean >= min_clean:
                return True
    return False


def generate_corpus(n: int, config: GenConfig) -> Corpus:
    """n distinct-by-canonical-string equations, split 90/10 train/test.

    Equations whose domain covers almost none of the sampling box are
    rejected so every corpus member admits a synthetic dataset.
    """
    if n < 10:
        raise ValueError("corpus size must be at least 10")
    rng = np.random.default_rng(config.seed)
    probe_rng = np.random.default_rng(config.seed + 0x9E3779B9)
    seen: dict[str, EquationDag] = {}
    draws = 0
    while len(seen) < n:
        if draws >= 50 * n:
            raise GenerationExhausted(
                f"only {len(seen)} distinct equations after {draws} draws (wanted {n})"
            )
        dag = sample_equation(rng, config)
        draws += 1
        key = canonical_string(dag)
        if key in seen or not _defined_somewhere(dag, config, probe_rng):
            continue
        seen[key] = dag

    keys = sorted(seen)
    order = rng.permutation(len(keys))
    n_test = max(1, round(0.1 * n))
    test_keys = [keys[i] for i in order[:n_test]]
    train_keys = [keys[i] for i in order[n_test:]]
    return Corpus(
        train=[seen[k] for k in train_keys],
        test=[seen[k] for k in test_keys],
        canonical_index=set(train_keys),
        config=config,
    )


def synthesize_dataset(dag: EquationDag, n: int, input_range=( -2.0, 2.0),
                       rng: np.random.Generator | None = None) -> Dataset:
    """Sample n clean rows uniformly from the box, rejecting DomainError rows."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = input_range
    d = dag.num_inputs
    rows, ys = [], []
    attempts = 0
    limit = 100 * n
    while len(rows) < n:
        if attempts >= limit:
            raise UndefinedAlmostEverywhere(
                f"{len(rows)}/{n} clean rows after {attempts} attempts"
            )
        x = rng.uniform(lo, hi, size=d)
        attempts += 1
        try:
            y = evaluate(dag, x)
        except DomainError:
            continue
        # reject numerically explosive rows the same way as undefined ones
        if abs(y) > 1e12:
            continue
        rows.append(x)
        ys.append(y)
    return Dataset(np.array(rows), np.array(ys), source=dag)
