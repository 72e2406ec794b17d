import numpy as np
import pytest

from eqlatent import expr, generator
from eqlatent.dag import canonical_string, validate
from eqlatent.expr import parse_equation
from eqlatent.metrics import (
    EquivalenceVerdict,
    InsufficientDomain,
    RewriteBudgetExceeded,
    equivalent,
    moran_i,
    prior_sample_report,
    reconstruction_accuracy,
    simplify,
    solution_rate,
)


def tree(text):
    return parse_equation(text)


class TestSimplify:
    def test_commutative_sort(self):
        assert simplify(tree("x2 + x1")) == simplify(tree("x1 + x2"))

    def test_associative_flatten(self):
        a = simplify(tree("(x1 + x2) + x3"))
        b = simplify(tree("x1 + (x2 + x3)"))
        assert a == b

    def test_mul_chains(self):
        a = simplify(tree("x3 * (x1 * x2)"))
        b = simplify(tree("(x2 * x3) * x1"))
        assert a == b

    def test_log_exp_collapses(self):
        assert simplify(tree("log(exp(x1))")) == tree("x1")
        assert simplify(tree("log(exp(x1 + x2))")) == simplify(tree("x1 + x2"))

    def test_exp_log_left_alone(self):
        t = tree("exp(log(x1))")
        assert simplify(t) == t

    def test_idempotent_on_random_trees(self):
        rng = np.random.default_rng(1)
        cfg = generator.GenConfig(seed=1)
        for _ in range(300):
            t = expr.to_expression(generator.sample_equation(rng, cfg))
            s = simplify(t)
            assert simplify(s) == s

    def test_budget_zero_raises(self):
        with pytest.raises(RewriteBudgetExceeded):
            simplify(tree("x1 + x2"), max_passes=0)


class TestEquivalent:
    def test_commutative_pair_canonical(self):
        v = equivalent(tree("x1 + x2"), tree("x2 + x1"), d=2)
        assert v.equivalent and v.method == "canonical"

    def test_numeric_equivalence(self):
        # algebraically equal but not syntactically reducible by the rewriter
        v = equivalent(tree("(x1 * x2) / x2"), tree("x1"), d=2)
        assert v.equivalent and v.method == "numeric"

    def test_mul_vs_pow_not_equivalent(self):
        v = equivalent(tree("x1 * x1"), tree("pow(x1, x1)"), d=1)
        assert not v.equivalent

    def test_sin_vs_cos_gap(self):
        v = equivalent(tree("sin(x1)"), tree("cos(x1)"), d=1)
        assert not v.equivalent
        assert v.method == "numeric"
        assert v.max_abs_gap > 1.0

    def test_insufficient_domain_raises(self):
        with pytest.raises(InsufficientDomain):
            equivalent(tree("log(x1 - x1)"), tree("x1"), d=1)

    def test_deterministic_given_rng(self):
        a = equivalent(tree("(x1 * x2) / x2"), tree("x1"), d=2,
                       rng=np.random.default_rng(3))
        b = equivalent(tree("(x1 * x2) / x2"), tree("x1"), d=2,
                       rng=np.random.default_rng(3))
        assert a == b


class _EchoModel:
    """Stub model whose decode returns the encoded equation verbatim."""

    def __init__(self, dags):
        self._by_key = {}
        self._next = 0
        self._dags = dags

    def encode(self, dag, cond=None):
        import torch

        idx = self._dags.index(dag)
        return torch.tensor([[float(idx)]]), torch.zeros(1, 1)

    def free_decode(self, z, cond=None, stochastic=False):
        return [self._dags[int(z[0, 0])]]


class TestReconstructionAccuracy:
    def test_echo_model_scores_100(self):
        rng = np.random.default_rng(5)
        cfg = generator.GenConfig(seed=5)
        dags = [generator.sample_equation(rng, cfg) for _ in range(10)]
        assert reconstruction_accuracy(_EchoModel(dags), dags) == 100.0

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError):
            reconstruction_accuracy(_EchoModel([]), [])


class TestPriorSampleReport:
    def test_degenerate_identical_samples(self):
        dag = expr.from_expression(tree("x1 + x2"))
        rep = prior_sample_report([dag] * 1000, set())
        assert rep.validity_pct == 100.0
        assert rep.uniqueness_pct == pytest.approx(0.1)
        assert rep.novelty_pct == 100.0

    def test_training_membership_kills_novelty(self):
        dag = expr.from_expression(tree("x1 + x2"))
        rep = prior_sample_report([dag] * 10, {canonical_string(dag)})
        assert rep.novelty_pct == 0.0

    def test_invalid_samples_counted_in_denominator(self):
        from eqlatent.dag import EquationDag

        good = expr.from_expression(tree("x1 + x2"))
        bad = EquationDag(("x1", "sin"), ((0, 1, 0),), 1)
        assert not validate(bad).valid
        rep = prior_sample_report([good, bad, bad, bad], set())
        assert rep.validity_pct == 25.0
        assert rep.uniqueness_pct == 100.0

    def test_as_dict_fields(self):
        rep = prior_sample_report([expr.from_expression(tree("x1"))], set())
        assert set(rep.as_dict()) == {
            "n_samples", "validity_pct", "uniqueness_pct", "novelty_pct"}


class TestSolutionRate:
    def test_all_matching(self):
        verdicts = [EquivalenceVerdict(True, "canonical")] * 4
        assert solution_rate(verdicts) == 100.0

    def test_mixed(self):
        verdicts = [EquivalenceVerdict(True, "canonical"),
                    EquivalenceVerdict(False, "numeric", 1.0)]
        assert solution_rate(verdicts) == 50.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            solution_rate([])


def moran_oracle(grid):
    """Direct double-loop rook-adjacency Moran's I."""
    grid = np.asarray(grid, dtype=float)
    rows, cols = grid.shape
    mean = grid.mean()
    dev = grid - mean
    num = 0.0
    w = 0
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    num += dev[r, c] * dev[rr, cc]
                    w += 1
    return (grid.size / w) * (num / (dev**2).sum())


class TestMoranI:
    def test_constant_grid_zero(self):
        assert moran_i(np.ones((5, 5))) == 0.0

    def test_checkerboard_negative(self):
        grid = np.indices((8, 8)).sum(axis=0) % 2
        assert moran_i(grid) < -0.9

    def test_smooth_gradient_positive(self):
        grid = np.linspace(0, 1, 64).reshape(8, 8)
        assert moran_i(grid) > 0.5

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            grid = rng.normal(size=(6, 7))
            assert moran_i(grid) == pytest.approx(moran_oracle(grid), abs=1e-12)
