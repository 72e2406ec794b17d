"""Acceptance suite: one test per gated criterion, one pass/fail line each.

Heavy fixtures (the 50-equation overfit model and the two 1,000-equation
smoke runs) are session-scoped and shared across criteria.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from eqlatent import embeddings, expr, io, metrics, model as model_mod
from eqlatent.cli import main as cli_main
from eqlatent.dag import OPS, DomainError, canonical_string, evaluate
from eqlatent.expr import Expr, from_expression, to_expression, to_prefix
from eqlatent.generator import Dataset, GenConfig, generate_corpus, sample_equation, synthesize_dataset
from eqlatent.model import GraphCVAE, ModelConfig, train, train_steps
from eqlatent.search import BoConfig, GaussianProcess, maximize_objective, score

REPORT_DIR = Path(__file__).resolve().parent.parent / "reports"


def report(criterion: int, name: str, ok: bool, detail: str):
    line = f"criterion {criterion:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


# -- shared fixtures -----------------------------------------------------------


@pytest.fixture(scope="session")
def overfit_run():
    """50-equation corpus overfit in <= 2,000 steps (shared by 6, 8, 11, 13)."""
    corpus = generate_corpus(56, GenConfig(seed=7, max_internal_nodes=6))
    train_dags = corpus.train[:50]
    config = ModelConfig(d=3, latent_dim=8, hidden_dim=256, batch_size=32,
                         learning_rate=1e-3, alpha=0.03, conditioning="none")
    net, losses = train_steps(train_dags, None, config, max_steps=2000, seed=0)
    net.eval()
    return train_dags, net, losses


@pytest.fixture(scope="session")
def overfit_workspace(overfit_run, tmp_path_factory):
    """Checkpoint + corpus files + per-equation datasets for the CLI criteria."""
    train_dags, net, _ = overfit_run
    root = tmp_path_factory.mktemp("overfit-ws")
    model_mod.save_checkpoint(net, [], root / "model.pt")
    from eqlatent.generator import Corpus

    corpus = Corpus(train=list(train_dags), test=list(train_dags[:5]),
                    canonical_index={canonical_string(g) for g in train_dags},
                    config=GenConfig(seed=7, max_internal_nodes=6))
    io.write_corpus(corpus, root / "train.corpus", root / "test.corpus")
    datasets = []
    for i, dag in enumerate(train_dags[:10]):
        ds = synthesize_dataset(dag, 100, rng=np.random.default_rng(100 + i))
        path = root / "datasets" / f"target-{i:02d}.tsv"
        io.write_dataset(ds, path, source_id=f"target-{i:02d}")
        datasets.append((path, dag))
    return root, datasets


@pytest.fixture(scope="session")
def smoke_runs():
    """1,000-equation corpus, 20 epochs, unconditional and poly-conditioned."""
    corpus = generate_corpus(1000, GenConfig(seed=11))
    train_dags = corpus.train
    results = {}
    for conditioning in ("none", "poly"):
        if conditioning == "poly":
            raw = embeddings.corpus_embeddings(train_dags, "poly", seed=5)
            raw_dim, cond_dim = embeddings.embedding_dim("poly", 3)
        else:
            raw, raw_dim, cond_dim = None, 0, 0
        config = ModelConfig(d=3, latent_dim=56, hidden_dim=256, epochs=20,
                             batch_size=32, learning_rate=1e-3,
                             conditioning=conditioning, cond_dim=cond_dim,
                             raw_cond_dim=raw_dim)
        net, history = train(train_dags, raw, config, seed=2)
        net.eval()
        samples = model_mod.sample_prior(1000, net, raw, seed=3)
        prior = metrics.prior_sample_report(samples, corpus.canonical_index)
        results[conditioning] = {"history": history, "prior": prior}
    return results


# -- criteria ------------------------------------------------------------------


def test_criterion_01_score_formula():
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 2, size=(50, 1))
    identity = from_expression(expr.parse_equation("x1 + x1 - x1"), 1)
    cases = [
        (Dataset(X, X[:, 0]), 1.0),
        (Dataset(X, X[:, 0] + 1.0), 0.5),
        (Dataset(X, X[:, 0] + math.sqrt(3.0)), 0.25),
    ]
    gaps = [abs(score(identity, ds) - want) for ds, want in cases]
    ok = max(gaps) <= 1e-12
    report(1, "score formula exactness", ok, f"max gap {max(gaps):.2e}")


def _eval_tree(t: Expr, x) -> float:
    tok = t.token
    if tok.startswith("x") and tok[1:].isdigit():
        return float(x[int(tok[1:]) - 1])
    args = [_eval_tree(a, x) for a in t.args]
    v = {
        "add": lambda a, b: a + b, "sub": lambda a, b: a - b,
        "mul": lambda a, b: a * b, "div": lambda a, b: a / b,
        "pow": math.pow, "sqrt": math.sqrt, "log": math.log,
        "exp": math.exp, "sin": math.sin, "cos": math.cos,
        "tan": math.tan, "arcsin": math.asin,
    }[tok](*args)
    if math.isnan(v) or math.isinf(v):
        raise ValueError
    return v


def test_criterion_02_evaluation_oracle():
    rng = np.random.default_rng(1)
    cfg = GenConfig(seed=1)
    checked = 0
    worst = 0.0
    for _ in range(1000):
        dag = sample_equation(rng, cfg)
        tree = to_expression(dag)
        for _ in range(10):
            x = rng.uniform(-2, 2, size=3)
            try:
                want = _eval_tree(tree, x)
            except (ValueError, OverflowError, ZeroDivisionError):
                with pytest.raises(DomainError):
                    evaluate(dag, x)
                continue
            got = evaluate(dag, x)
            worst = max(worst, abs(got - want) / max(1.0, abs(want)))
            checked += 1
    ok = worst <= 1e-12
    report(2, "evaluation oracle equivalence", ok,
           f"{checked} clean points, worst rel gap {worst:.2e}")


def test_criterion_03_exhaustive_small_instances():
    unary = [name for name, op in OPS.items() if op.arity == 1]
    binary = [name for name, op in OPS.items() if op.arity == 2]

    # all expression trees over d=1 with <= 7 tree nodes (DAG adds the sink)
    by_size: list[list[Expr]] = [[], [Expr("x1")]]
    counts = [0, 1]
    for m in range(2, 8):
        level: list[Expr] = []
        for op in unary:
            level.extend(Expr(op, (t,)) for t in by_size[m - 1])
        for op in binary:
            for a in range(1, m - 1):
                for left in by_size[a]:
                    for right in by_size[m - 1 - a]:
                        level.append(Expr(op, (left, right)))
        by_size.append(level)
        # independent size recurrence as a count oracle
        want = len(unary) * counts[m - 1] + len(binary) * sum(
            counts[a] * counts[m - 1 - a] for a in range(1, m - 1))
        counts.append(want)
        assert len(level) == want

    total = 0
    failures = 0
    for m in range(1, 8):
        for tree in by_size[m]:
            dag = from_expression(tree, 1)
            total += 1
            back = to_expression(dag)
            if back != tree:
                failures += 1
                continue
            if total % 97 == 0:
                # spot-check the canonical form survives a full second pass
                if canonical_string(from_expression(back, 1)) != canonical_string(dag):
                    failures += 1
    ok = failures == 0
    report(3, "exhaustive small-instance round-trip", ok,
           f"{total} DAGs (<= 8 nodes, d=1), {failures} failures")


def test_criterion_04_gradient_check():
    torch.manual_seed(4)
    net = GraphCVAE(ModelConfig(d=2, latent_dim=4, hidden_dim=8,
                                conditioning="none")).double()
    dags = [from_expression(expr.parse_equation("x1 + x2"), 2),
            from_expression(expr.parse_equation("sin(x1) / x2"), 2)]
    eps = torch.randn(2, 4, generator=torch.Generator().manual_seed(5),
                      dtype=torch.float64)
    total, _, _ = net.loss(dags, eps=eps)
    net.zero_grad()
    total.backward()

    h = 1e-6
    worst = 0.0
    n_checked = 0
    for _, p in net.named_parameters():
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        for i in range(len(flat)):
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + h
                lp = net.loss(dags, eps=eps)[0].item()
                flat[i] = orig - h
                lm = net.loss(dags, eps=eps)[0].item()
                flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = grad[i].item()
            worst = max(worst, abs(analytic - numeric)
                        / max(1.0, abs(analytic), abs(numeric)))
            n_checked += 1
    ok = worst <= 1e-4
    report(4, "gradient correctness", ok,
           f"{n_checked} parameters, worst rel error {worst:.2e}")


def test_criterion_05_kl_monte_carlo():
    gen = torch.Generator().manual_seed(6)
    worst = 0.0
    for _ in range(10):
        mu = torch.randn(1, 8, generator=gen, dtype=torch.float64)
        lv = torch.randn(1, 8, generator=gen, dtype=torch.float64)
        closed = GraphCVAE.kl_divergence(mu, lv).item()
        eps = torch.randn(100_000, 8, generator=gen, dtype=torch.float64)
        z = mu + (0.5 * lv).exp() * eps
        log_q = (-0.5 * ((z - mu) ** 2) / lv.exp() - 0.5 * lv
                 - 0.5 * math.log(2 * math.pi)).sum(dim=1)
        log_p = (-0.5 * z**2 - 0.5 * math.log(2 * math.pi)).sum(dim=1)
        mc = (log_q - log_p).mean().item()
        worst = max(worst, abs(closed - mc) / max(abs(mc), 0.5))
    ok = worst <= 0.02
    report(5, "KL closed form vs Monte Carlo", ok, f"worst rel gap {worst:.4f}")


def test_criterion_06_overfit_reconstruction(overfit_run):
    train_dags, net, losses = overfit_run
    acc = metrics.reconstruction_accuracy(net, train_dags, None)
    ok = acc >= 90.0 and len(losses) <= 2000
    report(6, "overfit reconstruction", ok,
           f"accuracy {acc:.1f}% after {len(losses)} steps")


def test_criterion_07_smoke_training_trend(smoke_runs):
    history = smoke_runs["none"]["history"]
    first, last = history[0]["loss"], history[-1]["loss"]
    ok = last < 0.8 * first
    report(7, "smoke training trend", ok,
           f"first {first:.3f} -> last {last:.3f} (ratio {last / first:.3f})")


def test_criterion_08_prior_sample_pipeline(overfit_run):
    train_dags, net, _ = overfit_run
    samples = model_mod.sample_prior(1000, net, None, seed=1)
    rep = metrics.prior_sample_report(
        samples, {canonical_string(g) for g in train_dags})
    complete = (rep.n_samples == 1000
                and set(rep.as_dict()) == {"n_samples", "validity_pct",
                                           "uniqueness_pct", "novelty_pct"})
    ok = complete and rep.validity_pct >= 40.0
    report(8, "prior-sample pipeline", ok,
           f"validity {rep.validity_pct:.1f}%, uniqueness {rep.uniqueness_pct:.1f}%, "
           f"novelty {rep.novelty_pct:.1f}%")


def test_criterion_09_bo_known_objective():
    wins = 0
    for seed in range(10):
        target = np.random.default_rng(seed).uniform(-2.0, 2.0, size=2)

        def objective(z):
            return float(1.0 / (1.0 + ((z - target) ** 2).sum())), None

        bo = BoConfig(iterations=25, init_points=5, seed=seed)
        _, scores, _ = maximize_objective(objective, 2, bo,
                                          np.random.default_rng(seed * 7919))
        assert len(scores) == 30
        if 1.0 - max(scores) <= 0.1:
            wins += 1
    ok = wins >= 9
    report(9, "BO on known objective", ok, f"{wins}/10 seeds within 0.1 in 30 evals")


def test_criterion_10_gp_posterior_oracle():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(3, 12))
        ell = float(rng.uniform(0.3, 2.0))
        sig = float(rng.uniform(0.5, 2.0))
        noise = float(rng.uniform(1e-6, 1e-3))
        Z = rng.uniform(-3, 3, size=(n, 1))
        s = rng.normal(size=n)
        Q = rng.uniform(-3, 3, size=(5, 1))
        gp = GaussianProcess(ell, sig, noise).fit(Z, s)
        mean, var = gp.posterior(Q)

        def k(A, B):
            d2 = (A[:, None, 0] - B[None, :, 0]) ** 2
            return sig * np.exp(-0.5 * d2 / ell**2)

        Kinv = np.linalg.inv(k(Z, Z) + noise * np.eye(n))
        mean_o = k(Q, Z) @ Kinv @ s
        var_o = np.maximum(sig - np.einsum("ij,jk,ik->i", k(Q, Z), Kinv, k(Q, Z)), 0.0)
        worst = max(worst, np.abs(mean - mean_o).max(), np.abs(var - var_o).max())
    ok = worst <= 1e-8
    report(10, "GP posterior vs dense oracle", ok, f"worst gap {worst:.2e}")


def test_criterion_11_end_to_end_discovery(overfit_workspace, tmp_path):
    root, datasets = overfit_workspace
    runner = CliRunner()
    solved = 0
    for i, (path, gt) in enumerate(datasets):
        gt_prefix = to_prefix(to_expression(gt))
        result = runner.invoke(cli_main, [
            "discover", str(path), "--checkpoint", str(root / "model.pt"),
            "--iterations", "10", "--trials", "10", "--init-points", "5",
            "--seed", "0", "--gt", gt_prefix,
            "--out", str(tmp_path / f"disc-{i:02d}")])
        if result.exit_code != 0:
            continue
        payload = json.loads((tmp_path / f"disc-{i:02d}" / "report.json").read_text())
        if payload.get("verdict", {}).get("equivalent"):
            solved += 1
    rate = 100.0 * solved / len(datasets)
    ok = rate >= 50.0
    report(11, "end-to-end discovery", ok,
           f"solution rate {rate:.0f}% over {len(datasets)} datasets")


def test_criterion_12_conditioning_ablation(smoke_runs):
    REPORT_DIR.mkdir(exist_ok=True)
    payload = {
        "protocol": {"corpus": 1000, "epochs": 20, "seed": 2,
                     "prior_samples": 1000, "prior_seed": 3},
        "rows": {
            name: {
                "final_loss": run["history"][-1]["loss"],
                **run["prior"].as_dict(),
            }
            for name, run in smoke_runs.items()
        },
    }
    out = REPORT_DIR / "conditioning_ablation.json"
    out.write_text(json.dumps(payload, indent=2) + "\n")
    none_v = payload["rows"]["none"]["validity_pct"]
    poly_v = payload["rows"]["poly"]["validity_pct"]
    ok = out.exists() and all("validity_pct" in r for r in payload["rows"].values())
    report(12, "conditioning ablation report", ok,
           f"validity none {none_v:.1f}% vs poly {poly_v:.1f}%, archived at {out}")


def test_criterion_13_latent_heatmap(overfit_workspace, tmp_path):
    root, datasets = overfit_workspace
    runner = CliRunner()
    out = tmp_path / "latent"
    result = runner.invoke(cli_main, [
        "plot-latent", str(datasets[0][0]), "--checkpoint", str(root / "model.pt"),
        "--corpus-dir", str(root), "--resolution", "40", "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = [l for l in (out / "grid.tsv").read_text().splitlines()
            if l and not l.startswith("#")]
    grid = np.zeros((40, 40))
    for line in rows:
        r, c, _, _, s, *_ = line.split("\t")
        grid[int(r), int(c)] = float(s)
    in_range = len(rows) == 1600 and grid.min() >= 0.0 and grid.max() <= 1.0
    moran = metrics.moran_i(grid)
    ok = in_range and moran > 0.0 and (out / "heatmap.png").exists()
    report(13, "latent heatmap autocorrelation", ok,
           f"1600-cell grid in [0,1], Moran's I {moran:.3f}")
