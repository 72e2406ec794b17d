"""Command-line pipeline: corpus generation through discovery and plots.

Exit codes: 0 success, 1 user error (bad input, missing files), 2 internal
error. Every report embeds the seed, a config hash, and the code version.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, embeddings, expr, io, latent, metrics, model as model_mod, plots, search
from .dag import canonical_string, evaluate, validate
from .generator import (
    Corpus,
    GenConfig,
    GenerationExhausted,
    UndefinedAlmostEverywhere,
    synthesize_dataset,
)

USER_ERRORS = (
    click.UsageError,
    FileNotFoundError,
    GenerationExhausted,
    UndefinedAlmostEverywhere,
    io.DatasetParseError,
    expr.MalformedTree,
    ValueError,
)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def _stamp(payload: dict, seed: int) -> dict:
    payload = dict(payload)
    payload["seed"] = seed
    payload["config_hash"] = _config_hash(payload)
    payload["code_version"] = __version__
    return payload


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except USER_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except Exception as exc:  # pragma: no cover - defensive
            click.echo(f"internal error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _load_config_file(path) -> dict:
    """Flat key=value config file; later CLI flags win."""
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise click.UsageError(f"{path}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def config_file_option(fn):
    @click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                  help="Flat key=value config file; explicit flags override it.")
    @click.pass_context
    @functools.wraps(fn)
    def wrapper(ctx, config_path, **kwargs):
        if config_path:
            overrides = _load_config_file(config_path)
            for key, raw in overrides.items():
                if key not in kwargs:
                    raise click.UsageError(f"unknown config key {key!r}")
                src = ctx.get_parameter_source(key)
                if src is not None and src.name != "DEFAULT":
                    continue  # flag given explicitly, flags win
                current = kwargs[key]
                if isinstance(current, bool):
                    kwargs[key] = raw.lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    kwargs[key] = int(raw)
                elif isinstance(current, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
        return fn(**kwargs)

    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Equation discovery over a learned latent space of equation DAGs."""


def _set_weights(path, d: int):
    if path:
        return embeddings.SetEncoderWeights.load(path)
    return embeddings.SetEncoderWeights.reference(d)


# -- gen-corpus ---------------------------------------------------------------


@main.command("gen-corpus")
@click.option("--n", type=int, required=True, help="Number of distinct equations.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--d", type=int, default=3, show_default=True)
@click.option("--max-internal-nodes", type=int, default=10, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--dataset-rows", type=int, default=500, show_default=True,
              help="Rows in each per-equation embedding dataset (0 disables).")
@handle_errors
@config_file_option
def cmd_gen_corpus(n, seed, d, max_internal_nodes, out_dir, dataset_rows):
    """Generate a train/test equation corpus plus per-equation datasets."""
    config = GenConfig(d=d, max_internal_nodes=max_internal_nodes, seed=seed)
    from .generator import generate_corpus

    corpus = generate_corpus(n, config)
    out = Path(out_dir)
    ids = io.write_corpus(corpus, out / "train.corpus", out / "test.corpus")
    if dataset_rows > 0:
        for split, dags in (("train", corpus.train), ("test", corpus.test)):
            for eq_id, dag in zip(ids[split], dags):
                rng = np.random.default_rng(seed * 1_000_003 + _id_index(eq_id))
                ds = synthesize_dataset(dag, dataset_rows, config.input_range, rng)
                io.write_dataset(ds, out / "datasets" / f"{eq_id}.tsv",
                                 source_id=eq_id, seed=seed)
    manifest = _stamp({"command": "gen-corpus", "n": n, "d": d,
                       "max_internal_nodes": max_internal_nodes,
                       "dataset_rows": dataset_rows}, seed)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    click.echo(f"wrote {len(corpus.train)} train / {len(corpus.test)} test equations to {out}")


def _id_index(eq_id: str) -> int:
    base = int(eq_id.rsplit("-", 1)[1])
    return base + (500_000 if eq_id.startswith("test") else 0)


# -- embed --------------------------------------------------------------------


@main.command("embed")
@click.option("--corpus-dir", type=click.Path(exists=True), required=True)
@click.option("--provider", type=click.Choice(embeddings.PROVIDERS), default="poly",
              show_default=True)
@click.option("--degree", type=int, default=2, show_default=True)
@click.option("--set-weights", "set_weights_path", type=click.Path(exists=True), default=None,
              help="Set-encoder weight file; defaults to the bundled reference init.")
@handle_errors
@config_file_option
def cmd_embed(corpus_dir, provider, degree, set_weights_path):
    """Compute the embedding cache for every corpus equation."""
    out = Path(corpus_dir)
    corpus, ids = io.read_corpus(out / "train.corpus", out / "test.corpus")
    weights = None
    if provider.startswith("set_"):
        weights = _set_weights(set_weights_path, corpus.train[0].num_inputs)
    for split, dags in (("train", corpus.train), ("test", corpus.test)):
        vecs = []
        for eq_id, dag in zip(ids[split], dags):
            ds_path = out / "datasets" / f"{eq_id}.tsv"
            if ds_path.exists():
                ds = io.read_dataset(ds_path)
            else:
                seed = corpus.config.seed if corpus.config else 0
                rng = np.random.default_rng(seed * 1_000_003 + _id_index(eq_id))
                ds = synthesize_dataset(dag, 500, rng=rng)
            vecs.append(embeddings.raw_embedding(ds, provider, degree=degree, weights=weights))
        io.write_embedding_cache(out / f"{split}.{provider}.emb.tsv", ids[split],
                                 np.array(vecs), provider)
    click.echo(f"wrote embedding caches for provider {provider} in {out}")


# -- train --------------------------------------------------------------------


@main.command("train")
@click.option("--corpus-dir", type=click.Path(exists=True), required=True)
@click.option("--condition", type=click.Choice(("none",) + embeddings.PROVIDERS),
              default="none", show_default=True)
@click.option("--epochs", type=int, default=100, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--learning-rate", type=float, default=1e-4, show_default=True)
@click.option("--latent-dim", type=int, default=56, show_default=True)
@click.option("--hidden-dim", type=int, default=256, show_default=True)
@click.option("--alpha", type=float, default=0.005, show_default=True)
@click.option("--max-nodes", type=int, default=25, show_default=True)
@click.option("--degree", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None,
              help="Checkpoint file or directory to continue from.")
@handle_errors
@config_file_option
def cmd_train(corpus_dir, condition, epochs, batch_size, learning_rate, latent_dim,
              hidden_dim, alpha, max_nodes, degree, seed, out_dir, resume_path):
    """Train the conditional graph VAE on a corpus."""
    out = Path(out_dir)
    corpus_dir = Path(corpus_dir)
    corpus, ids = io.read_corpus(corpus_dir / "train.corpus", corpus_dir / "test.corpus")
    d = corpus.train[0].num_inputs

    cond_raw = None
    raw_dim, cond_dim = 0, 0
    if condition != "none":
        cache_path = corpus_dir / f"train.{condition}.emb.tsv"
        if not cache_path.exists():
            raise click.UsageError(f"missing embedding cache {cache_path}; run `embed` first")
        cache_ids, vectors, _ = io.read_embedding_cache(cache_path)
        by_id = dict(zip(cache_ids, vectors))
        cond_raw = np.array([by_id[eq_id] for eq_id in ids["train"]])
        raw_dim, cond_dim = embeddings.embedding_dim(condition, d, degree)

    config = model_mod.ModelConfig(
        d=d, latent_dim=latent_dim, hidden_dim=hidden_dim, max_nodes=max_nodes,
        alpha=alpha, epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
        conditioning=condition, cond_dim=cond_dim, raw_cond_dim=raw_dim,
        embed_degree=degree,
    )
    kwargs = {}
    if resume_path:
        net, history, opt_state = model_mod.load_checkpoint(resume_path)
        kwargs = {"model": net, "history": history, "opt_state": opt_state,
                  "start_epoch": len(history)}
    net, history = model_mod.train(
        corpus.train, cond_raw, config, seed=seed, checkpoint_dir=out,
        log=lambda rec: click.echo(
            f"epoch {rec['epoch']:4d}  loss {rec['loss']:.4f}  "
            f"recon {rec['recon']:.4f}  kl {rec['kl']:.4f}"),
        **kwargs,
    )
    (out / "history.json").write_text(json.dumps(
        _stamp({"command": "train", "config": dataclasses.asdict(config),
                "history": history}, seed), indent=2) + "\n")
    plots.plot_loss_history(history, out / "loss.png")
    click.echo(f"checkpoints and history written to {out}")


def _load_model(checkpoint):
    path = Path(checkpoint)
    if not path.exists():
        raise click.UsageError(f"checkpoint {checkpoint} not found")
    net, history, _ = model_mod.load_checkpoint(path)
    return net, history


def _cond_cache_for(net, corpus_dir, split="train"):
    if not net.config.conditional:
        return None, None
    path = Path(corpus_dir) / f"{split}.{net.config.conditioning}.emb.tsv"
    if not path.exists():
        raise click.UsageError(f"missing embedding cache {path}")
    ids, vectors, _ = io.read_embedding_cache(path)
    return ids, vectors


# -- eval ---------------------------------------------------------------------


@main.command("eval")
@click.option("--corpus-dir", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--n-prior", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--report", "report_path", type=click.Path(), required=True)
@handle_errors
@config_file_option
def cmd_eval(corpus_dir, checkpoint, n_prior, seed, report_path):
    """Reconstruction accuracy on the test split + prior-sample report."""
    net, _ = _load_model(checkpoint)
    corpus_dir = Path(corpus_dir)
    corpus, ids = io.read_corpus(corpus_dir / "train.corpus", corpus_dir / "test.corpus")

    test_cond = None
    train_cache = None
    if net.config.conditional:
        _, train_cache = _cond_cache_for(net, corpus_dir, "train")
        cache_ids, vectors, _ = io.read_embedding_cache(
            corpus_dir / f"test.{net.config.conditioning}.emb.tsv")
        by_id = dict(zip(cache_ids, vectors))
        test_cond = np.array([by_id[eq_id] for eq_id in ids["test"]])

    accuracy = metrics.reconstruction_accuracy(net, corpus.test, test_cond)
    samples = model_mod.sample_prior(n_prior, net, train_cache, seed=seed)
    report = metrics.prior_sample_report(samples, corpus.canonical_index)

    payload = _stamp({
        "command": "eval",
        "conditioning": net.config.conditioning,
        "reconstruction_accuracy_pct": accuracy,
        "prior_samples": report.as_dict(),
    }, seed)
    Path(report_path).parent.mkdir(parents=True, exist_ok=True)
    Path(report_path).write_text(json.dumps(payload, indent=2) + "\n")
    click.echo(json.dumps(payload, indent=2))


# -- discover -----------------------------------------------------------------


@main.command("discover")
@click.argument("dataset_file", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--iterations", type=int, default=10, show_default=True)
@click.option("--trials", type=int, default=10, show_default=True)
@click.option("--init-points", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--gt", "groundtruth", default=None,
              help="Ground-truth equation (infix or prefix) for a verdict.")
@click.option("--set-weights", "set_weights_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@handle_errors
@config_file_option
def cmd_discover(dataset_file, checkpoint, iterations, trials, init_points, seed,
                 groundtruth, set_weights_path, out_dir):
    """Discover the best-fitting equation for a dataset file."""
    net, _ = _load_model(checkpoint)
    ds = io.read_dataset(dataset_file)
    if ds.d != net.config.d:
        raise click.UsageError(f"dataset has d={ds.d}, model expects d={net.config.d}")

    cond_raw = None
    if net.config.conditional:
        provider = net.config.conditioning
        weights = _set_weights(set_weights_path, ds.d) if provider.startswith("set_") else None
        cond_raw = embeddings.raw_embedding(ds, provider, degree=net.config.embed_degree,
                                            weights=weights)

    bo = search.BoConfig(iterations=iterations, trials=trials,
                         init_points=init_points, seed=seed)
    result = search.discover(ds, net, cond_raw, bo)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    winner_tree = None
    if result.best_dag is not None and validate(result.best_dag).valid:
        winner_tree = expr.to_expression(result.best_dag)
    payload = _stamp({
        "command": "discover",
        "dataset": str(dataset_file),
        "dataset_id": ds.source_id,
        "bo": dataclasses.asdict(bo),
        "winner": {
            "infix": expr.to_infix(winner_tree) if winner_tree else None,
            "canonical": canonical_string(result.best_dag) if winner_tree else None,
            "score": result.best_score,
            "trial_index": result.trial_index,
        },
    }, seed)
    if groundtruth is not None:
        gt_tree = expr.parse_equation(groundtruth)
        if winner_tree is None:
            payload["verdict"] = {"equivalent": False, "method": "invalid-winner"}
        else:
            verdict = metrics.equivalent(winner_tree, gt_tree, ds.d,
                                         np.random.default_rng(seed))
            payload["verdict"] = dataclasses.asdict(verdict)
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    with (out / "trace.tsv").open("w") as fh:
        fh.write("#eval\tscore\tcanonical\tz\n")
        for i, (z, s, canon) in enumerate(result.trace):
            fh.write(f"{i}\t{s:.10g}\t{canon}\t" + ",".join(f"{v:.6g}" for v in z) + "\n")
    plots.plot_score_trajectory([s for _, s, _ in result.trace], out / "trajectory.png",
                                trial_size=init_points + iterations)
    click.echo(json.dumps(payload["winner"], indent=2))
    if "verdict" in payload:
        click.echo(json.dumps(payload["verdict"], indent=2))


# -- plot-latent ----------------------------------------------------------------


@main.command("plot-latent")
@click.argument("dataset_file", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--corpus-dir", type=click.Path(exists=True), required=True)
@click.option("--resolution", type=int, default=40, show_default=True)
@click.option("--margin", type=float, default=0.1, show_default=True)
@click.option("--set-weights", "set_weights_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@handle_errors
@config_file_option
def cmd_plot_latent(dataset_file, checkpoint, corpus_dir, resolution, margin,
                    set_weights_path, seed, out_dir):
    """Score heatmap of the decoded latent plane around the training corpus."""
    net, _ = _load_model(checkpoint)
    ds = io.read_dataset(dataset_file)
    corpus_dir = Path(corpus_dir)
    corpus, ids = io.read_corpus(corpus_dir / "train.corpus", corpus_dir / "test.corpus")

    cond_train = None
    cond_ds = None
    if net.config.conditional:
        cache_ids, vectors = _cond_cache_for(net, corpus_dir, "train")
        by_id = dict(zip(cache_ids, vectors))
        cond_train = np.array([by_id[eq_id] for eq_id in ids["train"]])
        provider = net.config.conditioning
        weights = _set_weights(set_weights_path, ds.d) if provider.startswith("set_") else None
        cond_ds = embeddings.raw_embedding(ds, provider, degree=net.config.embed_degree,
                                           weights=weights)

    records, grid, extent = latent.latent_grid(
        net, corpus.train, ds, cond_train, cond_ds,
        resolution=resolution, margin=margin)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "grid.tsv").open("w") as fh:
        meta = _stamp({"command": "plot-latent", "resolution": resolution,
                       "margin": margin, "dataset": str(dataset_file)}, seed)
        fh.write(f"#meta {json.dumps(meta, sort_keys=True)}\n")
        fh.write("#row\tcol\tu\tv\tscore\tcanonical\n")
        for row, col, u, v, s, canon in records:
            fh.write(f"{row}\t{col}\t{u:.8g}\t{v:.8g}\t{s:.10g}\t{canon}\n")
    plots.plot_latent_heatmap(grid, extent, out / "heatmap.png")
    click.echo(f"grid written to {out / 'grid.tsv'}; Moran's I = "
               f"{metrics.moran_i(grid):.4f}")


# -- verify-corpus --------------------------------------------------------------


@main.command("verify-corpus")
@click.option("--corpus-dir", type=click.Path(exists=True), required=True)
@handle_errors
@config_file_option
def cmd_verify_corpus(corpus_dir):
    """Re-check corpus validity, round-trips, and dataset consistency."""
    corpus_dir = Path(corpus_dir)
    corpus, ids = io.read_corpus(corpus_dir / "train.corpus", corpus_dir / "test.corpus")
    problems = 0
    for split, dags in (("train", corpus.train), ("test", corpus.test)):
        for eq_id, dag in zip(ids[split], dags):
            if not validate(dag).valid:
                click.echo(f"{eq_id}: invalid DAG", err=True)
                problems += 1
                continue
            tree = expr.to_expression(dag)
            back = expr.from_expression(tree, dag.num_inputs)
            if canonical_string(back) != canonical_string(dag):
                click.echo(f"{eq_id}: canonical round-trip mismatch", err=True)
                problems += 1
            ds_path = corpus_dir / "datasets" / f"{eq_id}.tsv"
            if ds_path.exists():
                ds = io.read_dataset(ds_path)
                for x, y in zip(ds.X, ds.y):
                    if abs(evaluate(dag, x) - y) > 1e-9 * max(1.0, abs(y)):
                        click.echo(f"{eq_id}: dataset row mismatch", err=True)
                        problems += 1
                        break
    if problems:
        raise click.UsageError(f"{problems} corpus problems found")
    click.echo("corpus verified: all equations valid, round-trips and datasets consistent")


if __name__ == "__main__":
    main()
