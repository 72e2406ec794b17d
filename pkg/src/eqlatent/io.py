"""On-disk formats: corpus files, delimited datasets, embedding caches.

Corpus file: one `#config <json>` header line, then one JSON record per
equation. Dataset file: `#` header lines, then tab-separated numeric rows
(x1..xd, y). Embedding cache: tab-separated `id<TAB>v1,v2,...` lines.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .dag import EquationDag, dag_from_row, dag_to_row
from .generator import Corpus, Dataset, GenConfig

__all__ = [
    "write_corpus",
    "read_corpus",
    "write_dataset",
    "read_dataset",
    "write_embedding_cache",
    "read_embedding_cache",
]


def _config_json(config: GenConfig) -> str:
    payload = dataclasses.asdict(config)
    payload["input_range"] = list(payload["input_range"])
    return json.dumps(payload, sort_keys=True)


def write_corpus(corpus: Corpus, train_path, test_path) -> dict[str, list[str]]:
    """Write train/test corpus files; returns the ids per split."""
    ids: dict[str, list[str]] = {}
    for split, dags, path in (("train", corpus.train, train_path),
                              ("test", corpus.test, test_path)):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        split_ids = []
        with path.open("w") as fh:
            if corpus.config is not None:
                fh.write(f"#config {_config_json(corpus.config)}\n")
            for i, dag in enumerate(dags):
                eq_id = f"{split}-{i:05d}"
                fh.write(dag_to_row(dag, eq_id) + "\n")
                split_ids.append(eq_id)
        ids[split] = split_ids
    return ids


def read_corpus_file(path) -> tuple[list[str], list[EquationDag], dict | None]:
    ids, dags, header = [], [], None
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#config "):
                header = json.loads(line[len("#config "):])
                continue
            if line.startswith("#"):
                continue
            eq_id, dag = dag_from_row(line)
            ids.append(eq_id)
            dags.append(dag)
    return ids, dags, header


def read_corpus(train_path, test_path) -> tuple[Corpus, dict[str, list[str]]]:
    train_ids, train, header = read_corpus_file(train_path)
    test_ids, test, _ = read_corpus_file(test_path)
    config = None
    if header is not None:
        header["input_range"] = tuple(header["input_range"])
        config = GenConfig(**header)
    from .dag import canonical_string

    corpus = Corpus(
        train=train,
        test=test,
        canonical_index={canonical_string(g) for g in train},
        config=config,
    )
    return corpus, {"train": train_ids, "test": test_ids}


def write_dataset(ds: Dataset, path, source_id: str | None = None, seed: int | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        meta = {"d": ds.d, "n": len(ds.y)}
        if source_id is not None:
            meta["source"] = source_id
        if seed is not None:
            meta["seed"] = seed
        fh.write(f"#meta {json.dumps(meta, sort_keys=True)}\n")
        fh.write("#" + "\t".join([f"x{i+1}" for i in range(ds.d)] + ["y"]) + "\n")
        for x, y in zip(ds.X, ds.y):
            fh.write("\t".join(f"{v:.17g}" for v in x) + f"\t{y:.17g}\n")


class DatasetParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


def read_dataset(path) -> Dataset:
    rows = []
    meta = {}
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#meta "):
                meta = json.loads(line[len("#meta "):])
                continue
            if line.startswith("#"):
                continue
            parts = line.replace(",", "\t").split()
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DatasetParseError(line_no, f"non-numeric value in {parts!r}") from None
    if not rows:
        raise DatasetParseError(0, "no data rows found")
    width = len(rows[0])
    if width < 2:
        raise DatasetParseError(1, "need at least one input column and a y column")
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DatasetParseError(i + 1, f"expected {width} columns, found {len(r)}")
    arr = np.array(rows, dtype=float)
    ds = Dataset(arr[:, :-1], arr[:, -1])
    ds.source_id = meta.get("source")
    return ds


def write_embedding_cache(path, ids: list[str], vectors: np.ndarray, provider: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = np.asarray(vectors, dtype=float)
    with path.open("w") as fh:
        fh.write(f"#provider {provider}\n")
        for eq_id, vec in zip(ids, vectors):
            fh.write(eq_id + "\t" + ",".join(f"{v:.17g}" for v in vec) + "\n")


def read_embedding_cache(path) -> tuple[list[str], np.ndarray, str | None]:
    ids, vecs, provider = [], [], None
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#provider "):
                provider = line.split(" ", 1)[1]
                continue
            if line.startswith("#"):
                continue
            eq_id, payload = line.split("\t", 1)
            ids.append(eq_id)
            vecs.append([float(v) for v in payload.split(",")])
    return ids, np.array(vecs), provider
