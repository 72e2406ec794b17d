"""Dataset embeddings: the condition vector fed to the conditional VAE.

Providers:
  poly      least-squares coefficients of a fixed-degree polynomial fit
  set_mean  permutation-invariant set encoder, mean over the 512 rows
  set_mlp5  set encoder, flattened to 5120 dims, MLP-reduced to 5
  set_mlp10 set encoder, flattened to 5120 dims, MLP-reduced to 10

For the MLP providers the cached embedding is the raw 5120-dim flattening;
the reducing MLP lives in the model and trains jointly with the VAE.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .generator import Dataset

__all__ = [
    "PROVIDERS",
    "DatasetEmbedding",
    "SetEncoderWeights",
    "WeightsUnavailable",
    "monomial_exponents",
    "poly_embedding",
    "set_encode",
    "reduce_embedding",
    "raw_embedding",
    "embedding_dim",
]

PROVIDERS = ("poly", "set_mean", "set_mlp5", "set_mlp10")

SET_ROWS = 512
SET_COLS = 10


class WeightsUnavailable(RuntimeError):
    pass


@dataclass
class DatasetEmbedding:
    c: np.ndarray
    provider: str
    ill_conditioned: bool = False

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        if not np.isfinite(self.c).all():
            raise ValueError("embedding contains NaN/inf")


def monomial_exponents(d: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples of total degree <= degree, in graded-lex order."""
    out = []
    for total in range(degree + 1):
        grade = [e for e in itertools.product(range(total + 1), repeat=d) if sum(e) == total]
        out.extend(sorted(grade, reverse=True))
    return out


def poly_embedding(ds: Dataset, degree: int = 2, ridge: float = 1e-8) -> DatasetEmbedding:
    """Least-squares polynomial fit; coefficient vector is the embedding.

    Falls back to a ridge-regularized solve (flagged) when the design is
    numerically singular.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    exps = monomial_exponents(ds.d, degree)
    if len(ds.y) <= len(exps):
        raise ValueError(f"need more than {len(exps)} rows for degree {degree}, d={ds.d}")
    A = np.column_stack([np.prod(ds.X ** np.array(e), axis=1) for e in exps])
    coef, _, rank, _ = np.linalg.lstsq(A, ds.y, rcond=None)
    ill = rank < len(exps) or not np.isfinite(coef).all()
    if ill:
        ata = A.T @ A + ridge * np.eye(len(exps))
        coef = np.linalg.solve(ata, A.T @ ds.y)
    return DatasetEmbedding(coef, "poly", ill_conditioned=ill)


class _SetEncoder(nn.Module):
    """Attention pooling over an unordered point set onto 512 seed queries."""

    def __init__(self, d: int, hidden: int = 64):
        super().__init__()
        self.d = d
        self.point_net = nn.Sequential(
            nn.Linear(d + 1, hidden), nn.Tanh(), nn.Linear(hidden, hidden)
        )
        self.seeds = nn.Parameter(torch.empty(SET_ROWS, hidden))
        self.value = nn.Linear(hidden, SET_COLS)
        self.scale = hidden ** -0.5

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        h = self.point_net(points)                        # n x hidden
        attn = torch.softmax(self.seeds @ h.T * self.scale, dim=1)  # 512 x n
        return attn @ self.value(h)                       # 512 x 10


@dataclass
class SetEncoderWeights:
    d: int
    version: str
    state: dict

    @classmethod
    def reference(cls, d: int, seed: int = 0) -> "SetEncoderWeights":
        """Small deterministic randomly-initialized reference encoder."""
        gen = torch.Generator().manual_seed(seed)
        module = _SetEncoder(d)
        state = {}
        for name, p in module.state_dict().items():
            state[name] = torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.2
        return cls(d=d, version=f"reference-{seed}", state=state)

    @classmethod
    def load(cls, path) -> "SetEncoderWeights":
        payload = torch.load(path, weights_only=True)
        return cls(d=int(payload["d"]), version=str(payload["version"]),
                   state=payload["state"])

    def save(self, path):
        torch.save({"d": self.d, "version": self.version, "state": self.state}, path)

    def module(self) -> _SetEncoder:
        m = _SetEncoder(self.d).double()
        m.load_state_dict(self.state)
        m.eval()
        return m


def set_encode(ds: Dataset, w: SetEncoderWeights | None) -> np.ndarray:
    """512 x 10 permutation-invariant encoding of the (x, y) point set."""
    if w is None:
        raise WeightsUnavailable("no set-encoder weights supplied")
    if w.d != ds.d:
        raise ValueError(f"encoder built for d={w.d}, dataset has d={ds.d}")
    pts = np.column_stack([ds.X, ds.y])
    # standardize per column so attention logits stay in range
    mu, sd = pts.mean(axis=0), pts.std(axis=0)
    pts = (pts - mu) / np.where(sd > 1e-12, sd, 1.0)
    with torch.no_grad():
        out = w.module()(torch.as_tensor(pts, dtype=torch.float64))
    return out.numpy()


def reduce_embedding(matrix: np.ndarray, mode: str, reducer=None) -> DatasetEmbedding:
    """Reduce a 512 x 10 encoding to the final condition vector.

    mean needs no parameters; mlp5/mlp10 apply the jointly-trained reducer
    module to the row-major flattening.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (SET_ROWS, SET_COLS):
        raise ValueError(f"expected {SET_ROWS} x {SET_COLS} matrix, got {matrix.shape}")
    if mode == "mean":
        return DatasetEmbedding(matrix.mean(axis=0), "set_mean")
    if mode in ("mlp5", "mlp10"):
        if reducer is None:
            raise ValueError(f"mode {mode} requires reducer parameters")
        flat = torch.as_tensor(matrix.reshape(-1), dtype=torch.float64)
        with torch.no_grad():
            c = reducer(flat).numpy()
        return DatasetEmbedding(c, f"set_{mode}")
    raise ValueError(f"unknown reduction mode {mode!r}")


def raw_embedding(ds: Dataset, provider: str, *, degree: int = 2,
                  weights: SetEncoderWeights | None = None) -> np.ndarray:
    """Cacheable embedding vector for a provider.

    poly and set_mean produce the final condition vector; the MLP providers
    produce the 5120-dim flattening consumed by the model's reducer.
    """
    if provider == "poly":
        return poly_embedding(ds, degree=degree).c
    if provider == "set_mean":
        return set_encode(ds, weights).mean(axis=0)
    if provider in ("set_mlp5", "set_mlp10"):
        return set_encode(ds, weights).reshape(-1)
    raise ValueError(f"unknown provider {provider!r}")


def embedding_dim(provider: str, d: int, degree: int = 2) -> tuple[int, int]:
    """(cached vector length, condition length seen by the VAE)."""
    if provider == "poly":
        k = len(monomial_exponents(d, degree))
        return k, k
    if provider == "set_mean":
        return SET_COLS, SET_COLS
    if provider == "set_mlp5":
        return SET_ROWS * SET_COLS, 5
    if provider == "set_mlp10":
        return SET_ROWS * SET_COLS, 10
    raise ValueError(f"unknown provider {provider!r}")


def corpus_embeddings(dags, provider: str, *, n_rows: int = 500, seed: int = 0,
                      degree: int = 2, weights: SetEncoderWeights | None = None,
                      input_range=(-2.0, 2.0)) -> np.ndarray:
    """Raw embedding vector for every equation, via a synthesized dataset."""
    from .generator import synthesize_dataset

    out = []
    for i, dag in enumerate(dags):
        rng = np.random.default_rng(seed * 1_000_003 + i)
        ds = synthesize_dataset(dag, n_rows, input_range=input_range, rng=rng)
        out.append(raw_embedding(ds, provider, degree=degree, weights=weights))
    return np.array(out)
