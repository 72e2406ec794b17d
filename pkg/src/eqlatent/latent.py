"""Latent-space inspection: PCA plane of encoder means, decoded score grid."""

from __future__ import annotations

import numpy as np
import torch

from .dag import EquationDag, canonical_string, validate
from .generator import Dataset
from .search import score

__all__ = ["encode_means", "latent_grid"]


def encode_means(model, dags: list[EquationDag], cond_raw: np.ndarray | None = None) -> np.ndarray:
    mus = []
    with torch.no_grad():
        for i, dag in enumerate(dags):
            cond = cond_raw[i] if cond_raw is not None else None
            mu, _ = model.encode(dag, cond)
            mus.append(mu.numpy().ravel())
    return np.array(mus)


def latent_grid(model, train_dags: list[EquationDag], ds: Dataset,
                cond_raw_train: np.ndarray | None = None,
                cond_raw_ds: np.ndarray | None = None,
                resolution: int = 40, margin: float = 0.1):
    """Decode and score a grid over the top-2 principal-component plane.

    Returns (records, score_grid, extent): one record per cell with
    (row, col, u, v, score, canonical).
    """
    if len(train_dags) < 3:
        raise ValueError("need at least 3 encodable equations to fit components")
    mus = encode_means(model, train_dags, cond_raw_train)
    center = mus.mean(axis=0)
    _, _, vt = np.linalg.svd(mus - center, full_matrices=False)
    basis = vt[:2]                       # 2 x k
    coords = (mus - center) @ basis.T    # N x 2

    extent = []
    axes = []
    for dim in range(2):
        lo, hi = coords[:, dim].min(), coords[:, dim].max()
        pad = margin * max(hi - lo, 1e-6)
        lo, hi = lo - pad, hi + pad
        extent.extend([lo, hi])
        axes.append(np.linspace(lo, hi, resolution))

    dtype = model.fc_mu.weight.dtype
    records = []
    grid = np.zeros((resolution, resolution))
    with torch.no_grad():
        for r, v in enumerate(axes[1]):
            zs = np.array([center + u * basis[0] + v * basis[1] for u in axes[0]])
            zt = torch.as_tensor(zs, dtype=dtype)
            cond = None
            if cond_raw_ds is not None:
                cond = np.tile(np.asarray(cond_raw_ds, dtype=float), (resolution, 1))
            dags = model.free_decode(zt, cond, stochastic=False)
            for c, dag in enumerate(dags):
                s = score(dag, ds)
                canon = canonical_string(dag) if validate(dag).valid else ""
                grid[r, c] = s
                records.append((r, c, float(axes[0][c]), float(v), s, canon))
    return records, grid, tuple(extent)
