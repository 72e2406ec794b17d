"""Latent-space equation discovery: GP surrogate + expected improvement.

The objective is score = 1 / (1 + MSE) of the greedily decoded candidate
against the target dataset; trials are independent restarts and the best
evaluation across all trials wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import norm

from .dag import DomainError, EquationDag, canonical_string, evaluate, validate
from .generator import Dataset

__all__ = [
    "BoConfig",
    "DiscoveryResult",
    "SingularKernel",
    "score",
    "GaussianProcess",
    "expected_improvement",
    "maximize_objective",
    "discover",
]


class SingularKernel(RuntimeError):
    pass


@dataclass
class BoConfig:
    iterations: int = 10
    trials: int = 10
    init_points: int = 5
    box_half_width: float = 3.0
    length_scale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-6
    seed: int = 0
    candidates: int = 1024
    polish_sweeps: int = 2

    def __post_init__(self):
        if self.iterations < 0 or self.trials < 1 or self.init_points < 1:
            raise ValueError("iterations >= 0, trials >= 1, init_points >= 1 required")
        if not np.isfinite(self.box_half_width):
            raise ValueError("search box must be finite")


@dataclass
class DiscoveryResult:
    best_dag: EquationDag | None
    best_score: float
    best_z: np.ndarray
    trace: list[tuple[np.ndarray, float, str]] = field(default_factory=list)
    trial_index: int = 0


def score(dag: EquationDag | None, ds: Dataset, clean_fraction: float = 0.9) -> float:
    """1 / (1 + MSE); invalid DAGs and mostly-undefined equations score 0.

    Rows raising DomainError are dropped; if fewer than `clean_fraction`
    of rows survive the score is 0.
    """
    if dag is None or not validate(dag).valid:
        return 0.0
    preds, targets = [], []
    for x, y in zip(ds.X, ds.y):
        try:
            preds.append(evaluate(dag, x))
        except DomainError:
            continue
        targets.append(y)
    if len(targets) < clean_fraction * len(ds.y):
        return 0.0
    with np.errstate(over="ignore"):
        diff = np.asarray(preds) - np.asarray(targets)
        mse = float(np.mean(diff * diff))
    if not np.isfinite(mse):
        return 0.0
    return 1.0 / (1.0 + mse)


class GaussianProcess:
    """Exact GP regression with a squared-exponential kernel.

    The prior mean is zero; noise_variance is added to the diagonal, with
    jitter escalated tenfold up to 1e-2 if the Cholesky fails.
    """

    def __init__(self, length_scale: float = 1.0, signal_variance: float = 1.0,
                 noise_variance: float = 1e-6):
        self.length_scale = float(length_scale)
        self.signal_variance = float(signal_variance)
        self.noise_variance = float(noise_variance)
        self._Z = None
        self._alpha = None
        self._chol = None

    def _kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1)
        return self.signal_variance * np.exp(-0.5 * d2 / self.length_scale**2)

    def fit(self, Z: np.ndarray, s: np.ndarray) -> "GaussianProcess":
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        s = np.asarray(s, dtype=float).ravel()
        K = self._kernel(Z, Z)
        jitter = self.noise_variance
        while True:
            try:
                chol = np.linalg.cholesky(K + jitter * np.eye(len(Z)))
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
                if jitter > 1e-2:
                    raise SingularKernel(
                        f"kernel matrix singular even at jitter {jitter:.1e}"
                    ) from None
        self._Z = Z
        self._chol = chol
        self._alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, s))
        return self

    def posterior(self, z_query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at query points (n_query, k)."""
        if self._Z is None:
            raise RuntimeError("fit() must be called before posterior()")
        Q = np.atleast_2d(np.asarray(z_query, dtype=float))
        Ks = self._kernel(Q, self._Z)
        mean = Ks @ self._alpha
        v = np.linalg.solve(self._chol, Ks.T)
        var = self.signal_variance - (v**2).sum(axis=0)
        return mean, np.maximum(var, 0.0)


def expected_improvement(mean, variance, best_so_far: float) -> np.ndarray:
    """EI for maximization; reduces to max(mean - best, 0) at zero variance."""
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    improve = mean - best_so_far
    ei = np.maximum(improve, 0.0)
    pos = sigma > 0
    u = np.zeros_like(mean)
    np.divide(improve, sigma, out=u, where=pos)
    ei = np.where(pos, improve * norm.cdf(u) + sigma * norm.pdf(u), ei)
    return np.maximum(ei, 0.0)


def _argmax_ei(gp: GaussianProcess, best: float, box: tuple[float, float], dim: int,
               rng: np.random.Generator, config: BoConfig) -> np.ndarray:
    lo, hi = box
    cands = rng.uniform(lo, hi, size=(config.candidates, dim))
    mean, var = gp.posterior(cands)
    ei = expected_improvement(mean, var, best)
    z = cands[int(np.argmax(ei))].copy()
    # coordinate-wise polish with a shrinking step
    step = 0.25 * (hi - lo)
    for _ in range(config.polish_sweeps):
        for i in range(dim):
            probes = []
            for delta in (-step, 0.0, step):
                p = z.copy()
                p[i] = np.clip(p[i] + delta, lo, hi)
                probes.append(p)
            probes = np.array(probes)
            m, v = gp.posterior(probes)
            z = probes[int(np.argmax(expected_improvement(m, v, best)))]
        step *= 0.5
    return z


def maximize_objective(objective, dim: int, config: BoConfig, rng: np.random.Generator):
    """One BO trial over [-box, box]^dim; returns the evaluation trace.

    objective(z) -> (score, payload); the payload rides along in the trace.
    """
    lo, hi = -config.box_half_width, config.box_half_width
    Z, scores, payloads = [], [], []

    for _ in range(config.init_points):
        z = rng.uniform(lo, hi, size=dim)
        s, payload = objective(z)
        Z.append(z)
        scores.append(s)
        payloads.append(payload)

    for _ in range(config.iterations):
        gp = GaussianProcess(config.length_scale, config.signal_variance,
                             config.noise_variance)
        gp.fit(np.array(Z), np.array(scores))
        z = _argmax_ei(gp, max(scores), (lo, hi), dim, rng, config)
        s, payload = objective(z)
        Z.append(z)
        scores.append(s)
        payloads.append(payload)

    return Z, scores, payloads


def discover(ds: Dataset, model, cond_raw: np.ndarray | None, bo: BoConfig) -> DiscoveryResult:
    """Find the best-fitting equation for ds by BO over the latent space.

    Candidates are decoded greedily (deterministic) so GP observations are
    noise-free; the winner is the best evaluation over all trials.
    """
    dim = model.config.latent_dim
    dtype = model.fc_mu.weight.dtype
    cache: dict[bytes, tuple[float, EquationDag]] = {}

    def objective(z: np.ndarray):
        key = np.round(z, 10).tobytes()
        if key not in cache:
            zt = torch.as_tensor(z[None, :], dtype=dtype)
            with torch.no_grad():
                dag = model.free_decode(zt, cond_raw, stochastic=False)[0]
            cache[key] = (score(dag, ds), dag)
        return cache[key][0], cache[key][1]

    best = DiscoveryResult(None, -1.0, np.zeros(dim))
    trace: list[tuple[np.ndarray, float, str]] = []
    for trial in range(bo.trials):
        rng = np.random.default_rng(bo.seed * 1009 + trial)
        Z, scores, dags = maximize_objective(objective, dim, bo, rng)
        for z, s, dag in zip(Z, scores, dags):
            canon = canonical_string(dag) if validate(dag).valid else ""
            trace.append((z, s, canon))
            if s > best.best_score:
                best = DiscoveryResult(dag, s, z, trial_index=trial)
    best.trace = trace
    return best
