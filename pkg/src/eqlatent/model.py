"""Conditional graph VAE over equation DAGs.

Encoder: GRU-cell message passing in topological order with a gated,
slot-aware sum over predecessor states; the sink node's state feeds the
latent heads. Decoder: sequential node-by-node emission with a per-pair
edge scorer, trained with teacher forcing.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dag import OPS, OUTPUT_TOKEN, EquationDag, input_index

__all__ = [
    "ModelConfig",
    "GraphCVAE",
    "NonFiniteLoss",
    "ShapeMismatch",
    "train",
    "sample_prior",
    "save_checkpoint",
    "load_checkpoint",
]

OP_ORDER = list(OPS)  # fixed operator vocabulary order


class NonFiniteLoss(RuntimeError):
    def __init__(self, batch_ids):
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss on batch items {self.batch_ids}")


class ShapeMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 3
    latent_dim: int = 56
    hidden_dim: int = 256
    max_nodes: int = 25
    alpha: float = 0.005
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    grad_clip: float = 5.0
    conditioning: str = "none"  # none | poly | set_mean | set_mlp5 | set_mlp10
    cond_dim: int = 0           # condition length seen by the nets
    raw_cond_dim: int = 0       # cached embedding length (5120 for MLP providers)
    reducer_hidden: int = 64
    logvar_clamp: float = 10.0
    embed_degree: int = 2  # polynomial degree used when conditioning on poly

    @property
    def vocab_size(self) -> int:
        return self.d + len(OPS) + 1

    @property
    def conditional(self) -> bool:
        return self.conditioning != "none"


def node_type_id(token: str, d: int) -> int:
    idx = input_index(token)
    if idx is not None:
        return idx - 1
    if token in OPS:
        return d + OP_ORDER.index(token)
    if token == OUTPUT_TOKEN:
        return d + len(OPS)
    raise ValueError(f"unknown node token {token!r}")


def node_token(type_id: int, d: int) -> str:
    if type_id < d:
        return f"x{type_id + 1}"
    if type_id < d + len(OPS):
        return OP_ORDER[type_id - d]
    return OUTPUT_TOKEN


def _gated_sum(gate: nn.Linear, mapper: nn.Linear, states: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(gate(states)) * torch.tanh(mapper(states))


class GraphCVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        v, h, k, c = config.vocab_size, config.hidden_dim, config.latent_dim, config.cond_dim

        self.enc_cell = nn.GRUCell(v + c, h)
        self.enc_gate = nn.Linear(h + 2, h)   # +2: operand-slot one-hot
        self.enc_map = nn.Linear(h + 2, h)
        self.fc_mu = nn.Linear(h, k)
        self.fc_logvar = nn.Linear(h, k)

        self.dec_init = nn.Linear(k + c, h)
        self.dec_cell = nn.GRUCell(v + c, h)
        self.dec_gate = nn.Linear(h + 2, h)
        self.dec_map = nn.Linear(h + 2, h)
        self.graph_gate = nn.Linear(h, h)
        self.graph_map = nn.Linear(h, h)
        self.f_type = nn.Sequential(nn.Linear(h, h), nn.ReLU(), nn.Linear(h, v))
        self.f_edge = nn.Sequential(nn.Linear(2 * h, h), nn.ReLU(), nn.Linear(h, 1))

        if config.conditioning in ("set_mlp5", "set_mlp10"):
            self.reducer = nn.Sequential(
                nn.Linear(config.raw_cond_dim, config.reducer_hidden),
                nn.Tanh(),
                nn.Linear(config.reducer_hidden, c),
            )
        else:
            self.reducer = None

        self.register_buffer("cond_mean", torch.zeros(max(config.raw_cond_dim, 1)))
        self.register_buffer("cond_std", torch.ones(max(config.raw_cond_dim, 1)))

    # -- conditioning ------------------------------------------------------

    def set_condition_stats(self, mean, std):
        mean = torch.as_tensor(mean, dtype=self.cond_mean.dtype)
        std = torch.as_tensor(std, dtype=self.cond_std.dtype)
        self.cond_mean.copy_(mean)
        self.cond_std.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))

    def condition(self, raw: torch.Tensor | None, batch: int) -> torch.Tensor | None:
        """Standardized (and, for MLP providers, reduced) condition vectors."""
        if not self.config.conditional:
            return None
        if raw is None:
            raise ShapeMismatch("conditional model requires condition vectors")
        raw = torch.as_tensor(raw, dtype=self.cond_mean.dtype)
        if raw.ndim == 1:
            raw = raw.unsqueeze(0).expand(batch, -1)
        if raw.shape != (batch, self.config.raw_cond_dim):
            raise ShapeMismatch(
                f"expected condition shape {(batch, self.config.raw_cond_dim)}, got {tuple(raw.shape)}"
            )
        x = (raw - self.cond_mean) / self.cond_std
        return self.reducer(x) if self.reducer is not None else x

    # -- tensorization -----------------------------------------------------

    def _batch_tensors(self, dags: list[EquationDag]):
        d = self.config.d
        lengths = [len(g.nodes) for g in dags]
        T = max(lengths)
        B = len(dags)
        dtype = self.fc_mu.weight.dtype
        types = torch.zeros(B, T, dtype=torch.long)
        adj = torch.zeros(B, 2, T, T, dtype=dtype)  # adj[b, slot, dst, src]
        for b, g in enumerate(dags):
            for i, tok in enumerate(g.nodes):
                types[b, i] = node_type_id(tok, d)
            for s, t, slot in g.edges:
                adj[b, slot, t, s] = 1.0
        mask = torch.zeros(B, T, dtype=dtype)
        for b, n in enumerate(lengths):
            mask[b, :n] = 1.0
        return types, adj, mask, lengths

    def _node_input(self, type_ids: torch.Tensor, c: torch.Tensor | None) -> torch.Tensor:
        x = F.one_hot(type_ids, self.config.vocab_size).to(self.fc_mu.weight.dtype)
        if c is not None:
            x = torch.cat([x, c], dim=-1)
        return x

    def _messages(self, H: torch.Tensor, adj_t: torch.Tensor, gate: nn.Linear,
                  mapper: nn.Linear) -> torch.Tensor:
        """Slot-aware gated sum of predecessor states.

        H: (B, t, h) finalized states; adj_t: (B, 2, t) in-edge indicators of
        the node being processed.
        """
        B, t, h = H.shape
        if t == 0:
            return H.new_zeros(B, h)
        msg = H.new_zeros(B, h)
        for slot in range(2):
            onehot = H.new_zeros(B, t, 2)
            onehot[:, :, slot] = 1.0
            feats = _gated_sum(gate, mapper, torch.cat([H, onehot], dim=-1))
            msg = msg + (adj_t[:, slot, :].unsqueeze(-1) * feats).sum(dim=1)
        return msg

    # -- encoder -----------------------------------------------------------

    def encode_batch(self, dags: list[EquationDag], cond_raw=None):
        types, adj, mask, lengths = self._batch_tensors(dags)
        B, T = types.shape
        c = self.condition(cond_raw, B)
        H = self.fc_mu.weight.new_zeros(B, T, self.config.hidden_dim)
        for t in range(T):
            x_t = self._node_input(types[:, t], c)
            msg = self._messages(H[:, :t], adj[:, :, t, :t], self.enc_gate, self.enc_map)
            h_t = self.enc_cell(x_t, msg) * mask[:, t].unsqueeze(-1)
            H = torch.cat([H[:, :t], h_t.unsqueeze(1), H[:, t + 1:]], dim=1)
        sinks = [g.output_index if g.output_index is not None else lengths[b] - 1
                 for b, g in enumerate(dags)]
        sink = torch.stack([H[b, i] for b, i in enumerate(sinks)])
        return self.fc_mu(sink), self.fc_logvar(sink)

    def encode(self, dag: EquationDag, cond_raw=None):
        return self.encode_batch([dag], cond_raw)

    def reparameterize(self, mu: torch.Tensor, logvar: torch.Tensor,
                       eps: torch.Tensor | None = None,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        lv = torch.clamp(logvar, -self.config.logvar_clamp, self.config.logvar_clamp)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * lv) * eps

    # -- decoder -----------------------------------------------------------

    def _graph_state(self, h0: torch.Tensor, H: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """h0 plus a gated sum over the states emitted so far."""
        if H.shape[1] == 0:
            return h0
        feats = _gated_sum(self.graph_gate, self.graph_map, H)
        return h0 + (mask.unsqueeze(-1) * feats).sum(dim=1)

    def _init_state(self, z: torch.Tensor, c: torch.Tensor | None) -> torch.Tensor:
        zc = z if c is None else torch.cat([z, c], dim=-1)
        return torch.tanh(self.dec_init(zc))

    def teacher_forced_nll(self, z: torch.Tensor, dags: list[EquationDag], cond_raw=None):
        """Per-graph negative log-likelihood plus term counts.

        Returns (nll: (B,), type_terms: list[int], edge_terms: list[int]).
        """
        types, adj, mask, lengths = self._batch_tensors(dags)
        B, T = types.shape
        c = self.condition(cond_raw, B)
        h0 = self._init_state(z, c)
        H = z.new_zeros(B, T, self.config.hidden_dim)
        nll = z.new_zeros(B)
        for t in range(T):
            active = mask[:, t]
            hg = self._graph_state(h0, H[:, :t], mask[:, :t])
            logits = self.f_type(hg)
            nll = nll + active * F.cross_entropy(logits, types[:, t], reduction="none")

            x_t = self._node_input(types[:, t], c)
            if t > 0:
                h_pre = self.dec_cell(x_t, hg)
                pair = torch.cat([H[:, :t], h_pre.unsqueeze(1).expand(-1, t, -1)], dim=-1)
                edge_logits = self.f_edge(pair).squeeze(-1)          # (B, t)
                targets = adj[:, :, t, :t].sum(dim=1).clamp(max=1.0)  # (B, t)
                bce = F.binary_cross_entropy_with_logits(edge_logits, targets, reduction="none")
                nll = nll + active * bce.sum(dim=1)
            msg = self._messages(H[:, :t], adj[:, :, t, :t], self.dec_gate, self.dec_map)
            # source nodes have no predecessors: seed them with the graph state
            # so the latent code reaches every emitted node
            has_pred = (adj[:, :, t, :t].sum(dim=(1, 2)) > 0).unsqueeze(-1).to(msg.dtype)
            msg = has_pred * msg + (1.0 - has_pred) * hg
            h_t = self.dec_cell(x_t, msg) * active.unsqueeze(-1)
            H = torch.cat([H[:, :t], h_t.unsqueeze(1), H[:, t + 1:]], dim=1)
        type_terms = lengths
        edge_terms = [n * (n - 1) // 2 for n in lengths]
        return nll, type_terms, edge_terms

    def free_decode(self, z: torch.Tensor, cond_raw=None, stochastic: bool = False,
                    generator: torch.Generator | None = None) -> list[EquationDag]:
        """Greedy (deterministic) or stochastic decode; output may be invalid."""
        B = z.shape[0]
        T = self.config.max_nodes
        c = self.condition(cond_raw, B)
        h0 = self._init_state(z, c)
        H = z.new_zeros(B, 0, self.config.hidden_dim)
        done = torch.zeros(B, dtype=torch.bool)
        out_type = self.config.vocab_size - 1
        emitted_types: list[list[int]] = [[] for _ in range(B)]
        emitted_edges: list[list[tuple[int, int, int]]] = [[] for _ in range(B)]

        for t in range(T):
            mask_prev = z.new_ones(B, t)
            for b in range(B):
                mask_prev[b, len(emitted_types[b]):] = 0.0
            hg = self._graph_state(h0, H, mask_prev)
            logits = self.f_type(hg)
            if stochastic:
                probs = torch.softmax(logits, dim=-1)
                choice = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            else:
                choice = logits.argmax(dim=-1)
            if t == T - 1:
                # hitting the node budget: close the graph with the sink type
                choice = torch.where(done, choice, torch.full_like(choice, out_type))

            x_t = self._node_input(choice, c)
            adj_t = z.new_zeros(B, 2, t)
            if t > 0:
                h_pre = self.dec_cell(x_t, hg)
                pair = torch.cat([H, h_pre.unsqueeze(1).expand(-1, t, -1)], dim=-1)
                probs = torch.sigmoid(self.f_edge(pair).squeeze(-1)) * mask_prev
                if stochastic:
                    picked = torch.rand(probs.shape, generator=generator, dtype=probs.dtype) < probs
                else:
                    picked = probs > 0.5
                for b in range(B):
                    if done[b]:
                        continue
                    srcs = [j for j in range(len(emitted_types[b])) if picked[b, j]]
                    for rank, j in enumerate(srcs):
                        slot = min(rank, 1)
                        emitted_edges[b].append((j, t, slot))
                        adj_t[b, slot, j] = 1.0
            msg = self._messages(H, adj_t, self.dec_gate, self.dec_map)
            has_pred = (adj_t.sum(dim=(1, 2)) > 0).unsqueeze(-1).to(msg.dtype)
            msg = has_pred * msg + (1.0 - has_pred) * hg
            h_t = self.dec_cell(x_t, msg)

            newly_done = torch.zeros(B, dtype=torch.bool)
            for b in range(B):
                if done[b]:
                    continue
                emitted_types[b].append(int(choice[b]))
                if int(choice[b]) == out_type:
                    newly_done[b] = True
            h_t = torch.where(done.unsqueeze(-1), torch.zeros_like(h_t), h_t)
            H = torch.cat([H, h_t.unsqueeze(1)], dim=1)
            done = done | newly_done
            if bool(done.all()):
                break

        d = self.config.d
        return [
            EquationDag(
                nodes=tuple(node_token(tid, d) for tid in emitted_types[b]),
                edges=tuple(emitted_edges[b]),
                num_inputs=d,
            )
            for b in range(B)
        ]

    # -- loss ---------------------------------------------------------------

    @staticmethod
    def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
        """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)) per sample."""
        return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)

    def loss(self, dags: list[EquationDag], cond_raw=None,
             eps: torch.Tensor | None = None,
             generator: torch.Generator | None = None):
        """Batch-mean teacher-forced loss: recon + alpha * KL."""
        mu, logvar = self.encode_batch(dags, cond_raw)
        z = self.reparameterize(mu, logvar, eps=eps, generator=generator)
        nll, _, _ = self.teacher_forced_nll(z, dags, cond_raw)
        recon = nll.mean()
        kl = self.kl_divergence(mu, logvar).mean()
        return recon + self.config.alpha * kl, recon, kl


# -- training ----------------------------------------------------------------


def train(train_dags: list[EquationDag], cond_raw: np.ndarray | None,
          config: ModelConfig, *, seed: int = 0, checkpoint_dir=None,
          model: GraphCVAE | None = None, start_epoch: int = 0,
          history: list[dict] | None = None, opt_state: dict | None = None,
          log=None):
    """Run config.epochs of shuffled mini-batch Adam; returns (model, history).

    When `model`/`start_epoch`/`history` are supplied the run resumes from a
    checkpoint and continues the same seeded shuffle/noise streams.
    """
    torch.manual_seed(seed)
    if model is None:
        model = GraphCVAE(config)
    if config.conditional:
        cond_raw = np.asarray(cond_raw, dtype=float)
        if len(cond_raw) != len(train_dags):
            raise ShapeMismatch("one condition vector per training equation required")
        model.set_condition_stats(cond_raw.mean(axis=0), cond_raw.std(axis=0))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    history = list(history) if history else []

    n = len(train_dags)
    for epoch in range(config.epochs):
        rng = np.random.default_rng(seed * 100003 + epoch)
        noise = torch.Generator().manual_seed(seed * 911 + epoch)
        order = rng.permutation(n)
        if epoch < start_epoch:
            continue  # replay the per-epoch seeds so resumed runs match
        sums = {"loss": 0.0, "recon": 0.0, "kl": 0.0}
        batches = 0
        for lo in range(0, n, config.batch_size):
            ids = order[lo:lo + config.batch_size]
            dags = [train_dags[i] for i in ids]
            batch_cond = cond_raw[ids] if config.conditional else None
            total, recon, kl = model.loss(dags, batch_cond, generator=noise)
            if not torch.isfinite(total):
                raise NonFiniteLoss(ids.tolist())
            opt.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sums["loss"] += float(total.detach())
            sums["recon"] += float(recon.detach())
            sums["kl"] += float(kl.detach())
            batches += 1
        record = {
            "epoch": epoch,
            "loss": sums["loss"] / batches,
            "recon": sums["recon"] / batches,
            "kl": sums["kl"] / batches,
        }
        history.append(record)
        if log is not None:
            log(record)
        if checkpoint_dir is not None:
            save_checkpoint(model, history, Path(checkpoint_dir) / f"epoch{epoch:04d}.pt",
                            opt_state=opt.state_dict())
            _write_latest(Path(checkpoint_dir), epoch)
    return model, history


def train_steps(train_dags: list[EquationDag], cond_raw: np.ndarray | None,
                config: ModelConfig, *, max_steps: int, seed: int = 0,
                stop_check=None, check_every: int = 100):
    """Step-bounded variant of train() used for overfit runs.

    stop_check(model) -> bool is polled every `check_every` steps and stops
    early when it returns True.
    """
    torch.manual_seed(seed)
    model = GraphCVAE(config)
    if config.conditional:
        cond_raw = np.asarray(cond_raw, dtype=float)
        model.set_condition_stats(cond_raw.mean(axis=0), cond_raw.std(axis=0))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    noise = torch.Generator().manual_seed(seed + 1)
    n = len(train_dags)
    losses = []
    for step in range(max_steps):
        ids = rng.choice(n, size=min(config.batch_size, n), replace=False)
        dags = [train_dags[i] for i in ids]
        batch_cond = cond_raw[ids] if config.conditional else None
        total, recon, kl = model.loss(dags, batch_cond, generator=noise)
        if not torch.isfinite(total):
            raise NonFiniteLoss(ids.tolist())
        opt.zero_grad()
        total.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        losses.append(float(total.detach()))
        if stop_check is not None and (step + 1) % check_every == 0:
            if stop_check(model):
                break
    return model, losses


def sample_prior(n: int, model: GraphCVAE, cond_cache: np.ndarray | None = None,
                 seed: int = 0) -> list[EquationDag]:
    """Stochastic decode of n z ~ N(0, I) draws; conditions resampled from cache."""
    gen = torch.Generator().manual_seed(seed)
    dtype = model.fc_mu.weight.dtype
    out: list[EquationDag] = []
    chunk = 128
    with torch.no_grad():
        for lo in range(0, n, chunk):
            b = min(chunk, n - lo)
            z = torch.randn(b, model.config.latent_dim, generator=gen, dtype=dtype)
            cond = None
            if model.config.conditional:
                if cond_cache is None or len(cond_cache) == 0:
                    raise ShapeMismatch("conditional model needs a condition cache to sample")
                rows = torch.randint(len(cond_cache), (b,), generator=gen)
                cond = torch.as_tensor(np.asarray(cond_cache)[rows.numpy()], dtype=dtype)
            out.extend(model.free_decode(z, cond, stochastic=True, generator=gen))
    return out


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: GraphCVAE, history: list[dict], path, opt_state=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": 1,
            "config": asdict(model.config),
            "state": model.state_dict(),
            "history": history,
            "optimizer": opt_state,
            "saved_at": time.time(),
        },
        path,
    )


def _write_latest(directory: Path, epoch: int):
    (directory / "latest.json").write_text(
        json.dumps({"epoch": epoch, "file": f"epoch{epoch:04d}.pt"}) + "\n"
    )


def load_checkpoint(path) -> tuple[GraphCVAE, list[dict], dict | None]:
    path = Path(path)
    if path.is_dir():
        pointer = json.loads((path / "latest.json").read_text())
        path = path / pointer["file"]
    payload = torch.load(path, weights_only=False)
    config = ModelConfig(**payload["config"])
    model = GraphCVAE(config)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["history"], payload.get("optimizer")
