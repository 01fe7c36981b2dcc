"""Inter-cell communication for architecture logits.

A reasoning graph is built between the edges (or flattened operations) of
adjacent cells; one graph-convolution layer with a residual propagates the
previous cell's logits into the current cell's, fused with coefficient gamma:

    updated_k = alpha_k + gamma * unembed(gcn(embed(alpha_prev), Adj))

The module is used during search only; derivation consumes the final updated
logits and the weights are discarded afterwards.
"""

import math
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn


class ReasoningGraphKind(Enum):
    EDGE_SIMILARITY = "edge_similarity"
    OPERATION_IDENTITY = "operation_identity"


def compute_adjacency(alpha_k, alpha_prev, w1, w2):
    """Row-stochastic p x p similarity graph between the two cells' edges.

    Adj = row softmax of (alpha_k w1)(alpha_prev w2)^T.
    """
    if alpha_k.shape != alpha_prev.shape:
        raise ValueError(f"shape mismatch: {tuple(alpha_k.shape)} vs {tuple(alpha_prev.shape)}")
    q = alpha_k.shape[1]
    if w1.shape != (q, q) or w2.shape != (q, q):
        raise ValueError(f"w1/w2 must be {q}x{q}, got {tuple(w1.shape)}, {tuple(w2.shape)}")
    sim = (alpha_k @ w1) @ (alpha_prev @ w2).T
    return torch.softmax(sim, dim=-1)


def gcn_propagate(h, adj, w_g):
    """One graph-convolution layer with residual: adj @ h @ w_g + h."""
    if adj.shape[0] != adj.shape[1] or adj.shape[1] != h.shape[0]:
        raise ValueError(f"adjacency {tuple(adj.shape)} incompatible with h {tuple(h.shape)}")
    if w_g.shape != (h.shape[1], h.shape[1]):
        raise ValueError(f"w_g must be {h.shape[1]}x{h.shape[1]}, got {tuple(w_g.shape)}")
    return adj @ h @ w_g + h


@dataclass
class PairWeights:
    """Learnable weights for one adjacent-cell pair."""

    embed: torch.Tensor    # q x d (edge graph) or 1 x d (operation graph)
    unembed: torch.Tensor  # d x q or d x 1
    w_g: torch.Tensor      # d x d
    w1: torch.Tensor = None  # q x q, edge graph only
    w2: torch.Tensor = None


def ggm_update(alpha_k, alpha_prev_updated, weights, kind, gamma):
    """Fuse the previous cell's (already updated) logits into alpha_k."""
    if alpha_k.shape != alpha_prev_updated.shape:
        raise ValueError(
            f"shape mismatch: {tuple(alpha_k.shape)} vs {tuple(alpha_prev_updated.shape)}")
    if kind is ReasoningGraphKind.EDGE_SIMILARITY:
        adj = compute_adjacency(alpha_k, alpha_prev_updated, weights.w1, weights.w2)
        h = alpha_prev_updated @ weights.embed
        correction = gcn_propagate(h, adj, weights.w_g) @ weights.unembed
    elif kind is ReasoningGraphKind.OPERATION_IDENTITY:
        flat_k = alpha_k.reshape(-1)
        flat_prev = alpha_prev_updated.reshape(-1)
        adj = torch.softmax(torch.outer(flat_k, flat_prev), dim=-1)
        h = flat_prev.unsqueeze(-1) @ weights.embed
        out = gcn_propagate(h, adj, weights.w_g) @ weights.unembed
        correction = out.reshape(alpha_k.shape)
    else:
        raise ValueError(f"unknown reasoning graph kind: {kind!r}")
    return alpha_k + gamma * correction


# Correction weights start small (0.3 of the usual 1/sqrt(fan_in) bound) so
# the update begins near an identity and the chained corrections cannot swamp
# the raw logits before any learning has happened.
_INIT_SCALE = 0.3


def _uniform(shape, fan_in, generator, dtype):
    bound = _INIT_SCALE / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


class GgmParams(nn.Module):
    """Weights of the graph-guided update, one set per adjacent-cell pair.

    With shared_weights a single set serves every pair. gamma = 0 makes the
    update an exact identity, which recovers the independent-cell baseline.
    """

    def __init__(self, num_cells, num_edges, num_ops, d=64, gamma=0.5,
                 kind=ReasoningGraphKind.EDGE_SIMILARITY, shared_weights=False,
                 chained=True, generator=None, dtype=torch.float32):
        super().__init__()
        if d < 1:
            raise ValueError(f"embedding dimension must be >= 1, got {d}")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        self.num_cells = num_cells
        self.num_edges = num_edges
        self.num_ops = num_ops
        self.d = d
        self.gamma = gamma
        self.kind = kind
        self.shared_weights = shared_weights
        self.chained = chained
        pairs = 1 if shared_weights else max(num_cells - 1, 0)
        if num_cells < 2:
            pairs = 0
        q = num_ops
        in_dim = q if kind is ReasoningGraphKind.EDGE_SIMILARITY else 1
        self.embed = nn.ParameterList(
            nn.Parameter(_uniform((in_dim, d), in_dim, generator, dtype)) for _ in range(pairs))
        self.unembed = nn.ParameterList(
            nn.Parameter(_uniform((d, in_dim), d, generator, dtype)) for _ in range(pairs))
        self.w_g = nn.ParameterList(
            nn.Parameter(_uniform((d, d), d, generator, dtype)) for _ in range(pairs))
        if kind is ReasoningGraphKind.EDGE_SIMILARITY:
            self.w1 = nn.ParameterList(
                nn.Parameter(_uniform((q, q), q, generator, dtype)) for _ in range(pairs))
            self.w2 = nn.ParameterList(
                nn.Parameter(_uniform((q, q), q, generator, dtype)) for _ in range(pairs))
        else:
            self.w1 = nn.ParameterList()
            self.w2 = nn.ParameterList()

    def pair_weights(self, pair_index):
        i = 0 if self.shared_weights else pair_index
        return PairWeights(
            embed=self.embed[i],
            unembed=self.unembed[i],
            w_g=self.w_g[i],
            w1=self.w1[i] if len(self.w1) else None,
            w2=self.w2[i] if len(self.w2) else None,
        )

    def propagate(self, alphas):
        if len(alphas) != self.num_cells:
            raise ValueError(f"expected {self.num_cells} cells, got {len(alphas)}")
        out = [alphas[0]]
        for k in range(1, len(alphas)):
            prev = out[k - 1] if self.chained else alphas[k - 1]
            out.append(ggm_update(alphas[k], prev, self.pair_weights(k - 1),
                                  self.kind, self.gamma))
        return out


class FcMixer(nn.Module):
    """Fully-connected baseline: a learned dense map from the previous cell's
    flattened logits to a p x q correction, fused like the graph update."""

    def __init__(self, num_cells, num_edges, num_ops, gamma=0.5, chained=True,
                 generator=None, dtype=torch.float32):
        super().__init__()
        self.num_cells = num_cells
        self.num_edges = num_edges
        self.num_ops = num_ops
        self.gamma = gamma
        self.chained = chained
        pq = num_edges * num_ops
        pairs = max(num_cells - 1, 0)
        self.weight = nn.ParameterList(
            nn.Parameter(_uniform((pq, pq), pq, generator, dtype)) for _ in range(pairs))

    def propagate(self, alphas):
        if len(alphas) != self.num_cells:
            raise ValueError(f"expected {self.num_cells} cells, got {len(alphas)}")
        out = [alphas[0]]
        for k in range(1, len(alphas)):
            prev = out[k - 1] if self.chained else alphas[k - 1]
            correction = (self.weight[k - 1] @ prev.reshape(-1)).reshape(alphas[k].shape)
            out.append(alphas[k] + self.gamma * correction)
        return out


def propagate_chain(alphas, coupler=None):
    """Updated logits for every cell; identity when no coupler is configured.

    The first cell has no predecessor and passes through unchanged; the chain
    is differentiable end to end, so gradients reach every cell's raw logits.
    """
    if coupler is None:
        return list(alphas)
    return coupler.propagate(list(alphas))


def build_coupler(config, num_cells, num_edges, num_ops, generator=None,
                  dtype=torch.float32):
    """Instantiate the communication module named by a GgmConfig (None = off)."""
    if config.mode == "off":
        return None
    if config.mode == "fc":
        return FcMixer(num_cells, num_edges, num_ops, gamma=config.gamma,
                       chained=config.chained, generator=generator, dtype=dtype)
    if config.mode == "ggm":
        return GgmParams(
            num_cells, num_edges, num_ops, d=config.d, gamma=config.gamma,
            kind=ReasoningGraphKind(config.graph), shared_weights=config.shared_weights,
            chained=config.chained, generator=generator, dtype=dtype)
    raise ValueError(f"unknown communication mode {config.mode!r}")
