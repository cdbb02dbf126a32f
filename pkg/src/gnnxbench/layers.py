"""Message-passing layers and the per-graph aggregation context.

All layers run on either tracked Tensors (tape=True: training, explanation)
or plain ndarrays (tape=False: fast inference) through the same formulas.
An optional per-edge gate vector [E, 1], aligned with the context's directed
edge list, scales neighbor messages; self contributions stay ungated.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .graphs import Graph


class GraphContext:
    """Constant aggregation structures derived from a Graph."""

    def __init__(self, graph: Graph):
        n = graph.num_nodes
        e = graph.edges
        self.num_nodes = n
        # directed edge list (both directions, no self-loops)
        self.src = np.concatenate([e[:, 0], e[:, 1]]) if e.size else np.empty(0, np.int64)
        self.dst = np.concatenate([e[:, 1], e[:, 0]]) if e.size else np.empty(0, np.int64)

        ones = np.ones(self.src.size, dtype=np.float64)
        adj = sp.csr_matrix((ones, (self.src, self.dst)), shape=(n, n))
        degree = np.asarray(adj.sum(axis=1)).ravel()

        # GCN normalization over A + I
        deg_tilde = degree + 1.0
        inv_sqrt = 1.0 / np.sqrt(deg_tilde)
        self.gcn_norm = sp.diags(inv_sqrt) @ (adj + sp.eye(n, format="csr")) @ sp.diags(inv_sqrt)
        self.gcn_norm = self.gcn_norm.tocsr()
        # per-directed-edge coefficients and diagonal, for gated aggregation
        self.gcn_edge_vals = (inv_sqrt[self.src] * inv_sqrt[self.dst]).reshape(-1, 1)
        self.gcn_diag = (inv_sqrt * inv_sqrt).reshape(-1, 1)

        inv_deg = np.where(degree > 0, 1.0 / np.maximum(degree, 1.0), 0.0)
        self.mean_agg = (sp.diags(inv_deg) @ adj).tocsr()
        self.sum_selfloop = (adj + sp.eye(n, format="csr")).tocsr()
        self.degree = degree

        self._neighbors: list[np.ndarray] | None = None

    def neighbors(self) -> list[np.ndarray]:
        if self._neighbors is None:
            order = np.argsort(self.src, kind="stable")
            src_sorted = self.src[order]
            dst_sorted = self.dst[order]
            bounds = np.searchsorted(src_sorted, np.arange(self.num_nodes + 1))
            self._neighbors = [
                np.sort(dst_sorted[bounds[i]:bounds[i + 1]])
                for i in range(self.num_nodes)
            ]
        return self._neighbors

    def k_hop(self, node: int, hops: int) -> np.ndarray:
        """Sorted node ids within `hops` of node (inclusive)."""
        neigh = self.neighbors()
        frontier = {int(node)}
        seen = {int(node)}
        for _ in range(hops):
            nxt = set()
            for u in frontier:
                nxt.update(int(v) for v in neigh[u])
            nxt -= seen
            if not nxt:
                break
            seen |= nxt
            frontier = nxt
        return np.array(sorted(seen), dtype=np.int64)


def context_for(graph: Graph) -> GraphContext:
    cached = getattr(graph, "_ctx_cache", None)
    if cached is None:
        cached = GraphContext(graph)
        object.__setattr__(graph, "_ctx_cache", cached)
    return cached


def induced_subgraph(graph: Graph, nodes: np.ndarray) -> tuple[Graph, np.ndarray]:
    """Subgraph on `nodes` (sorted ids); returns it plus the old->new lookup."""
    nodes = np.asarray(nodes, dtype=np.int64)
    lookup = np.full(graph.num_nodes, -1, dtype=np.int64)
    lookup[nodes] = np.arange(nodes.size)
    if graph.num_edges:
        mask = (lookup[graph.edges[:, 0]] >= 0) & (lookup[graph.edges[:, 1]] >= 0)
        edges = lookup[graph.edges[mask]]
    else:
        edges = np.empty((0, 2), dtype=np.int64)
    sub = Graph(
        features=graph.features[nodes],
        edges=edges,
        labels=graph.labels[nodes],
        num_classes=graph.num_classes,
    )
    return sub, lookup


# ---------------------------------------------------------------------------
# layers


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    is_conv = False

    def named_params(self) -> list[tuple[str, Tensor]]:
        return []

    def forward(self, x, ctx: GraphContext, *, training: bool, update_stats: bool,
                tape: bool, gate=None):
        raise NotImplementedError

    def _p(self, t: Tensor, tape: bool):
        return t if tape else t.data


class ReLU(Layer):
    def forward(self, x, ctx, *, training, update_stats, tape, gate=None):
        return ad.relu(x)

    def __repr__(self):
        return "ReLU"


class Linear(Layer):
    def __init__(self, rng, in_dim: int, out_dim: int):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Tensor(glorot(rng, in_dim, out_dim, (in_dim, out_dim)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def named_params(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x, ctx, *, training, update_stats, tape, gate=None):
        return ad.add(ad.matmul(x, self._p(self.W, tape)), self._p(self.b, tape))

    def __repr__(self):
        return f"Linear({self.in_dim}, {self.out_dim})"


class BatchNorm(Layer):
    """Full-graph batch normalization; eval mode reuses the last stored stats."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.stored_mean: np.ndarray | None = None
        self.stored_var: np.ndarray | None = None

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x, ctx, *, training, update_stats, tape, gate=None):
        gamma, beta = self._p(self.gamma, tape), self._p(self.beta, tape)
        if training:
            out, mean, var = ad.batch_norm(x, gamma, beta, eps=self.eps)
            if update_stats:
                self.stored_mean, self.stored_var = mean, var
            return out
        if self.stored_mean is not None:
            mean, var = self.stored_mean, self.stored_var
        else:
            xd = x.data if isinstance(x, Tensor) else x
            mean, var = xd.mean(axis=0), xd.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        return ad.add(ad.mul(ad.mul(ad.sub(x, mean), inv_std), gamma), beta)

    def __repr__(self):
        return f"BatchNorm1d({self.dim}, eps={self.eps})"


class GCNConv(Layer):
    """Symmetric-normalized convolution: out = D̃^-1/2 (A+I) D̃^-1/2 X W."""

    is_conv = True

    def __init__(self, rng, in_dim: int, out_dim: int):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Tensor(glorot(rng, in_dim, out_dim, (in_dim, out_dim)),
                        requires_grad=True)

    def named_params(self):
        return [("W", self.W)]

    def forward(self, x, ctx, *, training, update_stats, tape, gate=None):
        xw = ad.matmul(x, self._p(self.W, tape))
        if gate is None:
            return ad.spmm(ctx.gcn_norm, xw)
        gated = ad.mul(gate, ctx.gcn_edge_vals)
        neigh = ad.weighted_neighbor_sum(gated, xw, ctx.src, ctx.dst, ctx.num_nodes)
        return ad.add(neigh, ad.mul(xw, ctx.gcn_diag))

    def __repr__(self):
        return f"GCNConv({self.in_dim}, {self.out_dim})"


class SAGEConv(Layer):
    """out = X W_self + mean_neighbors(X) W_neigh (isolated nodes get zeros)."""

    is_conv = True

    def __init__(self, rng, in_dim: int, out_dim: int):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W_self = Tensor(glorot(rng, in_dim, out_dim, (in_dim, out_dim)),
                             requires_grad=True)
        self.W_neigh = Tensor(glorot(rng, in_dim, out_dim, (in_dim, out_dim)),
                              requires_grad=True)

    def named_params(self):
        return [("W_self", self.W_self), ("W_neigh", self.W_neigh)]

    def forward(self, x, ctx, *, training, update_stats, tape, gate=None):
        own = ad.matmul(x, self._p(self.W_self, tape))
        xn = ad.matmul(x, self._p(self.W_neigh, tape))
        if gate is None:
            neigh = ad.spmm(ctx.mean_agg, xn)
        else:
            neigh = ad.weighted_neighbor_sum(gate, xn, ctx.src, ctx.dst,
                                             ctx.num_nodes)
        return ad.add(own, neigh)

    def __repr__(self):
        return f"SAGEConv({self.in_dim}, {self.out_dim})"


class GINConv(Layer):
    """out = mlp((1 + eps_gin) x + sum_neighbors(x)); eps_gin fixed at 0."""

    is_conv = True

    def __init__(self, rng, mlp: list[Layer], in_dim: int, out_dim: int):
        self.mlp = mlp
        self.in_dim, self.out_dim = in_dim, out_dim
        self.eps_gin = 0.0

    def named_params(self):
        out = []
        for i, layer in enumerate(self.mlp):
            out.extend((f"mlp.{i}.{name}", p) for name, p in layer.named_params())
        return out

    def forward(self, x, ctx, *, training, update_stats, tape, gate=None):
        if gate is None:
            h = ad.spmm(ctx.sum_selfloop, x)
        else:
            neigh = ad.weighted_neighbor_sum(gate, x, ctx.src, ctx.dst,
                                             ctx.num_nodes)
            h = ad.add(x, neigh)
        for layer in self.mlp:
            h = layer.forward(h, ctx, training=training,
                              update_stats=update_stats, tape=tape)
        return h

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.mlp)
        return f"GINConv([{inner}])"


class GATConv(Layer):
    """Attention over neighborhood plus self; LeakyReLU slope 0.2.

    Heads are concatenated when concat=True, averaged otherwise.
    """

    is_conv = True

    def __init__(self, rng, in_dim: int, out_dim: int, heads: int,
                 concat: bool):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.heads = heads
        self.concat = concat
        self.head_params = []
        for _ in range(heads):
            w = Tensor(glorot(rng, in_dim, out_dim, (in_dim, out_dim)),
                       requires_grad=True)
            a_src = Tensor(glorot(rng, out_dim, 1, (out_dim, 1)), requires_grad=True)
            a_dst = Tensor(glorot(rng, out_dim, 1, (out_dim, 1)), requires_grad=True)
            self.head_params.append((w, a_src, a_dst))

    def named_params(self):
        out = []
        for h, (w, a_src, a_dst) in enumerate(self.head_params):
            out.append((f"head{h}.W", w))
            out.append((f"head{h}.a_src", a_src))
            out.append((f"head{h}.a_dst", a_dst))
        return out

    def forward(self, x, ctx, *, training, update_stats, tape, gate=None):
        n = ctx.num_nodes
        e = ctx.src.size
        self_idx = np.arange(n, dtype=np.int64)
        esrc = np.concatenate([ctx.src, self_idx])
        edst = np.concatenate([ctx.dst, self_idx])

        head_outs = []
        for w, a_src, a_dst in self.head_params:
            h = ad.matmul(x, self._p(w, tape))
            s = ad.matmul(h, self._p(a_src, tape))
            t = ad.matmul(h, self._p(a_dst, tape))
            logits = ad.leaky_relu(
                ad.add(ad.gather_rows(s, esrc), ad.gather_rows(t, edst)), 0.2
            )
            # stabilize the segment softmax with a constant per-source shift
            raw = logits.data if isinstance(logits, Tensor) else logits
            shift = np.full((n, 1), -np.inf)
            np.maximum.at(shift, esrc, raw)
            expd = ad.exp(ad.sub(logits, shift[esrc]))
            denom = ad.segment_sum(expd, esrc, n)
            alpha = ad.div(expd, ad.gather_rows(denom, esrc))
            if gate is None or e == 0:
                out = ad.weighted_neighbor_sum(alpha, h, esrc, edst, n)
            else:
                a_edges = ad.gather_rows(alpha, np.arange(e, dtype=np.int64))
                a_self = ad.gather_rows(alpha, np.arange(e, e + n, dtype=np.int64))
                out = ad.add(
                    ad.weighted_neighbor_sum(ad.mul(a_edges, gate), h,
                                             ctx.src, ctx.dst, n),
                    ad.weighted_neighbor_sum(a_self, h, self_idx, self_idx, n),
                )
            head_outs.append(out)

        if len(head_outs) == 1:
            return head_outs[0]
        if self.concat:
            return ad.concat_cols(head_outs)
        acc = head_outs[0]
        for extra in head_outs[1:]:
            acc = ad.add(acc, extra)
        return ad.mul(acc, 1.0 / len(head_outs))

    def __repr__(self):
        return f"GATConv({self.in_dim}, {self.out_dim}, heads={self.heads})"
