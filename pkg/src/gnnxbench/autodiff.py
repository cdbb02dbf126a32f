"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and, when any operand requires gradients, the
producing op appends a closure to an implicit tape (the DAG of parents).
``Tensor.backward()`` walks that DAG once in reverse topological order.

Every op also accepts plain ndarrays; if no operand is a tracked Tensor the
op returns a plain ndarray, which gives model inference a tape-free fast
path through the exact same formulas.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


def _data(x) -> Array:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _plain(value: Array, *xs):
    # No gradient needed: stay a Tensor only if a Tensor came in.
    if any(isinstance(x, Tensor) for x in xs):
        return Tensor(value)
    return value


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum g back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Array, b: Array) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}"
        ) from None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar; fills .grad on every reachable Tensor."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _wire(value: Array, pulls) -> Tensor:
    """Build a tracked output; pulls = [(operand, fn(g) -> grad contribution)]."""
    live = [(x, fn) for x, fn in pulls if isinstance(x, Tensor) and x.requires_grad]
    out = Tensor(value, requires_grad=True)
    out._parents = tuple(x for x, _ in live)

    def backward(g: Array) -> None:
        for x, fn in live:
            x._accumulate(fn(g))

    out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Module-level alias for Tensor.backward."""
    loss.backward()


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast("add", ad, bd)
    y = ad + bd
    if not _tracked(a, b):
        return _plain(y, a, b)
    return _wire(y, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(g, bd.shape)),
    ])


def sub(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast("sub", ad, bd)
    y = ad - bd
    if not _tracked(a, b):
        return _plain(y, a, b)
    return _wire(y, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(-g, bd.shape)),
    ])


def mul(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast("mul", ad, bd)
    y = ad * bd
    if not _tracked(a, b):
        return _plain(y, a, b)
    return _wire(y, [
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def div(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast("div", ad, bd)
    y = ad / bd
    if not _tracked(a, b):
        return _plain(y, a, b)
    return _wire(y, [
        (a, lambda g: _unbroadcast(g / bd, ad.shape)),
        (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    ])


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    y = ad @ bd
    if not _tracked(a, b):
        return _plain(y, a, b)
    return _wire(y, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def spmm(sparse, x):
    """Constant sparse matrix (scipy CSR) times a dense operand.

    The sparse structure is graph adjacency and is never differentiated;
    gradients flow through x only.
    """
    xd = _data(x)
    if sparse.shape[1] != xd.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {sparse.shape} and {xd.shape}")
    y = sparse @ xd
    if not _tracked(x):
        return _plain(y, x)
    sparse_t = sparse.T.tocsr()
    return _wire(y, [(x, lambda g: sparse_t @ g)])


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x):
    xd = _data(x)
    y = np.maximum(xd, 0.0)
    if not _tracked(x):
        return _plain(y, x)
    mask = xd > 0
    return _wire(y, [(x, lambda g: g * mask)])


def leaky_relu(x, slope: float = 0.2):
    xd = _data(x)
    y = np.where(xd > 0, xd, slope * xd)
    if not _tracked(x):
        return _plain(y, x)
    deriv = np.where(xd > 0, 1.0, slope)
    return _wire(y, [(x, lambda g: g * deriv)])


def sigmoid(x):
    xd = _data(x)
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    if not _tracked(x):
        return _plain(y, x)
    return _wire(y, [(x, lambda g: g * y * (1.0 - y))])


def exp(x):
    xd = _data(x)
    y = np.exp(xd)
    if not _tracked(x):
        return _plain(y, x)
    return _wire(y, [(x, lambda g: g * y)])


def clamp_min(x, floor: float):
    """max(x, floor) composed from relu; gradient 0 below the floor."""
    return add(relu(sub(x, floor)), floor)


# ---------------------------------------------------------------------------
# row-wise softmax family


def log_softmax(x):
    xd = _data(x)
    if xd.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-d input, got {xd.shape}")
    shifted = xd - xd.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    if not _tracked(x):
        return _plain(y, x)
    soft = np.exp(y)
    return _wire(y, [(x, lambda g: g - soft * g.sum(axis=1, keepdims=True))])


def softmax_t(x, temperature: float = 1.0):
    """Row-wise softmax of x / T."""
    xd = _data(x)
    if xd.ndim != 2:
        raise ShapeError(f"softmax_t: expected 2-d input, got {xd.shape}")
    z = xd / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    if not _tracked(x):
        return _plain(y, x)

    def pull(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True)) / temperature

    return _wire(y, [(x, pull)])


def batch_norm(x, gamma, beta, eps: float = 1e-5):
    """Per-feature normalization over rows (training statistics).

    Returns (out, mean, var): batch statistics are handed back so the layer
    can store them for evaluation mode.
    """
    xd, gd, bd = _data(x), _data(gamma), _data(beta)
    if xd.ndim != 2 or gd.shape != (xd.shape[1],) or bd.shape != (xd.shape[1],):
        raise ShapeError(
            f"batch_norm: incompatible shapes {xd.shape}, {gd.shape}, {bd.shape}"
        )
    mean = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    y = gd * xhat + bd
    if not _tracked(x, gamma, beta):
        return _plain(y, x, gamma, beta), mean, var

    def pull_x(g):
        return (gd * inv_std) * (
            g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)
        )

    out = _wire(y, [
        (x, pull_x),
        (gamma, lambda g: (g * xhat).sum(axis=0)),
        (beta, lambda g: g.sum(axis=0)),
    ])
    return out, mean, var


# ---------------------------------------------------------------------------
# reductions and losses


def tensor_sum(x):
    xd = _data(x)
    y = np.asarray(xd.sum())
    if not _tracked(x):
        return _plain(y, x)
    return _wire(y, [(x, lambda g: np.broadcast_to(g, xd.shape).copy())])


def mean(x):
    xd = _data(x)
    y = np.asarray(xd.mean())
    if not _tracked(x):
        return _plain(y, x)
    n = xd.size
    return _wire(y, [(x, lambda g: np.broadcast_to(g / n, xd.shape).copy())])


def l1_norm(x):
    xd = _data(x)
    y = np.asarray(np.abs(xd).sum())
    if not _tracked(x):
        return _plain(y, x)
    sign = np.sign(xd)
    return _wire(y, [(x, lambda g: g * sign)])


def l2_norm_sq(x):
    xd = _data(x)
    y = np.asarray((xd * xd).sum())
    if not _tracked(x):
        return _plain(y, x)
    return _wire(y, [(x, lambda g: g * 2.0 * xd)])


def mse_loss(a, b):
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"mse_loss: incompatible shapes {ad.shape} and {bd.shape}")
    diff = ad - bd
    y = np.asarray((diff * diff).mean())
    if not _tracked(a, b):
        return _plain(y, a, b)
    n = diff.size
    return _wire(y, [
        (a, lambda g: g * 2.0 * diff / n),
        (b, lambda g: -g * 2.0 * diff / n),
    ])


def nll_loss(log_probs, labels, rows):
    """Mean negative log-likelihood over the selected rows.

    log_probs: [n, C] row-wise log-probabilities; labels: [n] class ids;
    rows: index array of rows that participate.
    """
    lp = _data(log_probs)
    rows = np.asarray(rows, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if lp.ndim != 2:
        raise ShapeError(f"nll_loss: expected 2-d log-probs, got {lp.shape}")
    if rows.size == 0:
        raise ContractError("nll_loss: empty row selection")
    picked = lp[rows, labels[rows]]
    y = np.asarray(-picked.mean())
    if not _tracked(log_probs):
        return _plain(y, log_probs)
    k = rows.size

    def pull(g):
        gx = np.zeros_like(lp)
        gx[rows, labels[rows]] = -g / k
        return gx

    return _wire(y, [(log_probs, pull)])


def bernoulli_entropy(p, eps: float = 1e-15):
    """Elementwise binary entropy; probabilities clamped to [eps, 1-eps]."""
    pd = _data(p)
    c = np.clip(pd, eps, 1.0 - eps)
    y = -c * np.log(c) - (1.0 - c) * np.log(1.0 - c)
    if not _tracked(p):
        return _plain(y, p)
    inside = (pd > eps) & (pd < 1.0 - eps)
    deriv = np.where(inside, np.log((1.0 - c) / c), 0.0)
    return _wire(y, [(p, lambda g: g * deriv)])


# ---------------------------------------------------------------------------
# structure ops


def concat_cols(parts):
    datas = [_data(p) for p in parts]
    if any(d.ndim != 2 for d in datas) or len({d.shape[0] for d in datas}) != 1:
        raise ShapeError(
            "concat_cols: operands must be 2-d with equal row counts, got "
            + str([d.shape for d in datas])
        )
    y = np.concatenate(datas, axis=1)
    if not _tracked(*parts):
        return _plain(y, *parts)
    pulls = []
    start = 0
    for p, d in zip(parts, datas):
        lo, hi = start, start + d.shape[1]
        pulls.append((p, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
        start = hi
    return _wire(y, pulls)


def gather_rows(x, idx):
    """Select rows by index (repeats allowed); backward scatter-adds."""
    xd = _data(x)
    idx = np.asarray(idx, dtype=np.int64)
    y = xd[idx]
    if not _tracked(x):
        return _plain(y, x)

    def pull(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return gx

    return _wire(y, [(x, pull)])


def segment_sum(x, segments, num_segments: int):
    """Sum rows of x into num_segments bins given per-row segment ids."""
    xd = _data(x)
    segments = np.asarray(segments, dtype=np.int64)
    if xd.shape[0] != segments.shape[0]:
        raise ShapeError(
            f"segment_sum: incompatible shapes {xd.shape} and {segments.shape}"
        )
    y = np.zeros((num_segments,) + xd.shape[1:], dtype=np.float64)
    np.add.at(y, segments, xd)
    if not _tracked(x):
        return _plain(y, x)
    return _wire(y, [(x, lambda g: g[segments])])


def weighted_neighbor_sum(weights, x, src, dst, num_nodes: int):
    """out[src[e]] += weights[e] * x[dst[e]] over directed edges.

    weights: [E, 1] per-edge coefficients; x: [n, d] node rows. Both sides
    are differentiable; the edge structure is constant.
    """
    wd, xd = _data(weights), _data(x)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if wd.shape != (src.size, 1) or xd.ndim != 2:
        raise ShapeError(
            f"weighted_neighbor_sum: incompatible shapes {wd.shape} and {xd.shape}"
        )
    y = np.zeros((num_nodes, xd.shape[1]), dtype=np.float64)
    np.add.at(y, src, wd * xd[dst])
    if not _tracked(weights, x):
        return _plain(y, weights, x)

    def pull_w(g):
        return (g[src] * xd[dst]).sum(axis=1, keepdims=True)

    def pull_x(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, dst, wd * g[src])
        return gx

    return _wire(y, [(weights, pull_w), (x, pull_x)])


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction (defaults lr=1e-3, betas=(0.9, 0.999), eps=1e-8)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam: gradient shape {g.shape} does not match parameter "
                    f"shape {p.data.shape}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
