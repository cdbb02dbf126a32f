"""Shared test utilities: finite-difference gradient checking and small graphs."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

import gnnxbench.autodiff as ad
from gnnxbench.autodiff import Tensor


def finite_diff(f, x0: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x0))
        flat[i] = orig - step
        down = float(f(x0))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def gradcheck(build_loss, inputs: dict[str, np.ndarray], step: float = 1e-4,
              rel_tol: float = 1e-4) -> float:
    """Compare analytic gradients against central differences.

    build_loss receives {name: Tensor} and must return a scalar Tensor.
    Returns the worst relative error across all inputs.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    loss = build_loss(tensors)
    for t in tensors.values():
        t.zero_grad()
    loss.backward()

    worst = 0.0
    for name, base in inputs.items():
        def scalar_fn(x, name=name):
            probe = {k: Tensor(v.copy()) for k, v in inputs.items()}
            probe[name] = Tensor(x.copy())
            return float(build_loss(probe).data)

        numeric = finite_diff(scalar_fn, np.asarray(base, dtype=np.float64), step)
        analytic = tensors[name].grad
        scale = max(np.abs(numeric).max(), 1.0)
        err = np.abs(analytic - numeric).max() / scale
        worst = max(worst, err)
        assert err <= rel_tol, (
            f"gradient mismatch for '{name}': rel err {err:.3e} > {rel_tol:.0e}"
        )
    return worst


def away_from_kinks(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin * 2, x)


def gradcheck_every_primitive(case: int) -> None:
    """One randomized-shape finite-difference pass over every primitive."""
    rng = np.random.default_rng(1000 + case)
    n, d = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    m = int(rng.integers(1, 6))
    r_a = rng.normal(size=(n, d))

    def lin(out, r):
        return ad.tensor_sum(ad.mul(out, r))

    gradcheck(lambda t: lin(t["a"] + t["b"], r_a),
              {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(n, d))})
    gradcheck(lambda t: lin(t["a"] - t["b"], r_a),
              {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(n, d))})
    gradcheck(lambda t: lin(ad.mul(t["a"], t["b"]), r_a),
              {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(n, d))})
    gradcheck(lambda t: lin(ad.div(t["a"], t["b"]), r_a),
              {"a": rng.normal(size=(n, d)),
               "b": away_from_kinks(rng, (n, d), margin=0.4)})
    gradcheck(lambda t: lin(t["a"] * 0.37, r_a), {"a": rng.normal(size=(n, d))})
    r_mm = rng.normal(size=(n, m))
    gradcheck(lambda t: ad.tensor_sum(ad.mul(t["a"] @ t["b"], r_mm)),
              {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(d, m))})
    gradcheck(lambda t: lin(ad.relu(t["a"]), r_a),
              {"a": away_from_kinks(rng, (n, d))})
    gradcheck(lambda t: lin(ad.leaky_relu(t["a"], 0.2), r_a),
              {"a": away_from_kinks(rng, (n, d))})
    gradcheck(lambda t: lin(ad.sigmoid(t["a"]), r_a), {"a": rng.normal(size=(n, d))})
    gradcheck(lambda t: lin(ad.exp(t["a"]), r_a), {"a": rng.normal(size=(n, d))})
    gradcheck(lambda t: lin(ad.log_softmax(t["a"]), r_a),
              {"a": rng.normal(size=(n, d)) * 2})
    gradcheck(lambda t: lin(ad.softmax_t(t["a"], 5.0), r_a),
              {"a": rng.normal(size=(n, d)) * 3})
    r_bn = rng.normal(size=(n + 2, d))
    gradcheck(lambda t: lin(ad.batch_norm(t["x"], t["gamma"], t["beta"])[0], r_bn),
              {"x": rng.normal(size=(n + 2, d)) * 1.5,
               "gamma": rng.normal(size=(d,)) + 1.5,
               "beta": rng.normal(size=(d,))})
    gradcheck(lambda t: ad.tensor_sum(t["a"]), {"a": rng.normal(size=(n, d))})
    gradcheck(lambda t: ad.mean(t["a"]), {"a": rng.normal(size=(n, d))})
    gradcheck(lambda t: ad.l1_norm(t["a"]), {"a": away_from_kinks(rng, (n, d))})
    gradcheck(lambda t: ad.l2_norm_sq(t["a"]), {"a": rng.normal(size=(n, d))})
    gradcheck(lambda t: ad.mse_loss(t["a"], t["b"]),
              {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(n, d))})

    labels = rng.integers(0, d, size=n)
    rows = np.unique(rng.integers(0, n, size=max(1, n - 1)))
    gradcheck(lambda t: ad.nll_loss(ad.log_softmax(t["a"]), labels, rows),
              {"a": rng.normal(size=(n, d))})
    gradcheck(lambda t: lin(ad.bernoulli_entropy(t["p"]), r_a),
              {"p": rng.uniform(0.05, 0.95, size=(n, d))})

    r_cat = rng.normal(size=(n, 2 * d))
    gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.concat_cols([t["a"], t["b"]]), r_cat)),
              {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(n, d))})

    idx = rng.integers(0, n, size=n + 1)
    r_gather = rng.normal(size=(n + 1, d))
    gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.gather_rows(t["a"], idx), r_gather)),
              {"a": rng.normal(size=(n, d))})

    dense = (rng.random((m, n)) < 0.5).astype(np.float64) * rng.normal(size=(m, n))
    sparse = sp.csr_matrix(dense)
    r_sp = rng.normal(size=(m, d))
    gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.spmm(sparse, t["x"]), r_sp)),
              {"x": rng.normal(size=(n, d))})

    e = int(rng.integers(1, 10))
    src = rng.integers(0, n, size=e)
    dst = rng.integers(0, n, size=e)
    r_seg = rng.normal(size=(n, 1))
    gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.segment_sum(t["w"], src, n), r_seg)),
              {"w": rng.normal(size=(e, 1))})
    r_wns = rng.normal(size=(n, d))
    gradcheck(lambda t: ad.tensor_sum(ad.mul(
        ad.weighted_neighbor_sum(t["w"], t["x"], src, dst, n), r_wns)),
        {"w": rng.normal(size=(e, 1)), "x": rng.normal(size=(n, d))})
