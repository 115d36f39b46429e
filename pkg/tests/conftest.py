"""Shared test helpers: finite-difference oracles and tiny dataset builders."""

import numpy as np

from deconfae import autodiff as ad
from deconfae.autodiff import Tensor
from deconfae.data import ExpressionDataset


def central_diff(fn, arrays, h=1e-3):
    """Central finite-difference gradients of a scalar-valued ``fn``.

    ``fn`` maps a list of float64 numpy arrays to a float.  Returns one
    gradient array per input.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(arrays)
            flat[i] = orig - h
            lo = fn(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays):
    """Backprop gradients of a scalar graph built by ``fn`` over leaf tensors
    created from ``arrays``.  Returns one gradient array per input (zeros for
    leaves the loss does not reach)."""
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
              for a in arrays]
    loss = fn(leaves)
    grads = ad.backward(loss)
    return [grads[l].data if l in grads else np.zeros_like(l.data)
            for l in leaves]


def max_rel_err(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|n|, floor) over all entries of all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(fn, arrays, tol=1e-3, h=1e-3):
    def scalar(arrs):
        loss = fn([Tensor(a, requires_grad=True) for a in arrs])
        return float(loss.data)

    numeric = central_diff(scalar, arrays, h=h)
    analytic = analytic_grads(fn, arrays)
    err = max_rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: max rel err {err:.3e}"
    return err


def make_dataset(matrix, domain="cell_line", labels=None, prefix="S",
                 strata=None):
    matrix = np.asarray(matrix, dtype=np.float32)
    n, d = matrix.shape
    return ExpressionDataset(
        sample_ids=[f"{prefix}{i:04d}" for i in range(n)],
        feature_names=[f"g{j:04d}" for j in range(d)],
        matrix=matrix, domain=domain,
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        strata=strata)
