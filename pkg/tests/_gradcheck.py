"""Shared central finite-difference gradient oracle for tests."""

import numpy as np

from costdet import autodiff as ad

FD_H = 1e-5
FD_RTOL = 1e-4


def numeric_gradients(build, arrays):
    """Central finite differences of build(arrays).item() w.r.t. each array."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            pert = [np.array(a, dtype=np.float64) for a in arrays]
            pert[k][idx] = base[idx] + FD_H
            fp = build([ad.Value(p) for p in pert]).item()
            pert[k][idx] = base[idx] - FD_H
            fm = build([ad.Value(p) for p in pert]).item()
            g[idx] = (fp - fm) / (2.0 * FD_H)
        grads.append(g)
    return grads


def check_gradients(build, arrays):
    """Assert analytic gradients match central finite differences."""
    leaves = [ad.Value(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build(leaves)
    loss.backward()
    numeric = numeric_gradients(build, arrays)
    for leaf, num in zip(leaves, numeric):
        denom = np.maximum(np.maximum(np.abs(leaf.grad), np.abs(num)), 1e-3)
        rel = np.abs(leaf.grad - num) / denom
        assert rel.max() < FD_RTOL, f"gradcheck failed: max rel err {rel.max():.3e}"
