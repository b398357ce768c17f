"""Shared fixtures and oracles for the test suite."""

import numpy as np

from fmtlsim.synthdata import TASK_KINDS, DataSplit


def make_labeled_batch(n, tasks, seed=0):
    """A batch with synthetic labels of the right shape for each task."""
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((n, 16))
    labels = {}
    for t in tasks:
        kind = TASK_KINDS[t]
        if t == "depth_like":
            labels[t] = gen.standard_normal((n, 1))
        elif t == "edge_like":
            labels[t] = (gen.random((n, 1)) < 0.2).astype(np.float64)
        elif t == "normals_like":
            v = gen.standard_normal((n, 3))
            labels[t] = v / np.linalg.norm(v, axis=1, keepdims=True)
        else:
            labels[t] = gen.integers(0, kind.output_dim, size=n)
    return DataSplit(x=x, labels=labels)


def finite_difference_errors(fwd, params, batch, indices, h=1e-5):
    """Relative errors between analytic gradients and central differences of
    the combined loss, at the given coordinates."""
    _, _, grad = fwd(params, batch)
    errors = []
    for i in indices:
        plus = params.copy()
        plus.values[i] += h
        minus = params.copy()
        minus.values[i] -= h
        _, lp, _ = fwd(plus, batch)
        _, lm, _ = fwd(minus, batch)
        fd = (lp - lm) / (2 * h)
        denom = max(abs(fd), abs(grad[i]), 1e-6)
        errors.append(abs(fd - grad[i]) / denom)
    return errors
