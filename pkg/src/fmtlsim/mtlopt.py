"""Multi-source gradient combination for the federated server.

Implements the weighted loss combination, projection-based gradient surgery
(PCGrad, Yu et al. 2020), the conflict-averse combination (CAGrad, Liu et
al. 2021), and the pseudo-gradient construction that turns client parameter
deltas into server-side descent directions.

Both surgery operators act on *accumulated* client deltas at the server,
not on per-batch gradients inside a client.  The PCGrad combiner returns the
arithmetic mean of the surgered gradients so server steps stay on the same
scale as plain averaging; with mutually non-conflicting inputs it reduces to
the plain mean, and CAGrad reduces to the plain mean at c = 0.  Applying the
mean of pseudo-gradients with a unit server step reproduces federated
averaging exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numkernel import LayoutMismatch, RngStream, SegmentedParams, ShapeError

_ZERO_NORM = 1e-12

GradientSet = Sequence[tuple[int, np.ndarray]]


@dataclass(frozen=True)
class CagradConfig:
    """Conflict-averse combination settings; c in [0, 1)."""

    c: float = 0.5
    iterations: int = 50
    step: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.c < 1.0:
            raise ValueError("c must be in [0, 1)")
        if self.iterations < 1 or self.step <= 0:
            raise ValueError("need iterations >= 1 and step > 0")


def _stack(grads: GradientSet) -> np.ndarray:
    if not grads:
        raise ShapeError("gradient set is empty")
    arrays = [np.asarray(g, dtype=np.float64) for _, g in grads]
    length = arrays[0].shape
    if any(a.shape != length for a in arrays):
        raise ShapeError("gradients in a set must have uniform length")
    return np.stack(arrays)


def pseudo_gradient(global_params: SegmentedParams, local_params: SegmentedParams) -> np.ndarray:
    """theta_global - theta_local: the client's accumulated update, signed as
    a descent direction for the server."""
    if not global_params.layout.compatible(local_params.layout):
        raise LayoutMismatch("pseudo-gradient needs compatible layouts")
    return global_params.values - local_params.values


def combine_losses(losses: Sequence[float], q_weights: Sequence[float]) -> float:
    """Weighted mean sum(q_t * l_t) / sum(q_t)."""
    if len(losses) != len(q_weights):
        raise ShapeError("need one weight per loss")
    q = np.asarray(q_weights, dtype=np.float64)
    if np.any(q < 0):
        raise ValueError("task weights must be non-negative")
    total = float(q.sum())
    if total <= 0:
        raise ValueError("task weights must not all be zero")
    return float(np.dot(q, np.asarray(losses, dtype=np.float64)) / total)


def pcgrad(grads: GradientSet, rng: RngStream) -> np.ndarray:
    """Project each gradient off the others it conflicts with, then average.

    For every g_i, the other gradients are visited in a seeded random order;
    whenever g_i . g_j < 0, g_i loses its component along g_j.  Zero-norm
    g_j are skipped.  The shuffle comes from `rng`, so identical streams give
    identical results.
    """
    g = _stack(grads)
    k = g.shape[0]
    if k == 1:
        return g[0].copy()
    gen = rng.generator()
    surgered = np.empty_like(g)
    for i in range(k):
        gi = g[i].copy()
        others = np.array([j for j in range(k) if j != i])
        for j in gen.permutation(others):
            gj = g[j]
            sq = float(gj @ gj)
            if sq <= _ZERO_NORM:
                continue
            dot = float(gi @ gj)
            if dot < 0.0:
                gi -= (dot / sq) * gj
        surgered[i] = gi
    return surgered.mean(axis=0)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, len(v) + 1)
    cond = u + (1.0 - css) / idx > 0
    rho = idx[cond][-1]
    tau = (1.0 - css[rho - 1]) / rho
    return np.maximum(v + tau, 0.0)


def cagrad_objective(w: np.ndarray, g: np.ndarray, g0: np.ndarray, c: float) -> float:
    gw = w @ g
    return float(gw @ g0 + c * np.linalg.norm(g0) * np.linalg.norm(gw))


def cagrad(grads: GradientSet, cfg: CagradConfig) -> np.ndarray:
    """Conflict-averse combination d = g0 + (c*|g0| / |g_w|) * g_w.

    g0 is the mean gradient and w minimizes F(w) = g_w.g0 + c*|g0|*|g_w| over
    the simplex, found by monotone projected gradient descent from the
    uniform point (a candidate step is only accepted if it does not increase
    F, halving the step otherwise, so F is non-increasing by construction).
    """
    g = _stack(grads)
    k = g.shape[0]
    g0 = g.mean(axis=0)
    if cfg.c == 0.0 or k == 1:
        return g0.copy()

    norm_g0 = float(np.linalg.norm(g0))
    gram = g @ g.T
    gg0 = g @ g0
    w = np.full(k, 1.0 / k)

    def objective(wv):
        gw_sq = float(wv @ gram @ wv)
        return float(wv @ gg0) + cfg.c * norm_g0 * np.sqrt(max(gw_sq, 0.0))

    fw = objective(w)
    step = cfg.step
    for _ in range(cfg.iterations):
        gw_norm = np.sqrt(max(float(w @ gram @ w), _ZERO_NORM ** 2))
        grad_w = gg0 + cfg.c * norm_g0 * (gram @ w) / gw_norm
        cand = _project_simplex(w - step * grad_w)
        fc = objective(cand)
        if fc <= fw:
            w, fw = cand, fc
        else:
            step *= 0.5

    gw = w @ g
    gw_norm = float(np.linalg.norm(gw))
    if gw_norm < _ZERO_NORM:
        return g0.copy()
    return g0 + (cfg.c * norm_g0 / gw_norm) * gw


def cagrad_solver_trace(grads: GradientSet, cfg: CagradConfig) -> list[float]:
    """Objective value after each solver iteration (diagnostics/tests)."""
    g = _stack(grads)
    k = g.shape[0]
    g0 = g.mean(axis=0)
    norm_g0 = float(np.linalg.norm(g0))
    gram = g @ g.T
    gg0 = g @ g0
    w = np.full(k, 1.0 / k)

    def objective(wv):
        gw_sq = float(wv @ gram @ wv)
        return float(wv @ gg0) + cfg.c * norm_g0 * np.sqrt(max(gw_sq, 0.0))

    fw = objective(w)
    trace = [fw]
    step = cfg.step
    for _ in range(cfg.iterations):
        gw_norm = np.sqrt(max(float(w @ gram @ w), _ZERO_NORM ** 2))
        grad_w = gg0 + cfg.c * norm_g0 * (gram @ w) / gw_norm
        cand = _project_simplex(w - step * grad_w)
        fc = objective(cand)
        if fc <= fw:
            w, fw = cand, fc
        else:
            step *= 0.5
        trace.append(fw)
    return trace
