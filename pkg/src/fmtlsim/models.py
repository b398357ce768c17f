"""Desk-scale multi-task architectures with analytic gradients.

Two architectures over a shared two-layer ReLU encoder (16 -> 64 -> 32):

* MD: one decoder per task (32 -> 32 -> 8).  All decoders share a fixed
  8-wide output head regardless of task; a task reads its first
  `output_dim` columns.  Uniform decoder shapes keep single-task models
  structurally alignable across clients, which the federation engine needs
  when it averages value vectors of clients holding different tasks.
* TC: one shared decoder conditioned on the task.  Conditioning is an
  8-d learned task embedding concatenated onto the encoder output
  ((32+8) -> 32 -> 16), followed by a small per-task readout
  (16 -> output_dim).  Embedding plus readout form the task-specific
  "taskcond" segment; encoder and shared decoder are task agnostic.

The backward pass is a fixed-topology hand-written backprop over the flat
segmented vector; no autodiff.  Losses: L1 (depth), weighted BCE on logits
with 0.8/0.2 positive/negative weights (edge), 1 - cosine on normalized
3-vectors (normals), softmax cross-entropy (class tasks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import Layout, RngStream, SegmentedParams, ShapeError
from .synthdata import TASK_KINDS, DataSplit, sort_tasks

Batch = DataSplit

ENCODER_DIMS = (16, 64, 32)
MD_HEAD_WIDTH = 8  # uniform decoder output width; tasks read the leading columns
MD_DECODER_DIMS = (32, 32, MD_HEAD_WIDTH)
TC_EMBED_DIM = 8
TC_DECODER_DIMS = (32 + TC_EMBED_DIM, 32, 16)

EDGE_POS_WEIGHT = 0.8
EDGE_NEG_WEIGHT = 0.2


class TaskMismatch(ValueError):
    """Raised when a batch carries a task the parameter layout lacks."""


@dataclass(frozen=True)
class ModelArch:
    kind: str  # "MD" or "TC"

    def __post_init__(self):
        if self.kind not in ("MD", "TC"):
            raise ValueError(f"unknown architecture {self.kind!r}")


def _linear_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


ENCODER_LEN = _linear_count(*ENCODER_DIMS[:2]) + _linear_count(*ENCODER_DIMS[1:])
MD_DECODER_LEN = _linear_count(*MD_DECODER_DIMS[:2]) + _linear_count(*MD_DECODER_DIMS[1:])
TC_DECODER_LEN = _linear_count(*TC_DECODER_DIMS[:2]) + _linear_count(*TC_DECODER_DIMS[1:])


def taskcond_len(task: str) -> int:
    out = TASK_KINDS[task].output_dim
    return TC_EMBED_DIM + _linear_count(TC_DECODER_DIMS[2], out)


def layout_for(arch: ModelArch, tasks) -> Layout:
    tasks = sort_tasks(tasks)
    if arch.kind == "MD":
        segs = [("encoder", ENCODER_LEN)]
        segs += [(f"decoder:{t}", MD_DECODER_LEN) for t in tasks]
    else:
        segs = [("encoder", ENCODER_LEN), ("decoder:shared", TC_DECODER_LEN)]
        segs += [(f"taskcond:{t}", taskcond_len(t)) for t in tasks]
    return Layout(segs)


def tasks_of_layout(layout: Layout) -> tuple[str, ...]:
    tasks = []
    for name in layout.names:
        if name.startswith("decoder:") and name != "decoder:shared":
            tasks.append(name.split(":", 1)[1])
        elif name.startswith("taskcond:"):
            tasks.append(name.split(":", 1)[1])
    return tuple(tasks)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _init_linear(gen: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    w = gen.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
    return np.concatenate([w.ravel(), np.zeros(d_out)])


def init_params(arch: ModelArch, tasks, rng: RngStream) -> SegmentedParams:
    """Fan-in-scaled normal init, drawn per segment name.

    Because each segment draws from its own named substream, two clients
    initialized from the same base stream get bit-identical values on every
    segment they share, whatever other segments each of them carries.
    """
    tasks = sort_tasks(tasks)
    if not tasks:
        raise ValueError("task set must be non-empty")
    layout = layout_for(arch, tasks)
    values = np.zeros(layout.total_length)
    for name in layout.names:
        gen = rng.fork("init", name).generator()
        if name == "encoder":
            seg = np.concatenate([
                _init_linear(gen, *ENCODER_DIMS[:2]),
                _init_linear(gen, *ENCODER_DIMS[1:]),
            ])
        elif name == "decoder:shared":
            seg = np.concatenate([
                _init_linear(gen, *TC_DECODER_DIMS[:2]),
                _init_linear(gen, *TC_DECODER_DIMS[1:]),
            ])
        elif name.startswith("decoder:"):
            seg = np.concatenate([
                _init_linear(gen, *MD_DECODER_DIMS[:2]),
                _init_linear(gen, *MD_DECODER_DIMS[1:]),
            ])
        else:  # taskcond
            task = name.split(":", 1)[1]
            out = TASK_KINDS[task].output_dim
            embed = gen.standard_normal(TC_EMBED_DIM) * np.sqrt(1.0 / TC_EMBED_DIM)
            seg = np.concatenate([embed, _init_linear(gen, TC_DECODER_DIMS[2], out)])
        values[layout.slice_of(name)] = seg
    return SegmentedParams(values, layout)


def _unpack_linear(seg: np.ndarray, off: int, d_in: int, d_out: int):
    w = seg[off:off + d_in * d_out].reshape(d_in, d_out)
    b = seg[off + d_in * d_out:off + d_in * d_out + d_out]
    return w, b, off + _linear_count(d_in, d_out)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def loss_and_grad(kind_name: str, pred: np.ndarray, label: np.ndarray):
    """Scalar training loss and its gradient w.r.t. the prediction."""
    kind = TASK_KINDS[kind_name]
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != kind.output_dim:
        raise ShapeError(f"{kind_name}: prediction shape {pred.shape} "
                         f"!= (n, {kind.output_dim})")
    n = pred.shape[0]

    if kind_name == "depth_like":
        label = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        diff = pred - label
        loss = float(np.mean(np.abs(diff)))
        grad = np.sign(diff) / diff.size
        return loss, grad

    if kind_name == "edge_like":
        y = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        z = pred
        loss = float(np.mean(EDGE_POS_WEIGHT * y * _softplus(-z)
                             + EDGE_NEG_WEIGHT * (1.0 - y) * _softplus(z)))
        sig = 1.0 / (1.0 + np.exp(-z))
        grad = (EDGE_POS_WEIGHT * y * (sig - 1.0)
                + EDGE_NEG_WEIGHT * (1.0 - y) * sig) / z.size
        return loss, grad

    if kind_name == "normals_like":
        y = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        norms = np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-12)
        unit = pred / norms
        cos = np.sum(unit * y, axis=1, keepdims=True)
        loss = float(np.mean(1.0 - cos))
        grad = -(y - cos * unit) / norms / n
        return loss, grad

    # class tasks: softmax cross-entropy on logits
    y = np.asarray(label).reshape(n).astype(np.int64)
    if np.any(y < 0) or np.any(y >= kind.output_dim):
        raise ShapeError(f"{kind_name}: class labels outside [0, {kind.output_dim})")
    zmax = np.max(pred, axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(pred - zmax), axis=1))
    loss = float(np.mean(lse - pred[np.arange(n), y]))
    softmax = np.exp(pred - lse[:, None])
    grad = softmax.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def task_loss(kind_name: str, pred: np.ndarray, label: np.ndarray) -> float:
    return loss_and_grad(kind_name, pred, label)[0]


def _loss_scales(batch_tasks, task_weights):
    """Per-task multipliers q_t / sum(q) for the combined objective."""
    if task_weights is None:
        q = {t: 1.0 for t in batch_tasks}
    else:
        q = {t: float(task_weights[t]) for t in batch_tasks}
    if any(v < 0 for v in q.values()):
        raise ValueError("task weights must be non-negative")
    total = sum(q.values())
    if total <= 0:
        raise ValueError("task weights must not all be zero")
    return q, {t: q[t] / total for t in batch_tasks}


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _encoder_forward(params: SegmentedParams, x: np.ndarray):
    seg = params.segment("encoder")
    w1, b1, off = _unpack_linear(seg, 0, *ENCODER_DIMS[:2])
    w2, b2, _ = _unpack_linear(seg, off, *ENCODER_DIMS[1:])
    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2 + b2
    a2 = np.maximum(z2, 0.0)
    return (w1, w2), (z1, a1, z2, a2)


def _encoder_backward(params, grad, x, cache, weights, d_a2):
    (w1, w2), (z1, a1, z2, _) = weights, cache
    dz2 = d_a2 * (z2 > 0)
    da1 = dz2 @ w2.T
    dz1 = da1 * (z1 > 0)
    gseg = grad[params.layout.slice_of("encoder")]
    off = 0
    n1 = ENCODER_DIMS[0] * ENCODER_DIMS[1]
    gseg[off:off + n1] = (x.T @ dz1).ravel()
    off += n1
    gseg[off:off + ENCODER_DIMS[1]] = dz1.sum(axis=0)
    off += ENCODER_DIMS[1]
    n2 = ENCODER_DIMS[1] * ENCODER_DIMS[2]
    gseg[off:off + n2] = (a1.T @ dz2).ravel()
    off += n2
    gseg[off:off + ENCODER_DIMS[2]] = dz2.sum(axis=0)


def _check_batch_tasks(layout: Layout, batch: Batch, prefix: str):
    for t in batch.labels:
        if not layout.has_segment(f"{prefix}{t}"):
            raise TaskMismatch(f"batch task {t!r} absent from layout {layout.names}")


def forward_backward_md(params: SegmentedParams, batch: Batch,
                        task_weights: dict | None = None):
    """One shared encoder pass, every decoder's loss, full-vector gradient.

    Returns (per-task losses, combined loss, gradient array).  The gradient
    covers the whole parameter vector; decoders of tasks missing from the
    batch get zeros.
    """
    _check_batch_tasks(params.layout, batch, "decoder:")
    batch_tasks = sort_tasks(batch.labels.keys())
    _, scales = _loss_scales(batch_tasks, task_weights)

    x = np.asarray(batch.x, dtype=np.float64)
    enc_w, enc_cache = _encoder_forward(params, x)
    a2 = enc_cache[3]

    grad = np.zeros(params.layout.total_length)
    d_a2 = np.zeros_like(a2)
    losses: dict[str, float] = {}
    for t in batch_tasks:
        seg = params.segment(f"decoder:{t}")
        d1w, d1b, off = _unpack_linear(seg, 0, *MD_DECODER_DIMS[:2])
        d2w, d2b, _ = _unpack_linear(seg, off, *MD_DECODER_DIMS[1:])
        u1 = a2 @ d1w + d1b
        h1 = np.maximum(u1, 0.0)
        out = h1 @ d2w + d2b
        dim = TASK_KINDS[t].output_dim
        loss, dpred = loss_and_grad(t, out[:, :dim], batch.labels[t])
        losses[t] = loss

        dout = np.zeros_like(out)
        dout[:, :dim] = scales[t] * dpred
        dh1 = dout @ d2w.T
        du1 = dh1 * (u1 > 0)
        gseg = grad[params.layout.slice_of(f"decoder:{t}")]
        n1 = MD_DECODER_DIMS[0] * MD_DECODER_DIMS[1]
        gseg[:n1] = (a2.T @ du1).ravel()
        gseg[n1:n1 + MD_DECODER_DIMS[1]] = du1.sum(axis=0)
        o2 = n1 + MD_DECODER_DIMS[1]
        n2 = MD_DECODER_DIMS[1] * MD_DECODER_DIMS[2]
        gseg[o2:o2 + n2] = (h1.T @ dout).ravel()
        gseg[o2 + n2:] = dout.sum(axis=0)
        d_a2 += du1 @ d1w.T

    _encoder_backward(params, grad, x, enc_cache, enc_w, d_a2)
    combined = sum(scales[t] * losses[t] for t in batch_tasks)
    return losses, float(combined), grad


def forward_backward_tc(params: SegmentedParams, batch: Batch,
                        task_weights: dict | None = None):
    """Sequential per-task passes through the shared conditioned decoder."""
    _check_batch_tasks(params.layout, batch, "taskcond:")
    batch_tasks = sort_tasks(batch.labels.keys())
    _, scales = _loss_scales(batch_tasks, task_weights)

    x = np.asarray(batch.x, dtype=np.float64)
    enc_w, enc_cache = _encoder_forward(params, x)
    a2 = enc_cache[3]
    n = x.shape[0]

    dec = params.segment("decoder:shared")
    v1, c1, off = _unpack_linear(dec, 0, *TC_DECODER_DIMS[:2])
    v2, c2, _ = _unpack_linear(dec, off, *TC_DECODER_DIMS[1:])

    grad = np.zeros(params.layout.total_length)
    gdec = grad[params.layout.slice_of("decoder:shared")]
    nv1 = TC_DECODER_DIMS[0] * TC_DECODER_DIMS[1]
    ov2 = nv1 + TC_DECODER_DIMS[1]
    nv2 = TC_DECODER_DIMS[1] * TC_DECODER_DIMS[2]

    d_a2 = np.zeros_like(a2)
    losses: dict[str, float] = {}
    for t in batch_tasks:
        dim = TASK_KINDS[t].output_dim
        cond = params.segment(f"taskcond:{t}")
        embed = cond[:TC_EMBED_DIM]
        rw, rb, _ = _unpack_linear(cond, TC_EMBED_DIM, TC_DECODER_DIMS[2], dim)

        inp = np.concatenate([a2, np.tile(embed, (n, 1))], axis=1)
        u1 = inp @ v1 + c1
        h1 = np.maximum(u1, 0.0)
        u2 = h1 @ v2 + c2
        h2 = np.maximum(u2, 0.0)
        out = h2 @ rw + rb
        loss, dpred = loss_and_grad(t, out, batch.labels[t])
        losses[t] = loss

        dout = scales[t] * dpred
        dh2 = dout @ rw.T
        du2 = dh2 * (u2 > 0)
        dh1 = du2 @ v2.T
        du1 = dh1 * (u1 > 0)
        dinp = du1 @ v1.T

        gcond = grad[params.layout.slice_of(f"taskcond:{t}")]
        gcond[:TC_EMBED_DIM] = dinp[:, ENCODER_DIMS[2]:].sum(axis=0)
        nr = TC_DECODER_DIMS[2] * dim
        gcond[TC_EMBED_DIM:TC_EMBED_DIM + nr] = (h2.T @ dout).ravel()
        gcond[TC_EMBED_DIM + nr:] = dout.sum(axis=0)

        gdec[:nv1] += (inp.T @ du1).ravel()
        gdec[nv1:ov2] += du1.sum(axis=0)
        gdec[ov2:ov2 + nv2] += (h1.T @ du2).ravel()
        gdec[ov2 + nv2:] += du2.sum(axis=0)
        d_a2 += dinp[:, :ENCODER_DIMS[2]]

    _encoder_backward(params, grad, x, enc_cache, enc_w, d_a2)
    combined = sum(scales[t] * losses[t] for t in batch_tasks)
    return losses, float(combined), grad


def forward_backward(arch: ModelArch):
    return forward_backward_md if arch.kind == "MD" else forward_backward_tc


def predict(params: SegmentedParams, arch: ModelArch, x: np.ndarray, tasks):
    """Forward-only predictions, one (n, output_dim) array per task."""
    x = np.asarray(x, dtype=np.float64)
    _, enc_cache = _encoder_forward(params, x)
    a2 = enc_cache[3]
    preds: dict[str, np.ndarray] = {}
    if arch.kind == "MD":
        for t in sort_tasks(tasks):
            if not params.layout.has_segment(f"decoder:{t}"):
                raise TaskMismatch(f"layout lacks decoder for {t!r}")
            seg = params.segment(f"decoder:{t}")
            d1w, d1b, off = _unpack_linear(seg, 0, *MD_DECODER_DIMS[:2])
            d2w, d2b, _ = _unpack_linear(seg, off, *MD_DECODER_DIMS[1:])
            h1 = np.maximum(a2 @ d1w + d1b, 0.0)
            preds[t] = (h1 @ d2w + d2b)[:, :TASK_KINDS[t].output_dim]
    else:
        dec = params.segment("decoder:shared")
        v1, c1, off = _unpack_linear(dec, 0, *TC_DECODER_DIMS[:2])
        v2, c2, _ = _unpack_linear(dec, off, *TC_DECODER_DIMS[1:])
        n = x.shape[0]
        for t in sort_tasks(tasks):
            if not params.layout.has_segment(f"taskcond:{t}"):
                raise TaskMismatch(f"layout lacks task conditioning for {t!r}")
            cond = params.segment(f"taskcond:{t}")
            embed = cond[:TC_EMBED_DIM]
            rw, rb, _ = _unpack_linear(cond, TC_EMBED_DIM, TC_DECODER_DIMS[2],
                                       TASK_KINDS[t].output_dim)
            inp = np.concatenate([a2, np.tile(embed, (n, 1))], axis=1)
            h1 = np.maximum(inp @ v1 + c1, 0.0)
            h2 = np.maximum(h1 @ v2 + c2, 0.0)
            preds[t] = h2 @ rw + rb
    return preds


def param_report(arch: ModelArch, tasks) -> dict:
    """Exact per-segment parameter counts and the encoder fraction."""
    layout = layout_for(arch, tasks)
    segments = {name: length for name, length in zip(layout.names, layout.lengths)}
    total = layout.total_length
    return {
        "segments": segments,
        "total": total,
        "encoder_fraction": segments["encoder"] / total,
    }
