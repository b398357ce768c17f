"""Deterministic numerical substrate for the simulator.

Provides flat parameter vectors with a named-segment layout, a decoupled
weight-decay Adam optimizer, the warmup-then-cosine learning-rate schedule,
seeded forkable random streams, and the checkpoint file format.

Everything here is float64 and bit-reproducible: identical inputs give
identical output bits, independent of thread scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1

CHECKPOINT_MAGIC = b"FMTLCKPT"
CHECKPOINT_SUFFIX = ".fmtlckpt"


class LayoutMismatch(ValueError):
    """Raised when parameter vectors with incompatible layouts are combined."""


class ShapeError(ValueError):
    """Raised when an array argument has the wrong length or shape."""


# ---------------------------------------------------------------------------
# segmented parameter vectors
# ---------------------------------------------------------------------------

class Layout:
    """Ordered, contiguous, non-overlapping named segments of a flat vector.

    Two layouts are *compatible* iff their (name, length) sequences are
    identical.  A weaker notion, *structurally compatible*, only requires the
    length sequences to match; the federation engine uses it to decide whether
    value-level aggregation across differently named segments is meaningful.
    """

    __slots__ = ("_names", "_lengths", "_offsets", "total_length")

    def __init__(self, segments: Sequence[tuple[str, int]]):
        names = tuple(str(n) for n, _ in segments)
        lengths = tuple(int(l) for _, l in segments)
        if not names:
            raise ValueError("layout needs at least one segment")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in layout: {names}")
        if any(l <= 0 for l in lengths):
            raise ValueError("segment lengths must be positive")
        offsets = []
        off = 0
        for l in lengths:
            offsets.append(off)
            off += l
        self._names = names
        self._lengths = lengths
        self._offsets = tuple(offsets)
        self.total_length = off

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def lengths(self) -> tuple[int, ...]:
        return self._lengths

    def segments(self) -> list[tuple[str, int, int]]:
        """All segments as (name, offset, length) triples."""
        return list(zip(self._names, self._offsets, self._lengths))

    def slice_of(self, name: str) -> slice:
        try:
            i = self._names.index(name)
        except ValueError:
            raise KeyError(f"no segment named {name!r} in layout {self._names}") from None
        return slice(self._offsets[i], self._offsets[i] + self._lengths[i])

    def has_segment(self, name: str) -> bool:
        return name in self._names

    def compatible(self, other: "Layout") -> bool:
        return self._names == other._names and self._lengths == other._lengths

    def structurally_compatible(self, other: "Layout") -> bool:
        return self._lengths == other._lengths

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.compatible(other)

    def __hash__(self) -> int:
        return hash((self._names, self._lengths))

    def __repr__(self) -> str:
        parts = ", ".join(f"{n}:{l}" for n, l in zip(self._names, self._lengths))
        return f"Layout({parts})"

    def to_json(self) -> list[dict]:
        return [
            {"name": n, "offset": o, "length": l}
            for n, o, l in self.segments()
        ]

    @classmethod
    def from_json(cls, data: Iterable[dict]) -> "Layout":
        return cls([(d["name"], d["length"]) for d in data])


@dataclass
class SegmentedParams:
    """A float64 parameter vector plus its segment layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("parameter values must be a 1-d array")
        if self.values.shape[0] != self.layout.total_length:
            raise ShapeError(
                f"value length {self.values.shape[0]} does not match layout "
                f"total {self.layout.total_length}"
            )

    def segment(self, name: str) -> np.ndarray:
        """View (not copy) of a named segment."""
        return self.values[self.layout.slice_of(name)]

    def copy(self) -> "SegmentedParams":
        return SegmentedParams(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "SegmentedParams":
        return SegmentedParams(np.asarray(values, dtype=np.float64).copy(), self.layout)

    def __len__(self) -> int:
        return self.layout.total_length


def anchored_weighted_sum(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Sum w_k * a_k accumulated as (sum w) * a_0 + sum w_k (a_k - a_0).

    The anchored form makes the convex combination of identical vectors
    reproduce the input bit-exactly whenever the float sum of the weights is
    exactly 1.0, which the federation engine relies on for fixed-point checks.
    Accumulation runs in list order, so callers fix the order (ascending
    client id) for determinism.
    """
    if len(arrays) != len(weights):
        raise ShapeError("need one weight per array")
    if not arrays:
        raise ShapeError("need at least one array")
    base = np.asarray(arrays[0], dtype=np.float64)
    total_w = float(np.sum(np.asarray(weights, dtype=np.float64)))
    out = total_w * base
    for arr, w in zip(arrays, weights):
        a = np.asarray(arr, dtype=np.float64)
        if a.shape != base.shape:
            raise ShapeError(f"array shape {a.shape} does not match {base.shape}")
        out += float(w) * (a - base)
    return out


def weighted_sum(params_list: Sequence[SegmentedParams], weights: Sequence[float]) -> SegmentedParams:
    """Elementwise sum w_k * theta_k over layout-compatible parameter vectors.

    Raises LayoutMismatch when any layout differs from the first; the
    federation engine turns that error into a NULL-baseline outcome.
    """
    if not params_list:
        raise ShapeError("empty parameter list")
    if len(params_list) != len(weights):
        raise ShapeError("need one weight per parameter vector")
    ref = params_list[0].layout
    for p in params_list[1:]:
        if not ref.compatible(p.layout):
            raise LayoutMismatch(
                f"cannot combine layouts {ref!r} and {p.layout!r}"
            )
    values = anchored_weighted_sum([p.values for p in params_list], weights)
    return SegmentedParams(values, ref)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Moment estimates and hyperparameters for one parameter vector."""

    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def init(cls, n_params: int, beta1: float = 0.9, beta2: float = 0.999,
             epsilon: float = 1e-8, weight_decay: float = 1e-4) -> "AdamWState":
        return cls(
            step_count=0,
            first_moment=np.zeros(n_params, dtype=np.float64),
            second_moment=np.zeros(n_params, dtype=np.float64),
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            weight_decay=weight_decay,
        )


def adamw_step(params: SegmentedParams, grads: np.ndarray, state: AdamWState,
               lr: float, update_mask: np.ndarray | None = None) -> SegmentedParams:
    """One decoupled-weight-decay Adam step; mutates `state`, returns new params.

    The decay theta <- theta - lr*wd*theta is applied before the moment
    update, then the bias-corrected Adam direction.  When `update_mask` is
    given, coordinates where it is False keep their parameter value and
    moments untouched (used to freeze whole segments).
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise ShapeError(
            f"gradient length {grads.shape} does not match params {params.values.shape}"
        )
    if lr < 0:
        raise ValueError("lr must be >= 0")

    theta = params.values
    new_theta = theta * (1.0 - lr * state.weight_decay)

    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_theta = new_theta - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)

    if update_mask is not None:
        mask = np.asarray(update_mask, dtype=bool)
        if mask.shape != theta.shape:
            raise ShapeError("update mask length must match parameter length")
        new_theta = np.where(mask, new_theta, theta)
        m = np.where(mask, m, state.first_moment)
        v = np.where(mask, v, state.second_moment)

    state.first_moment = m
    state.second_moment = v
    state.step_count = t
    return params.with_values(new_theta)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def cosine_warmup_lr(round_idx: int, total_rounds: int, base_lr: float,
                     warmup_rounds: int) -> float:
    """Linear warmup to base_lr over `warmup_rounds`, then cosine decay to ~0.

    round_idx is 0-based.  During warmup the rate is base_lr*(r+1)/warmup, so
    the ramp reaches base_lr on the last warmup round and the cosine phase
    starts there as well (the schedule is continuous at the boundary).
    """
    if total_rounds <= 0:
        raise ValueError("total_rounds must be positive")
    if not 0 <= round_idx < total_rounds:
        raise ValueError(f"round {round_idx} outside [0, {total_rounds})")
    if not 0 <= warmup_rounds < total_rounds:
        raise ValueError("warmup_rounds must satisfy 0 <= warmup < total_rounds")
    if warmup_rounds > 0 and round_idx < warmup_rounds:
        return base_lr * (round_idx + 1) / warmup_rounds
    span = total_rounds - warmup_rounds
    phase = math.pi * (round_idx - warmup_rounds) / span
    return base_lr * 0.5 * (1.0 + math.cos(phase))


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _digest64(*parts) -> int:
    """Stable 64-bit digest of a tag tuple (order-sensitive)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """A named, forkable random stream backed by a counter-based generator.

    The stream is fully determined by (seed, stream_id).  Streams are
    schedule independent: a client's stream produces the same draws no matter
    what other streams are consumed around it.  The generator algorithm is
    pinned to Philox4x64 so that golden files stay stable.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of the stream."""
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def fork(self, *tags) -> "RngStream":
        """Derive an independent child stream from hashable tags."""
        return RngStream(self.seed, _digest64(self.stream_id, *tags))


def derive_stream(seed: int, *tags) -> RngStream:
    """Stream for (experiment seed, purpose tags), e.g. (seed, client_id, "shuffle")."""
    return RngStream(seed, _digest64(*tags) if tags else 0)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: SegmentedParams) -> None:
    """Write magic + JSON layout header + little-endian float64 values."""
    header = json.dumps({"layout": params.layout.to_json()}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> SegmentedParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        layout = Layout.from_json(header["layout"])
        raw = fh.read(8 * layout.total_length)
        if len(raw) != 8 * layout.total_length:
            raise ValueError(f"{path}: truncated checkpoint")
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return SegmentedParams(values, layout)
