"""Synthetic two-domain multi-task data and the seven partitioning scenarios.

Two "worlds" (domains A and B) map 16-d inputs through a fixed random
two-layer network to a 32-d latent, from which five task labelers read:
a scalar regression (depth-like), a thresholded binary map (edge-like),
a unit 3-vector (normals-like), and two multi-class labelers (semseg-like
with 8 classes, parts-like with 6).  Domain B uses distinct world weights
and a mean-shifted input distribution, standing in for a second data silo.

Scenario IDs follow the benchmark family: IID-1 (equal multi-task clients),
NIID-2 (one task per client), NIID-3 (both merged), NIID-4/5 (unbalanced
sample counts), NIID-6/7 (cross-domain clients added).  Generation is a pure
function of (spec, seed); regenerating yields bit-identical arrays.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numkernel import RngStream, derive_stream

INPUT_DIM = 16
HIDDEN_DIM = 32

# label-noise defaults: regression noise is 0.1 of the clean-label std,
# classification labels flip with 2% probability, edge maps are ~20% positive
REGRESSION_NOISE = 0.1
LABEL_FLIP_RATE = 0.02
EDGE_POSITIVE_RATE = 0.2

CALIBRATION_SAMPLES = 8192


@dataclass(frozen=True)
class TaskKind:
    """A task family: output head size, evaluation metric, metric direction."""

    name: str
    output_dim: int
    metric: str
    lower_is_better: bool


TASK_KINDS: dict[str, TaskKind] = {
    "depth_like": TaskKind("depth_like", 1, "rmse", True),
    "edge_like": TaskKind("edge_like", 1, "weighted_bce_loss", True),
    "normals_like": TaskKind("normals_like", 3, "mean_angular_error_deg", True),
    "semseg_like": TaskKind("semseg_like", 8, "macro_accuracy", False),
    "parts_like": TaskKind("parts_like", 6, "macro_accuracy", False),
}

# canonical ordering used for segment layouts and reporting
TASK_ORDER = ("depth_like", "edge_like", "normals_like", "semseg_like", "parts_like")

DOMAIN_TASKS = {
    "A": ("depth_like", "edge_like", "normals_like", "semseg_like"),
    "B": ("normals_like", "parts_like"),
}

# domain pool defaults: (train pool, withheld global test pool); B is the
# larger silo, mirroring the usual big-vs-small dataset pairing in ratio only
DOMAIN_POOL_DEFAULTS = {"A": (2000, 800), "B": (4000, 1000)}
DOMAIN_INPUT_SHIFT = {"A": 0.0, "B": 1.5}

SCENARIO_IDS = ("IID-1", "NIID-2", "NIID-3", "NIID-4", "NIID-5", "NIID-6", "NIID-7")


def sort_tasks(tasks) -> tuple[str, ...]:
    """Canonical task ordering (layouts and reports depend on it)."""
    order = {name: i for i, name in enumerate(TASK_ORDER)}
    unknown = [t for t in tasks if t not in order]
    if unknown:
        raise ValueError(f"unknown task kinds: {unknown}")
    return tuple(sorted(set(tasks), key=order.__getitem__))


def canonicalize_scenario(scenario_id: str) -> str:
    key = scenario_id.strip().upper().replace("_", "-")
    if not key.startswith(("IID", "NIID")):
        raise ValueError(f"unknown scenario {scenario_id!r}")
    if "-" not in key:
        key = key.replace("IID", "IID-", 1) if key.startswith("IID") else key
        key = key.replace("NIID", "NIID-", 1) if key.startswith("NIID") and "-" not in key else key
    if key not in SCENARIO_IDS:
        raise ValueError(f"unknown scenario {scenario_id!r} (expected one of {SCENARIO_IDS})")
    return key


# ---------------------------------------------------------------------------
# world model
# ---------------------------------------------------------------------------

@dataclass
class WorldModel:
    """Fixed random labeling functions for one domain; see module docstring."""

    domain: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    heads: dict[str, tuple[np.ndarray, np.ndarray]]
    edge_threshold: float = 0.0
    noise_scales: dict[str, float] = field(default_factory=dict)
    class_norms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def hidden(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(x @ self.w1 + self.b1)
        return np.tanh(h @ self.w2 + self.b2)

    def clean_scores(self, task: str, h: np.ndarray) -> np.ndarray:
        w, b = self.heads[task]
        return h @ w + b

    def generate(self, count: int, stream: RngStream) -> "DataSplit":
        """Draw `count` labeled samples for every task of this domain."""
        gen = stream.generator()
        x = gen.standard_normal((count, INPUT_DIM)) + DOMAIN_INPUT_SHIFT[self.domain]
        h = self.hidden(x)
        labels: dict[str, np.ndarray] = {}
        for task in DOMAIN_TASKS[self.domain]:
            kind = TASK_KINDS[task]
            scores = self.clean_scores(task, h)
            if task == "depth_like":
                noise = gen.standard_normal((count, 1)) * self.noise_scales[task]
                labels[task] = scores + noise
            elif task == "edge_like":
                base = (scores[:, 0] > self.edge_threshold).astype(np.float64)
                flip = gen.random(count) < LABEL_FLIP_RATE
                labels[task] = np.where(flip, 1.0 - base, base)[:, None]
            elif task == "normals_like":
                noisy = scores + gen.standard_normal((count, 3)) * self.noise_scales[task]
                norms = np.maximum(np.linalg.norm(noisy, axis=1, keepdims=True), 1e-12)
                labels[task] = noisy / norms
            else:  # class labelers
                mean, std = self.class_norms[task]
                z = (scores - mean) / std
                lab = np.argmax(z, axis=1).astype(np.int64)
                flip = gen.random(count) < LABEL_FLIP_RATE
                shift = gen.integers(1, kind.output_dim, size=count)
                lab = np.where(flip, (lab + shift) % kind.output_dim, lab)
                labels[task] = lab
        return DataSplit(x=x, labels=labels)


def build_world(seed: int, domain: str) -> WorldModel:
    """Deterministic world for (seed, domain); B gets its own weight draw."""
    if domain not in DOMAIN_TASKS:
        raise ValueError(f"unknown domain {domain!r}")
    gen = derive_stream(seed, "world", domain).generator()
    w1 = gen.standard_normal((INPUT_DIM, HIDDEN_DIM)) / np.sqrt(INPUT_DIM)
    b1 = gen.standard_normal(HIDDEN_DIM) * 0.1
    w2 = gen.standard_normal((HIDDEN_DIM, HIDDEN_DIM)) / np.sqrt(HIDDEN_DIM)
    b2 = gen.standard_normal(HIDDEN_DIM) * 0.1
    heads = {}
    for task in DOMAIN_TASKS[domain]:
        kind = TASK_KINDS[task]
        w = gen.standard_normal((HIDDEN_DIM, kind.output_dim)) / np.sqrt(HIDDEN_DIM)
        b = gen.standard_normal(kind.output_dim) * 0.1
        heads[task] = (w, b)
    world = WorldModel(domain=domain, w1=w1, b1=b1, w2=w2, b2=b2, heads=heads)

    # calibrate noise scales, the edge threshold, and class standardization
    # on a probe sample so generated labels hit the target statistics
    probe_gen = derive_stream(seed, "world", domain, "calibration").generator()
    xp = probe_gen.standard_normal((CALIBRATION_SAMPLES, INPUT_DIM)) + DOMAIN_INPUT_SHIFT[domain]
    hp = world.hidden(xp)
    for task in DOMAIN_TASKS[domain]:
        scores = world.clean_scores(task, hp)
        if task == "depth_like":
            world.noise_scales[task] = REGRESSION_NOISE * float(np.std(scores))
        elif task == "edge_like":
            world.edge_threshold = float(np.quantile(scores[:, 0], 1.0 - EDGE_POSITIVE_RATE))
        elif task == "normals_like":
            world.noise_scales[task] = REGRESSION_NOISE * float(np.mean(np.std(scores, axis=0)))
        else:
            mean = np.mean(scores, axis=0)
            std = np.maximum(np.std(scores, axis=0), 1e-9)
            world.class_norms[task] = (mean, std)
    return world


# ---------------------------------------------------------------------------
# datasets and scenarios
# ---------------------------------------------------------------------------

@dataclass
class DataSplit:
    """Inputs plus per-task labels (only tasks the holder owns)."""

    x: np.ndarray
    labels: dict[str, np.ndarray]

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "DataSplit":
        return DataSplit(self.x[idx], {t: v[idx] for t, v in self.labels.items()})

    def restrict(self, tasks) -> "DataSplit":
        return DataSplit(self.x, {t: self.labels[t] for t in tasks})


@dataclass(frozen=True)
class ClientSpec:
    """One client's slot in a scenario; train_count is its share of the
    domain train pool before the local 9:1 train/test split."""

    client_id: int
    domain: str
    tasks: tuple[str, ...]
    train_count: int

    def __post_init__(self):
        if self.train_count <= 0:
            raise ValueError("train_count must be positive")
        if not self.tasks:
            raise ValueError("client task set must be non-empty")


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    seed: int
    clients: tuple[ClientSpec, ...]
    global_test_count: dict = field(default_factory=dict)
    unbalance_ratio: float = 2.0


@dataclass
class ClientDataset:
    train: DataSplit
    local_test: DataSplit
    spec: ClientSpec


@dataclass
class ScenarioData:
    spec: ScenarioSpec
    clients: list[ClientDataset]
    global_test: dict[str, DataSplit]


def largest_remainder_shares(total: int, weights) -> list[int]:
    """Integer shares proportional to weights, summing exactly to total."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("share weights must be positive")
    quotas = total * w / w.sum()
    shares = np.floor(quotas).astype(int)
    remainder = total - int(shares.sum())
    # hand leftover units to the largest fractional parts, lowest index first
    order = np.lexsort((np.arange(len(w)), -(quotas - shares)))
    for i in order[:remainder]:
        shares[i] += 1
    return [int(s) for s in shares]


def scenario_spec(scenario_id: str, seed: int, *,
                  train_a: int = DOMAIN_POOL_DEFAULTS["A"][0],
                  test_a: int = DOMAIN_POOL_DEFAULTS["A"][1],
                  train_b: int = DOMAIN_POOL_DEFAULTS["B"][0],
                  test_b: int = DOMAIN_POOL_DEFAULTS["B"][1],
                  unbalance_ratio: float = 2.0,
                  client_count: int | None = None) -> ScenarioSpec:
    """Instantiate the declarative client table for one scenario."""
    sid = canonicalize_scenario(scenario_id)
    a_tasks = DOMAIN_TASKS["A"]

    if client_count is not None and sid != "IID-1":
        raise ValueError("client_count override is only defined for IID-1")

    def equal(total, k):
        return largest_remainder_shares(total, [1.0] * k)

    def geometric(total, k, ratio):
        return largest_remainder_shares(total, [ratio ** (k - 1 - i) for i in range(k)])

    clients: list[ClientSpec] = []
    test_counts = {"A": test_a}
    if sid == "IID-1":
        k = client_count or 4
        if k < 2:
            raise ValueError("IID-1 needs at least 2 clients")
        for i, n in enumerate(equal(train_a, k)):
            clients.append(ClientSpec(i, "A", a_tasks, n))
    elif sid == "NIID-2":
        for i, n in enumerate(equal(train_a, 4)):
            clients.append(ClientSpec(i, "A", (a_tasks[i],), n))
    elif sid == "NIID-3":
        shares = equal(train_a, 8)
        for i in range(4):
            clients.append(ClientSpec(i, "A", a_tasks, shares[i]))
        for i in range(4):
            clients.append(ClientSpec(4 + i, "A", (a_tasks[i],), shares[4 + i]))
    elif sid == "NIID-4":
        for i, n in enumerate(geometric(train_a, 4, unbalance_ratio)):
            clients.append(ClientSpec(i, "A", a_tasks, n))
    elif sid == "NIID-5":
        for i, n in enumerate(geometric(train_a, 4, unbalance_ratio)):
            clients.append(ClientSpec(i, "A", (a_tasks[i],), n))
    elif sid == "NIID-6":
        for i, n in enumerate(equal(train_a, 4)):
            clients.append(ClientSpec(i, "A", a_tasks, n))
        clients.append(ClientSpec(4, "B", sort_tasks(DOMAIN_TASKS["B"]), train_b))
        test_counts["B"] = test_b
    elif sid == "NIID-7":
        for i, n in enumerate(equal(train_a, 4)):
            clients.append(ClientSpec(i, "A", (a_tasks[i],), n))
        b_shares = equal(train_b, 2)
        clients.append(ClientSpec(4, "B", ("parts_like",), b_shares[0]))
        clients.append(ClientSpec(5, "B", ("normals_like",), b_shares[1]))
        test_counts["B"] = test_b
    return ScenarioSpec(sid, seed, tuple(clients), test_counts, unbalance_ratio)


def make_scenario(spec: ScenarioSpec) -> ScenarioData:
    """Materialize client datasets and withheld global test pools.

    Each domain draws one contiguous pool; clients take disjoint index
    ranges of it in client-id order and the global test pool sits after all
    client shares, so disjointness holds by construction.
    """
    by_domain: dict[str, list[ClientSpec]] = {}
    for c in spec.clients:
        by_domain.setdefault(c.domain, []).append(c)

    pools: dict[str, DataSplit] = {}
    offsets: dict[str, int] = {}
    global_test: dict[str, DataSplit] = {}
    for domain, specs in by_domain.items():
        world = build_world(spec.seed, domain)
        train_total = sum(c.train_count for c in specs)
        test_count = spec.global_test_count.get(domain, DOMAIN_POOL_DEFAULTS[domain][1])
        pool = world.generate(train_total + test_count, derive_stream(spec.seed, "data", domain))
        pools[domain] = pool
        offsets[domain] = 0
        global_test[domain] = pool.take(slice(train_total, train_total + test_count))

    clients: list[ClientDataset] = []
    for c in sorted(spec.clients, key=lambda c: c.client_id):
        pool = pools[c.domain]
        start = offsets[c.domain]
        share = pool.take(slice(start, start + c.train_count)).restrict(c.tasks)
        offsets[c.domain] = start + c.train_count
        n_test = min(max(int(round(c.train_count / 10)), 1), c.train_count - 1)
        n_train = c.train_count - n_test
        clients.append(ClientDataset(
            train=share.take(slice(0, n_train)),
            local_test=share.take(slice(n_train, c.train_count)),
            spec=c,
        ))
    return ScenarioData(spec, clients, global_test)


def pretrain_pool(seed: int, domain: str = "A", count: int = 2000) -> ClientDataset:
    """Pooled warm-start dataset, drawn from a stream disjoint from all
    scenario data streams (different purpose tag)."""
    world = build_world(seed, domain)
    pool = world.generate(count, derive_stream(seed, "pretrain", domain))
    n_test = min(max(int(round(count / 10)), 1), count - 1)
    cspec = ClientSpec(-1, domain, sort_tasks(DOMAIN_TASKS[domain]), count)
    return ClientDataset(
        train=pool.take(slice(0, count - n_test)),
        local_test=pool.take(slice(count - n_test, count)),
        spec=cspec,
    )


# ---------------------------------------------------------------------------
# on-disk form used by the `generate` subcommand
# ---------------------------------------------------------------------------

def _split_arrays(prefix: str, split: DataSplit) -> dict[str, np.ndarray]:
    out = {f"{prefix}_x": split.x}
    for t, v in split.labels.items():
        out[f"{prefix}_label_{t}"] = v
    return out


def save_scenario(data: ScenarioData, out_dir: str) -> dict:
    """Write client and test arrays plus a manifest; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    digest = hashlib.sha256()
    manifest: dict = {
        "scenario": data.spec.scenario_id,
        "seed": data.spec.seed,
        "unbalance_ratio": data.spec.unbalance_ratio,
        "clients": [],
        "global_test": {},
    }
    for cd in data.clients:
        arrays = _split_arrays("train", cd.train) | _split_arrays("test", cd.local_test)
        path = os.path.join(out_dir, f"client_{cd.spec.client_id}.npz")
        np.savez(path, **arrays)
        for key in sorted(arrays):
            digest.update(key.encode())
            digest.update(np.ascontiguousarray(arrays[key]).tobytes())
        manifest["clients"].append({
            "client_id": cd.spec.client_id,
            "domain": cd.spec.domain,
            "tasks": list(cd.spec.tasks),
            "train_count": cd.spec.train_count,
            "train_size": len(cd.train),
            "local_test_size": len(cd.local_test),
        })
    for domain, split in sorted(data.global_test.items()):
        arrays = _split_arrays("test", split)
        np.savez(os.path.join(out_dir, f"global_test_{domain}.npz"), **arrays)
        for key in sorted(arrays):
            digest.update(key.encode())
            digest.update(np.ascontiguousarray(arrays[key]).tobytes())
        manifest["global_test"][domain] = len(split)
    manifest["content_sha256"] = digest.hexdigest()
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
