"""Federated round engine: local training, aggregation strategies, ledger.

Nine strategies: local (no federation), fedavg, fedprox, fedamp, fedrep,
matfl, fedmtl, pcgrad, cagrad.  Every strategy except local also has a
decoupled "-E" form that transmits and combines only the encoder segment;
matfl and fedrep are decoupled by definition.

Layout rules.  Full-model aggregation needs every client's parameter vector
to be value-alignable: identical ordered segment-length sequences.  Clients
holding one task each therefore aggregate (their uniform-width decoders line
up positionally even though the segment names differ), while mixed
multi-task/single-task or cross-domain multi-task populations do not, and
the run is recorded as a NULL baseline instead of crashing.  Decoupled
strategies only need the encoder segments to agree, which they always do.

Communication ledger.  Bytes are 8 per transmitted 64-bit real.  Uploads are
one payload per client; downloads are one payload per client, except fedmtl
where the server relays every client vector to every client (K payloads per
client).  `broadcast_volume_bytes` is the per-round cost model used for
cost-ratio predictions; on it, decoupled/full equals the encoder fraction
and fedmtl/fedavg equals K exactly.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .evalstat import ImprovementReport, TaskImprovement, evaluate
from .models import ModelArch, forward_backward, init_params
from .mtlopt import CagradConfig, cagrad, pcgrad
from .numkernel import (AdamWState, LayoutMismatch, RngStream, SegmentedParams,
                        adamw_step, anchored_weighted_sum, cosine_warmup_lr,
                        derive_stream, load_checkpoint, save_checkpoint,
                        weighted_sum)
from .synthdata import (TASK_KINDS, ClientDataset, ScenarioData, make_scenario,
                        pretrain_pool, scenario_spec)

BYTES_PER_REAL = 8

STRATEGY_NAMES = ("local", "fedavg", "fedprox", "fedamp", "fedrep",
                  "matfl", "fedmtl", "pcgrad", "cagrad")
FORCED_DECOUPLED = frozenset({"matfl", "fedrep"})
# strategies that maintain one global model and overwrite clients with it
GLOBAL_BROADCAST = frozenset({"fedavg", "fedprox", "pcgrad", "cagrad"})

AMP_RESCUE_EPS = 1e-6


@dataclass(frozen=True)
class StrategyId:
    """Strategy name plus the encoder-only ("-E") flag.

    local has no transmission so the flag is ignored; matfl and fedrep are
    parameter-decoupling methods, their flag is forced on.
    """

    name: str
    decoupled: bool = False

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.name!r}")
        if self.name == "local" and self.decoupled:
            object.__setattr__(self, "decoupled", False)
        if self.name in FORCED_DECOUPLED and not self.decoupled:
            object.__setattr__(self, "decoupled", True)

    @property
    def label(self) -> str:
        if self.name in FORCED_DECOUPLED or self.name == "local":
            return self.name
        return f"{self.name}-E" if self.decoupled else self.name


def parse_strategy(text: str, decoupled: bool | None = None) -> StrategyId:
    name = text.strip().lower().replace("_", "-")
    flag = bool(decoupled)
    if name.endswith("-e"):
        name, flag = name[:-2], True
    return StrategyId(name, flag)


@dataclass
class StrategyHyperparams:
    """Per-strategy knobs, defaulting to the usual published settings."""

    mu: float = 0.01                # fedprox proximal coefficient
    amp_alpha: float = 0.1          # fedamp off-diagonal attention scale
    amp_sigma: float = 1.0          # fedamp similarity bandwidth
    amp_lambda: float = 1.0         # fedamp pull toward the personalized cloud model
    matfl_tau: float = 1.0          # matfl softmax temperature
    matfl_sigma: float = 1.0        # matfl similarity bandwidth
    mtl_lambda: float = 0.1         # fedmtl centering-regularizer strength
    cagrad_c: float = 0.5
    cagrad_iterations: int = 50
    cagrad_step: float = 0.1

    def cagrad_config(self) -> CagradConfig:
        return CagradConfig(self.cagrad_c, self.cagrad_iterations, self.cagrad_step)


@dataclass
class ClientState:
    """Everything one client owns: data, params, optimizer, RNG, extras."""

    client_id: int
    data: ClientDataset
    arch: ModelArch
    params: SegmentedParams
    opt: AdamWState
    gen: np.random.Generator
    extras: dict = field(default_factory=dict)

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.data.spec.tasks

    @property
    def domain(self) -> str:
        return self.data.spec.domain


# ---------------------------------------------------------------------------
# communication ledger
# ---------------------------------------------------------------------------

@dataclass
class CommLedger:
    entries: list[tuple[int, int, int]] = field(default_factory=list)

    def add(self, round_idx: int, bytes_up: int, bytes_down: int) -> None:
        self.entries.append((round_idx, int(bytes_up), int(bytes_down)))

    @property
    def bytes_up(self) -> int:
        return sum(e[1] for e in self.entries)

    @property
    def bytes_down(self) -> int:
        return sum(e[2] for e in self.entries)

    @property
    def bytes_total(self) -> int:
        return self.bytes_up + self.bytes_down


def payload_reals(strategy: StrategyId, layout) -> int:
    """Transmitted reals per client copy: encoder segment when decoupled."""
    if strategy.name == "local":
        return 0
    if strategy.decoupled:
        sl = layout.slice_of("encoder")
        return sl.stop - sl.start
    return layout.total_length


def round_traffic(strategy: StrategyId, n_clients: int, payload: float) -> tuple[float, float]:
    """(bytes up, bytes down) for one round given the per-copy payload size."""
    if strategy.name == "local" or payload == 0:
        return 0, 0
    up = n_clients * payload * BYTES_PER_REAL
    if strategy.name == "fedmtl":
        # every client downloads all K client vectors
        down = n_clients * n_clients * payload * BYTES_PER_REAL
    else:
        down = n_clients * payload * BYTES_PER_REAL
    return up, down


def broadcast_volume_bytes(strategy: StrategyId, n_clients: int, payload: float) -> float:
    """Per-round server-to-clients volume, the cost model behind published
    per-round communication figures; ratios between strategies and
    architectures are exact functions of payload sizes and K."""
    return round_traffic(strategy, n_clients, payload)[1]


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------

def _freeze_mask(layout, freeze: str | None) -> np.ndarray | None:
    if freeze is None:
        return None
    mask = np.ones(layout.total_length, dtype=bool)
    enc = layout.slice_of("encoder")
    if freeze == "encoder":
        mask[enc] = False
    elif freeze == "heads":
        mask[:] = False
        mask[enc] = True
    else:
        raise ValueError(f"unknown freeze plan {freeze!r}")
    return mask


def _normalize_pull(pull, layout):
    """A pull term is (coef, anchor, slice?); slice defaults to the whole
    vector.  Zero-coefficient pulls are dropped so they cannot perturb bits."""
    if pull is None:
        return None
    coef, anchor = pull[0], np.asarray(pull[1], dtype=np.float64)
    sl = pull[2] if len(pull) > 2 and pull[2] is not None else slice(0, layout.total_length)
    if coef == 0.0:
        return None
    if anchor.shape[0] != sl.stop - sl.start:
        raise ValueError("pull anchor length does not match its slice")
    return float(coef), anchor, sl


def local_train(client: ClientState, lr: float, epochs: int, *,
                prox=None, amp=None, mean_pull=None, freeze: str | None = None,
                batch_size: int = 8) -> ClientState:
    """Run `epochs` seeded-shuffle passes of AdamW over the client's train split.

    `prox` is (mu, anchor[, slice]) adding mu*(theta - anchor) to the
    gradient (the proximal term), `amp` the same for the personalized cloud
    anchor, `mean_pull` for the population-mean regularizer.  `freeze`
    blocks updates on the encoder or on everything but the encoder.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    layout = client.params.layout
    pulls = [p for p in (_normalize_pull(prox, layout),
                         _normalize_pull(amp, layout),
                         _normalize_pull(mean_pull, layout)) if p is not None]
    mask = _freeze_mask(layout, freeze)
    fwd = forward_backward(client.arch)
    train = client.data.train
    n = len(train)
    for _ in range(epochs):
        order = client.gen.permutation(n)
        for start in range(0, n, batch_size):
            batch = train.take(order[start:start + batch_size])
            _, _, grad = fwd(client.params, batch)
            for coef, anchor, sl in pulls:
                grad[sl] += coef * (client.params.values[sl] - anchor)
            client.params = adamw_step(client.params, grad, client.opt, lr, mask)
    return client


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def check_aggregation_layouts(strategy: StrategyId, clients: list[ClientState]) -> None:
    """Raise LayoutMismatch when the strategy cannot combine these clients.

    Decoupled strategies need matching encoder segments; full-model
    strategies need value-alignable vectors (equal segment-length
    sequences).  The engine records the raised error as a NULL baseline.
    """
    if strategy.name == "local" or len(clients) < 2:
        return
    first = clients[0].params.layout
    for c in clients[1:]:
        other = c.params.layout
        if strategy.decoupled:
            if not other.has_segment("encoder") or \
                    (other.slice_of("encoder").stop - other.slice_of("encoder").start) != \
                    (first.slice_of("encoder").stop - first.slice_of("encoder").start):
                raise LayoutMismatch("encoder segments differ across clients")
        else:
            if not first.structurally_compatible(other):
                raise LayoutMismatch(
                    f"heterogeneous layouts under full-model {strategy.label}: "
                    f"{first!r} vs {other!r}")


def _agg_slice(strategy: StrategyId, layout) -> slice:
    return layout.slice_of("encoder") if strategy.decoupled else slice(0, layout.total_length)


def fedamp_mixing_weights(vecs: list[np.ndarray], i: int, alpha: float,
                          sigma: float) -> np.ndarray:
    """Attention row for client i: similarity-scaled off-diagonal weights
    alpha * exp(-|v_i - v_j|^2 / (sigma * P)) and the complementary self
    weight.  A negative self weight is rescued by rescaling the off-diagonal
    mass, so the row is always a convex combination."""
    k = len(vecs)
    p = vecs[0].shape[0]
    off = np.array([
        alpha * np.exp(-float(np.sum((vecs[i] - vecs[j]) ** 2)) / (sigma * p))
        if j != i else 0.0
        for j in range(k)
    ])
    off_sum = float(off.sum())
    self_w = 1.0 - off_sum
    if self_w < 0.0:
        off *= (1.0 - AMP_RESCUE_EPS) / off_sum
        self_w = AMP_RESCUE_EPS
    row = off
    row[i] = self_w
    return row


def _set_slice(client: ClientState, sl: slice, values: np.ndarray) -> None:
    new = client.params.values.copy()
    new[sl] = values
    client.params = SegmentedParams(new, client.params.layout)


def aggregate(strategy: StrategyId, clients: list[ClientState],
              global_params: SegmentedParams | None, ledger: CommLedger,
              round_idx: int, hp: StrategyHyperparams,
              rng: RngStream | None = None) -> SegmentedParams | None:
    """One server step.  Mutates client states, appends one ledger entry,
    returns the (possibly updated) global model."""
    clients = sorted(clients, key=lambda c: c.client_id)
    k = len(clients)
    name = strategy.name

    if name == "local":
        ledger.add(round_idx, 0, 0)
        return global_params

    check_aggregation_layouts(strategy, clients)
    payload = payload_reals(strategy, clients[0].params.layout)
    up, down = round_traffic(strategy, k, payload)
    ledger.add(round_idx, up, down)

    weights = [1.0 / k] * k
    sl = _agg_slice(strategy, clients[0].params.layout)

    if name in ("fedavg", "fedprox"):
        layouts = [c.params.layout for c in clients]
        if not strategy.decoupled and all(layouts[0].compatible(l) for l in layouts):
            merged = weighted_sum([c.params for c in clients], weights)
            avg = merged.values
        else:
            avg = anchored_weighted_sum([c.params.values[sl] for c in clients], weights)
        for c in clients:
            _set_slice(c, sl, avg)
        if global_params is not None:
            gv = global_params.values.copy()
            gv[_agg_slice(strategy, global_params.layout)] = avg
            global_params = SegmentedParams(gv, global_params.layout)
        return global_params

    if name in ("pcgrad", "cagrad"):
        if global_params is None:
            raise ValueError(f"{name} needs a global model")
        gsl = _agg_slice(strategy, global_params.layout)
        gvec = global_params.values[gsl]
        deltas = [(c.client_id, gvec - c.params.values[sl]) for c in clients]
        if name == "pcgrad":
            if rng is None:
                raise ValueError("pcgrad aggregation needs an RngStream")
            direction = pcgrad(deltas, rng)
        else:
            direction = cagrad(deltas, hp.cagrad_config())
        new_vec = gvec - direction  # unit server step
        gv = global_params.values.copy()
        gv[gsl] = new_vec
        global_params = SegmentedParams(gv, global_params.layout)
        for c in clients:
            _set_slice(c, sl, new_vec)
        return global_params

    if name == "fedamp":
        vecs = [c.params.values[sl] for c in clients]
        for i, c in enumerate(clients):
            row = fedamp_mixing_weights(vecs, i, hp.amp_alpha, hp.amp_sigma)
            c.extras["amp_anchor"] = anchored_weighted_sum(vecs, row)
        return global_params

    if name == "fedrep" or name == "matfl":
        vecs = [c.params.values[sl] for c in clients]
        if name == "fedrep":
            avg = anchored_weighted_sum(vecs, weights)
            for c in clients:
                _set_slice(c, sl, avg)
        else:
            p = vecs[0].shape[0]
            sims = np.array([
                [-float(np.sum((vecs[i] - vecs[j]) ** 2)) / (hp.matfl_sigma * p)
                 for j in range(k)]
                for i in range(k)
            ])
            mixed = []
            for i in range(k):
                s = sims[i] / hp.matfl_tau
                w = np.exp(s - np.max(s))
                w /= w.sum()
                mixed.append(anchored_weighted_sum(vecs, w))
            for c, enc in zip(clients, mixed):
                _set_slice(c, sl, enc)
        return global_params

    if name == "fedmtl":
        mean_vec = anchored_weighted_sum([c.params.values[sl] for c in clients], weights)
        for c in clients:
            c.extras["mtl_anchor"] = mean_vec
        return global_params

    raise ValueError(f"unhandled strategy {name!r}")


def build_directives(strategy: StrategyId, clients: list[ClientState],
                     hp: StrategyHyperparams) -> dict[int, dict]:
    """Per-client local_train keyword arguments for the coming round."""
    directives: dict[int, dict] = {c.client_id: {} for c in clients}
    for c in clients:
        sl = _agg_slice(strategy, c.params.layout)
        if strategy.name == "fedprox":
            directives[c.client_id]["prox"] = (hp.mu, c.params.values[sl].copy(), sl)
        elif strategy.name == "fedamp" and "amp_anchor" in c.extras:
            directives[c.client_id]["amp"] = (hp.amp_lambda, c.extras["amp_anchor"], sl)
        elif strategy.name == "fedmtl" and "mtl_anchor" in c.extras:
            directives[c.client_id]["mean_pull"] = (hp.mtl_lambda, c.extras["mtl_anchor"], sl)
    return directives


def train_round(strategy: StrategyId, clients: list[ClientState], lr: float,
                epochs: int, hp: StrategyHyperparams, batch_size: int = 8,
                workers: int = 1) -> None:
    """Local phase of one round; clients may run concurrently since they
    share no mutable state, and results are identical to sequential order."""
    directives = build_directives(strategy, clients, hp)

    def work(client: ClientState) -> None:
        kwargs = directives[client.client_id]
        if strategy.name == "fedrep":
            local_train(client, lr, epochs, freeze="encoder",
                        batch_size=batch_size, **kwargs)
            local_train(client, lr, 1, freeze="heads",
                        batch_size=batch_size, **kwargs)
        else:
            local_train(client, lr, epochs, batch_size=batch_size, **kwargs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, clients))
    else:
        for c in clients:
            work(c)


# ---------------------------------------------------------------------------
# full experiment
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved settings for one (config, seed) run."""

    scenario: str
    arch: str
    strategy: StrategyId
    seed: int
    rounds: int = 100
    local_epochs: int | None = None   # resolved per scenario when None
    batch_size: int = 8
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_rounds: int = 5
    eval_interval: int = 2
    workers: int = 1
    hyper: StrategyHyperparams = field(default_factory=StrategyHyperparams)
    train_a: int = 2000
    test_a: int = 800
    train_b: int = 4000
    test_b: int = 1000
    unbalance_ratio: float = 2.0
    client_count: int | None = None
    warm_start: str | None = None
    run_id: str = ""


def resolved_epochs(cfg: RunConfig, data: ScenarioData) -> int:
    if cfg.local_epochs is not None:
        return cfg.local_epochs
    domains = {c.spec.domain for c in data.clients}
    return 1 if "B" in domains else 4


def apply_warm_start(params: SegmentedParams, checkpoint: SegmentedParams) -> SegmentedParams:
    """Copy every (name, length)-matching segment from the checkpoint."""
    values = params.values.copy()
    for name, _, length in params.layout.segments():
        if checkpoint.layout.has_segment(name):
            src = checkpoint.segment(name)
            if src.shape[0] == length:
                values[params.layout.slice_of(name)] = src
    return SegmentedParams(values, params.layout)


def build_clients(cfg: RunConfig, data: ScenarioData) -> list[ClientState]:
    """Initialize client states.  Segments draw from per-name streams, so all
    clients agree bit-exactly on every segment they share at round zero."""
    arch = ModelArch(cfg.arch)
    init_stream = derive_stream(cfg.seed, "model")
    checkpoint = load_checkpoint(cfg.warm_start) if cfg.warm_start else None
    clients = []
    for cd in data.clients:
        params = init_params(arch, cd.spec.tasks, init_stream)
        if checkpoint is not None:
            params = apply_warm_start(params, checkpoint)
        opt = AdamWState.init(len(params), weight_decay=cfg.weight_decay)
        gen = derive_stream(cfg.seed, "client", cd.spec.client_id, "train").generator()
        clients.append(ClientState(cd.spec.client_id, cd, arch, params, opt, gen))
    return clients


def _task_key(task: str, domain: str) -> str:
    return f"{task}@{domain}"


def evaluate_round(clients: list[ClientState], data: ScenarioData,
                   round_idx: int) -> list[tuple]:
    rows = []
    for c in clients:
        pool = data.global_test[c.domain]
        for rec in evaluate(c.params, c.arch, pool.restrict(c.tasks), c.tasks, c.client_id):
            rows.append((round_idx, c.client_id, _task_key(rec.task, c.domain),
                         "G", rec.metric_name, rec.value))
        for rec in evaluate(c.params, c.arch, c.data.local_test, c.tasks, c.client_id):
            rows.append((round_idx, c.client_id, _task_key(rec.task, c.domain),
                         "P", rec.metric_name, rec.value))
    return rows


def summarize_final(rows: list[tuple], final_round: int) -> dict:
    """Per-(split, task) mean/std over clients at the final evaluated round."""
    out: dict[str, dict] = {"G": {}, "P": {}}
    per: dict[tuple, dict] = {}
    for round_idx, cid, task, split, metric, value in rows:
        if round_idx != final_round:
            continue
        per.setdefault((split, task, metric), {})[cid] = value
    for (split, task, metric), by_client in per.items():
        vals = np.array([by_client[c] for c in sorted(by_client)])
        kind = TASK_KINDS[task.split("@")[0]]
        out[split][task] = {
            "metric": metric,
            "lower_is_better": kind.lower_is_better,
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "per_client": {str(c): float(by_client[c]) for c in sorted(by_client)},
        }
    return out


def improvement_vs_target(final_metrics: dict, target_metrics: dict | None) -> dict:
    """Improvement reports per split; target None means self-comparison."""
    reports = {}
    for split in ("G", "P"):
        tasks = sorted(final_metrics[split])
        fed = [final_metrics[split][t]["mean"] for t in tasks]
        if target_metrics is None:
            target = list(fed)
        else:
            missing = [t for t in tasks if t not in target_metrics.get(split, {})]
            if missing:
                raise ValueError(f"target baseline lacks tasks {missing} for split {split}")
            target = [target_metrics[split][t]["mean"] for t in tasks]
        entries = [
            TaskImprovement(t, f, g, final_metrics[split][t]["lower_is_better"])
            for t, f, g in zip(tasks, fed, target)
        ]
        reports[split] = ImprovementReport(entries).to_json()
    return reports


def _write_rows_csv(path: str, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def run_experiment(cfg: RunConfig, out_dir: str,
                   target_metrics: dict | None = None) -> dict:
    """Full round loop; writes config.json, rounds.csv, ledger.csv, final
    per-client checkpoints, and report.json into out_dir.  A LayoutMismatch
    at setup is recorded as status "null_baseline" rather than raised."""
    os.makedirs(out_dir, exist_ok=True)
    spec = scenario_spec(cfg.scenario, cfg.seed, train_a=cfg.train_a, test_a=cfg.test_a,
                         train_b=cfg.train_b, test_b=cfg.test_b,
                         unbalance_ratio=cfg.unbalance_ratio,
                         client_count=cfg.client_count)
    data = make_scenario(spec)
    clients = build_clients(cfg, data)
    epochs = resolved_epochs(cfg, data)
    ledger = CommLedger()

    config_json = asdict(cfg)
    config_json["strategy"] = cfg.strategy.label
    config_json["resolved_epochs"] = epochs
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config_json, fh, indent=2, sort_keys=True)

    rows_header = ["round", "client_id", "task", "split", "metric_name", "value"]
    ledger_header = ["round", "bytes_up", "bytes_down"]

    try:
        check_aggregation_layouts(cfg.strategy, clients)
    except LayoutMismatch as exc:
        report = {
            "run_id": cfg.run_id,
            "status": "null_baseline",
            "reason": str(exc),
            "scenario": spec.scenario_id,
            "arch": cfg.arch,
            "strategy": cfg.strategy.label,
            "seed": cfg.seed,
            "rounds": 0,
            "final_metrics": {"G": {}, "P": {}},
            "improvement": None,
            "comm": {"bytes_up": 0, "bytes_down": 0, "bytes_total": 0},
        }
        _write_rows_csv(os.path.join(out_dir, "rounds.csv"), rows_header, [])
        _write_rows_csv(os.path.join(out_dir, "ledger.csv"), ledger_header, [])
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        return report

    # global-model strategies start every client from the same global vector
    # (encoder only in the decoupled case, where layouts may differ)
    global_params: SegmentedParams | None = None
    if cfg.strategy.name in GLOBAL_BROADCAST:
        global_params = clients[0].params.copy()
        if cfg.strategy.decoupled:
            enc = global_params.segment("encoder").copy()
            for c in clients:
                _set_slice(c, c.params.layout.slice_of("encoder"), enc)
        else:
            for c in clients:
                c.params = SegmentedParams(global_params.values.copy(), c.params.layout)

    warmup = min(cfg.warmup_rounds, cfg.rounds - 1)
    rows = evaluate_round(clients, data, 0)
    for round_idx in range(1, cfg.rounds + 1):
        lr = cosine_warmup_lr(round_idx - 1, cfg.rounds, cfg.base_lr, warmup)
        train_round(cfg.strategy, clients, lr, epochs, cfg.hyper,
                    batch_size=cfg.batch_size, workers=cfg.workers)
        surgery_rng = derive_stream(cfg.seed, "surgery", round_idx)
        global_params = aggregate(cfg.strategy, clients, global_params, ledger,
                                  round_idx, cfg.hyper, surgery_rng)
        if round_idx % cfg.eval_interval == 0 or round_idx == cfg.rounds:
            rows.extend(evaluate_round(clients, data, round_idx))

    final_metrics = summarize_final(rows, cfg.rounds)
    improvement = improvement_vs_target(final_metrics, target_metrics)

    _write_rows_csv(os.path.join(out_dir, "rounds.csv"), rows_header, rows)
    _write_rows_csv(os.path.join(out_dir, "ledger.csv"), ledger_header, ledger.entries)
    for c in clients:
        save_checkpoint(os.path.join(out_dir, f"final_client_{c.client_id}.fmtlckpt"),
                        c.params)

    report = {
        "run_id": cfg.run_id,
        "status": "done",
        "scenario": spec.scenario_id,
        "arch": cfg.arch,
        "strategy": cfg.strategy.label,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "target": "self" if target_metrics is None else "external",
        "final_metrics": final_metrics,
        "improvement": improvement,
        "comm": {"bytes_up": ledger.bytes_up, "bytes_down": ledger.bytes_down,
                 "bytes_total": ledger.bytes_total},
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def train_pretrain_checkpoint(seed: int, arch_kind: str = "MD", domain: str = "A",
                              count: int = 2000, epochs: int = 20,
                              lr: float = 1e-3, batch_size: int = 8) -> SegmentedParams:
    """Centralized warm-start training on the pooled pretrain dataset."""
    pool = pretrain_pool(seed, domain, count)
    arch = ModelArch(arch_kind)
    params = init_params(arch, pool.spec.tasks, derive_stream(seed, "model"))
    opt = AdamWState.init(len(params))
    gen = derive_stream(seed, "pretrain", "shuffle").generator()
    client = ClientState(-1, pool, arch, params, opt, gen)
    local_train(client, lr, epochs, batch_size=batch_size)
    return client.params
