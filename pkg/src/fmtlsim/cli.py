"""Command-line front door: generate data, run experiments, report, compare.

Subcommands:

* generate  -- materialize one scenario's datasets under data/<scenario>/<seed>/
* run       -- execute an experiment config (one run directory per seed)
* pretrain  -- train a warm-start checkpoint on the pooled pretrain data
* report    -- improvement tables for run directories against a target baseline
* compare   -- pairwise significance tests, critical-difference ranking, and
               improvement-versus-round curves for a set of baselines
* sweep     -- expand a template config along the client-count or pretrain axis

Configs are flat JSON; every key can be overridden by an FMTL_<KEY>
environment variable and then by command-line flags.  Unknown keys are
rejected.  Exit codes: 0 ok, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import evalstat, fedcore, synthdata
from .fedcore import RunConfig, StrategyHyperparams, StrategyId, parse_strategy
from .numkernel import save_checkpoint
from .synthdata import TASK_KINDS, canonicalize_scenario

ENV_PREFIX = "FMTL_"


class ConfigError(Exception):
    pass


CONFIG_DEFAULTS: dict = {
    "scenario": "IID-1",
    "arch": "MD",
    "strategy": "local",
    "decoupled": False,
    "seeds": [0],
    "rounds": 100,
    "local_epochs": None,
    "batch_size": 8,
    "base_lr": 1e-4,
    "weight_decay": 1e-4,
    "warmup_rounds": 5,
    "eval_interval": 2,
    "workers": 1,
    "train_a": 2000,
    "test_a": 800,
    "train_b": 4000,
    "test_b": 1000,
    "unbalance_ratio": 2.0,
    "client_count": None,
    "warm_start": None,
    "target_run": None,
    "out_root": "runs",
    # strategy hyperparameters
    "mu": 0.01,
    "amp_alpha": 0.1,
    "amp_sigma": 1.0,
    "amp_lambda": 1.0,
    "matfl_tau": 1.0,
    "matfl_sigma": 1.0,
    "mtl_lambda": 0.1,
    "cagrad_c": 0.5,
    "cagrad_iterations": 50,
    "cagrad_step": 0.1,
}

_HYPER_KEYS = ("mu", "amp_alpha", "amp_sigma", "amp_lambda", "matfl_tau",
               "matfl_sigma", "mtl_lambda", "cagrad_c", "cagrad_iterations",
               "cagrad_step")
# excluded from the run digest: they change where/how results are written,
# never what they contain
_NON_SEMANTIC_KEYS = ("out_root", "workers", "seeds")


def _coerce(key: str, value):
    default = CONFIG_DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    return value


def resolve_config(file_path: str | None = None, overrides: dict | None = None,
                   env: dict | None = None) -> dict:
    """Defaults < config file < FMTL_* environment < explicit overrides."""
    cfg = dict(CONFIG_DEFAULTS)

    if file_path:
        try:
            with open(file_path) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{file_path}: invalid JSON ({exc})")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)

    env = dict(os.environ) if env is None else env
    for key in CONFIG_DEFAULTS:
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            cfg[key] = _coerce(key, env[env_key])

    for key, value in (overrides or {}).items():
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            cfg[key] = _coerce(key, value)

    try:
        cfg["scenario"] = canonicalize_scenario(cfg["scenario"])
        cfg["arch"] = str(cfg["arch"]).upper()
        if cfg["arch"] not in ("MD", "TC"):
            raise ValueError(f"unknown architecture {cfg['arch']!r}")
        strategy = parse_strategy(str(cfg["strategy"]), bool(cfg["decoupled"]))
        cfg["strategy"] = strategy.name
        cfg["decoupled"] = strategy.decoupled
        if isinstance(cfg["seeds"], str):
            cfg["seeds"] = [s for s in cfg["seeds"].split(",") if s.strip()]
        elif isinstance(cfg["seeds"], int):
            cfg["seeds"] = [cfg["seeds"]]
        cfg["seeds"] = [int(s) for s in cfg["seeds"]]
        if not cfg["seeds"]:
            raise ValueError("seeds must be non-empty")
        if cfg["rounds"] < 1:
            raise ValueError("rounds must be >= 1")
        if cfg["client_count"] is not None:
            k = int(cfg["client_count"])
            if k < 2:
                raise ValueError("client_count must be >= 2")
            if cfg["scenario"] != "IID-1":
                raise ValueError("client_count override is only defined for IID-1")
            cfg["client_count"] = k
    except ValueError as exc:
        raise ConfigError(str(exc))
    return cfg


def config_digest(cfg: dict, seed: int) -> str:
    """Stable run id: hash of the canonical resolved config plus the seed."""
    payload = {k: v for k, v in cfg.items() if k not in _NON_SEMANTIC_KEYS}
    payload["seed"] = seed
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def build_run_config(cfg: dict, seed: int) -> RunConfig:
    hyper = StrategyHyperparams(**{k: cfg[k] for k in _HYPER_KEYS})
    return RunConfig(
        scenario=cfg["scenario"],
        arch=cfg["arch"],
        strategy=StrategyId(cfg["strategy"], cfg["decoupled"]),
        seed=seed,
        rounds=cfg["rounds"],
        local_epochs=cfg["local_epochs"],
        batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"],
        weight_decay=cfg["weight_decay"],
        warmup_rounds=cfg["warmup_rounds"],
        eval_interval=cfg["eval_interval"],
        workers=cfg["workers"],
        hyper=hyper,
        train_a=cfg["train_a"],
        test_a=cfg["test_a"],
        train_b=cfg["train_b"],
        test_b=cfg["test_b"],
        unbalance_ratio=cfg["unbalance_ratio"],
        client_count=cfg["client_count"],
        warm_start=cfg["warm_start"],
        run_id=config_digest(cfg, seed),
    )


def _load_report(run_dir: str) -> dict:
    path = os.path.join(run_dir, "report.json")
    if not os.path.exists(path):
        raise ConfigError(f"{run_dir}: no report.json (not a run directory?)")
    with open(path) as fh:
        return json.load(fh)


def _target_by_seed(target_dirs: list[str]) -> dict[int, dict]:
    out = {}
    for d in target_dirs:
        rep = _load_report(d)
        if rep["status"] != "done":
            raise ConfigError(f"target run {d} has status {rep['status']!r}")
        out[rep["seed"]] = rep["final_metrics"]
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = resolve_config(args.config, {
        "scenario": args.scenario, "seeds": args.seed,
        "unbalance_ratio": args.unbalance_ratio, "client_count": args.client_count,
    })
    seed = cfg["seeds"][0]
    out_dir = os.path.join(args.out, cfg["scenario"], str(seed))
    if os.path.exists(out_dir) and not args.force:
        print(f"refusing to overwrite {out_dir} (use --force)", file=sys.stderr)
        return 2
    spec = synthdata.scenario_spec(
        cfg["scenario"], seed, train_a=cfg["train_a"], test_a=cfg["test_a"],
        train_b=cfg["train_b"], test_b=cfg["test_b"],
        unbalance_ratio=cfg["unbalance_ratio"], client_count=cfg["client_count"])
    data = synthdata.make_scenario(spec)
    manifest = synthdata.save_scenario(data, out_dir)
    print(f"{out_dir} clients={len(manifest['clients'])} "
          f"sha256={manifest['content_sha256'][:16]}")
    return 0


def cmd_run(args) -> int:
    overrides = {
        "scenario": args.scenario, "arch": args.arch, "strategy": args.strategy,
        "decoupled": args.decoupled, "seeds": args.seeds, "rounds": args.rounds,
        "local_epochs": args.epochs, "workers": args.workers,
        "warm_start": args.warm_start, "target_run": args.target,
        "out_root": args.out,
    }
    overrides.update(_parse_sets(args.set))
    cfg = resolve_config(args.config, overrides)

    target_metrics_by_seed: dict[int, dict] = {}
    if cfg["target_run"]:
        target_metrics_by_seed = _target_by_seed(_expand_run_dirs([cfg["target_run"]]))

    for seed in cfg["seeds"]:
        run_cfg = build_run_config(cfg, seed)
        out_dir = os.path.join(cfg["out_root"], run_cfg.run_id)
        target = target_metrics_by_seed.get(seed)
        if cfg["target_run"] and target is None:
            raise ConfigError(f"target baseline has no run for seed {seed}")
        try:
            report = fedcore.run_experiment(run_cfg, out_dir, target)
        except ValueError as exc:
            raise ConfigError(str(exc))
        print(f"{out_dir} status={report['status']} strategy={report['strategy']} "
              f"seed={seed}")
    return 0


def cmd_pretrain(args) -> int:
    params = fedcore.train_pretrain_checkpoint(
        seed=args.seed, arch_kind=args.arch.upper(), domain=args.domain,
        count=args.count, epochs=args.epochs, lr=args.lr)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_checkpoint(args.out, params)
    print(f"{args.out} segments={len(params.layout.names)} params={len(params)}")
    return 0


def _baseline_label(report: dict) -> str:
    return f"{report['strategy']}/{report['arch']}"


def cmd_report(args) -> int:
    run_reports = [_load_report(d) for d in _expand_run_dirs(args.runs)]
    targets = _target_by_seed(_expand_run_dirs([args.target]))
    os.makedirs(args.out, exist_ok=True)

    grouped: dict[str, list[dict]] = {}
    for rep in run_reports:
        if rep["status"] != "done":
            continue
        grouped.setdefault(_baseline_label(rep), []).append(rep)

    improvement_rows = []
    metric_rows = []
    for label in sorted(grouped):
        reports = grouped[label]
        deltas = {"G": [], "P": []}
        per_task: dict[tuple, list[float]] = {}
        for rep in reports:
            seed = rep["seed"]
            if seed not in targets:
                raise ConfigError(f"target baseline has no run for seed {seed}")
            try:
                imp = fedcore.improvement_vs_target(rep["final_metrics"], targets[seed])
            except ValueError as exc:
                raise ConfigError(str(exc))
            for split in ("G", "P"):
                deltas[split].append(imp[split]["delta_percent"])
                for task, cell in rep["final_metrics"][split].items():
                    per_task.setdefault((split, task, cell["metric"]), []).append(cell["mean"])
        for split in ("G", "P"):
            arr = np.asarray(deltas[split])
            improvement_rows.append([
                reports[0]["scenario"], label, split, len(arr),
                repr(float(arr.mean())), repr(float(arr.std())),
            ])
        for (split, task, metric), vals in sorted(per_task.items()):
            arr = np.asarray(vals)
            metric_rows.append([
                reports[0]["scenario"], label, split, task, metric,
                repr(float(arr.mean())), repr(float(arr.std())),
            ])

    with open(os.path.join(args.out, "improvement.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "baseline", "split", "n_seeds",
                         "delta_mean", "delta_std"])
        writer.writerows(improvement_rows)
    with open(os.path.join(args.out, "task_metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "baseline", "split", "task", "metric",
                         "mean", "std"])
        writer.writerows(metric_rows)
    print(os.path.join(args.out, "improvement.csv"))
    return 0


def _per_task_deltas(report: dict, target_metrics: dict, split: str) -> dict[str, float]:
    """Signed relative change per task versus the target's final value."""
    out = {}
    for task, cell in report["final_metrics"][split].items():
        tgt = target_metrics[split][task]["mean"]
        sign = -1.0 if cell["lower_is_better"] else 1.0
        out[task] = sign * (cell["mean"] - tgt) / tgt * 100.0
    return out


def _round_means(run_dir: str) -> dict[tuple, dict[str, float]]:
    """rounds.csv -> {(round, split): {task: mean across clients}}."""
    acc: dict[tuple, dict[str, list[float]]] = {}
    with open(os.path.join(run_dir, "rounds.csv")) as fh:
        for row in csv.DictReader(fh):
            key = (int(row["round"]), row["split"])
            acc.setdefault(key, {}).setdefault(row["task"], []).append(float(row["value"]))
    return {key: {t: float(np.mean(v)) for t, v in tasks.items()}
            for key, tasks in acc.items()}


def cmd_compare(args) -> int:
    run_dirs = _expand_run_dirs(args.runs)
    reports = {d: _load_report(d) for d in run_dirs}
    targets = _target_by_seed(_expand_run_dirs([args.target]))
    os.makedirs(args.out, exist_ok=True)
    alpha = args.alpha

    done = {d: r for d, r in reports.items() if r["status"] == "done"}
    if not done:
        raise ConfigError("no completed runs to compare")

    # paired observations: one per (seed, task), the signed relative
    # improvement of the global-split metric versus the target baseline
    observations: dict[str, dict[tuple, float]] = {}
    for d, rep in done.items():
        seed = rep["seed"]
        if seed not in targets:
            raise ConfigError(f"target baseline has no run for seed {seed}")
        label = _baseline_label(rep)
        for task, delta in _per_task_deltas(rep, targets[seed], "G").items():
            observations.setdefault(label, {})[(seed, task)] = delta

    keys = sorted(set.intersection(*[set(v) for v in observations.values()]))
    if not keys:
        raise ConfigError("baselines share no (seed, task) observations")
    obs_arrays = {label: np.array([observations[label][k] for k in keys])
                  for label in observations}

    results = evalstat.pairwise_wilcoxon(obs_arrays)
    labels = sorted(obs_arrays)
    adjusted = {(r.pair[0], r.pair[1]): r.adjusted_p for r in results}
    with open(os.path.join(args.out, "pvalues.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["baseline"] + labels)
        for a in labels:
            row = [a]
            for b in labels:
                if a == b:
                    row.append("")
                else:
                    p = adjusted.get((a, b), adjusted.get((b, a)))
                    row.append(repr(p))
            writer.writerow(row)

    # critical-difference ranking over (seed, task) blocks of raw metrics
    block_scores = []
    block_lib = []
    for seed, task in keys:
        row = []
        for label in labels:
            rep = next(r for r in done.values()
                       if _baseline_label(r) == label and r["seed"] == seed)
            row.append(rep["final_metrics"]["G"][task]["mean"])
        block_scores.append(row)
        block_lib.append(TASK_KINDS[task.split("@")[0]].lower_is_better)
    cd_report = evalstat.friedman_nemenyi(
        np.array(block_scores), alpha=alpha,
        lower_is_better=np.array(block_lib), names=labels)
    cd_json = cd_report.to_json()
    cd_json["pairing"] = ("blocks are (seed, task) pairs of final global-split "
                          "metrics; pairwise tests use per-(seed, task) signed "
                          "relative improvement versus the target baseline")
    with open(os.path.join(args.out, "cd.json"), "w") as fh:
        json.dump(cd_json, fh, indent=2, sort_keys=True)

    # improvement-versus-round curves, averaged across seeds per baseline
    curve_acc: dict[tuple, list[float]] = {}
    for d, rep in done.items():
        label = _baseline_label(rep)
        target = targets[rep["seed"]]
        for (round_idx, split), task_means in _round_means(d).items():
            deltas = []
            for task, mean in task_means.items():
                tgt = target[split][task]["mean"]
                sign = -1.0 if target[split][task]["lower_is_better"] else 1.0
                deltas.append(sign * (mean - tgt) / tgt * 100.0)
            curve_acc.setdefault((round_idx, label, split), []).append(float(np.mean(deltas)))
    rows = []
    for (round_idx, label, split) in sorted(curve_acc, key=lambda k: (k[1], k[0], k[2])):
        vals = curve_acc[(round_idx, label, split)]
        rows.append([round_idx, label, split, repr(float(np.mean(vals)))])
    with open(os.path.join(args.out, "curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "baseline", "split", "delta_percent"])
        writer.writerows(rows)

    print(os.path.join(args.out, "cd.json"))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args.config, {"out_root": args.out} if args.out else {})
    os.makedirs(cfg["out_root"], exist_ok=True)
    manifest = []

    def run_cell(cell_cfg: dict, cell_name: str):
        for seed in cell_cfg["seeds"]:
            run_cfg = build_run_config(cell_cfg, seed)
            out_dir = os.path.join(cell_cfg["out_root"], run_cfg.run_id)
            entry = {"cell": cell_name, "seed": seed, "run_id": run_cfg.run_id,
                     "dir": out_dir}
            try:
                report = fedcore.run_experiment(run_cfg, out_dir)
                entry["status"] = report["status"]
            except Exception as exc:  # keep sweeping past broken cells
                entry["status"] = "failed"
                entry["error"] = str(exc)
            manifest.append(entry)

    if args.axis == "clients":
        if cfg["scenario"] != "IID-1":
            raise ConfigError("the client-count axis sweeps the IID-1 scenario")
        for k in range(2, 9):
            cell = dict(cfg)
            cell["client_count"] = k
            run_cell(cell, f"clients={k}")
    elif args.axis == "pretrain":
        ckpt_path = os.path.join(cfg["out_root"], "pretrain.fmtlckpt")
        params = fedcore.train_pretrain_checkpoint(
            seed=cfg["seeds"][0], arch_kind=cfg["arch"])
        save_checkpoint(ckpt_path, params)
        for cell_name, warm in (("scratch", None), ("pretrained", ckpt_path)):
            cell = dict(cfg)
            cell["warm_start"] = warm
            run_cell(cell, cell_name)
    else:
        raise ConfigError(f"unknown sweep axis {args.axis!r}")

    path = os.path.join(cfg["out_root"], "suite_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _parse_sets(pairs: list[str] | None) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = value
    return out


def _expand_run_dirs(paths: list[str]) -> list[str]:
    """Accept run directories directly or roots containing run directories."""
    out = []
    for p in paths:
        if os.path.exists(os.path.join(p, "report.json")):
            out.append(p)
            continue
        found = sorted(
            os.path.join(p, d) for d in os.listdir(p)
            if os.path.exists(os.path.join(p, d, "report.json"))
        ) if os.path.isdir(p) else []
        if not found:
            raise ConfigError(f"{p}: no run directories found")
        out.extend(found)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmtlsim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="materialize scenario datasets")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.add_argument("--config", default=None)
    p.add_argument("--unbalance-ratio", dest="unbalance_ratio", type=float, default=None)
    p.add_argument("--client-count", dest="client_count", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--scenario", default=None)
    p.add_argument("--arch", default=None)
    p.add_argument("--strategy", default=None)
    p.add_argument("--decoupled", action="store_const", const=True, default=None)
    p.add_argument("--seeds", default=None, help="e.g. 0,1,2")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--warm-start", dest="warm_start", default=None)
    p.add_argument("--target", default=None, help="target baseline run directory")
    p.add_argument("--out", default=None, help="run output root")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("pretrain", help="train a warm-start checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", default="MD")
    p.add_argument("--domain", default="A")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("report", help="improvement tables vs a target baseline")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="significance tests and CD ranking")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="expand a template config along an axis")
    p.add_argument("--axis", choices=("clients", "pretrain"), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
