"""Task metrics, improvement scoring, and baseline comparison statistics.

Covers the per-task evaluation metrics (RMSE, weighted BCE test loss, mean
angular error in degrees, macro accuracy), the signed weighted relative
improvement versus a target baseline, the Wilcoxon signed-rank test with
Bonferroni correction for pairwise baseline comparisons, and the Friedman
test with Nemenyi critical-difference ranking across multiple indicators.

The Wilcoxon p-value is exact (full null enumeration via dynamic
programming) up to n = 25 non-zero differences and a continuity-corrected
normal approximation beyond; ties receive average ranks throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .models import ModelArch, predict, task_loss
from .numkernel import SegmentedParams
from .synthdata import TASK_KINDS, DataSplit, sort_tasks


# ---------------------------------------------------------------------------
# per-task metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    client_id: int | str
    task: str
    metric_name: str
    value: float
    lower_is_better: bool
    baseline_id: str = ""
    seed: int = -1

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.metric_name} for {self.task} is not finite")


def metric_value(task: str, pred: np.ndarray, label: np.ndarray) -> float:
    """Evaluation metric for one task (distinct from its training loss where
    the task trains on a surrogate, e.g. normals train on 1-cos but report
    mean angular error in degrees)."""
    kind = TASK_KINDS[task]
    if kind.metric == "rmse":
        y = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        return float(np.sqrt(np.mean((pred - y) ** 2)))
    if kind.metric == "weighted_bce_loss":
        return task_loss(task, pred, label)
    if kind.metric == "mean_angular_error_deg":
        y = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        norms = np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-12)
        cos = np.clip(np.sum(pred / norms * y, axis=1), -1.0, 1.0)
        return float(np.mean(np.arccos(cos)) * 180.0 / math.pi)
    if kind.metric == "macro_accuracy":
        y = np.asarray(label).reshape(-1).astype(np.int64)
        hard = np.argmax(pred, axis=1)
        accs = []
        for c in range(kind.output_dim):
            mask = y == c
            if mask.any():
                accs.append(float(np.mean(hard[mask] == c)))
        return float(np.mean(accs))
    raise ValueError(f"unknown metric {kind.metric!r}")


def evaluate(params: SegmentedParams, arch: ModelArch, data: DataSplit,
             tasks, client_id: int | str = "GLOBAL") -> list[MetricRecord]:
    """Metric records for one parameter vector on one data split.

    The same (params, data) pair yields identical records regardless of
    whether the split is later labeled global or personal; split labels are
    attached by the caller.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    tasks = sort_tasks(tasks)
    preds = predict(params, arch, data.x, tasks)
    records = []
    for t in tasks:
        kind = TASK_KINDS[t]
        value = metric_value(t, preds[t], data.labels[t])
        records.append(MetricRecord(client_id, t, kind.metric, value, kind.lower_is_better))
    return records


# ---------------------------------------------------------------------------
# improvement versus the local-training target
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskImprovement:
    task: str
    m_fed: float
    m_target: float
    lower_is_better: bool
    weight: float = 1.0


@dataclass
class ImprovementReport:
    """Inputs and result of the weighted relative-improvement score."""

    tasks: list[TaskImprovement]
    delta: float = field(init=False)

    def __post_init__(self):
        self.delta = delta_percent(
            [t.m_fed for t in self.tasks],
            [t.m_target for t in self.tasks],
            [t.lower_is_better for t in self.tasks],
            [t.weight for t in self.tasks],
        )

    def to_json(self) -> dict:
        return {
            "delta_percent": self.delta,
            "tasks": [
                {"task": t.task, "m_fed": t.m_fed, "m_target": t.m_target,
                 "lower_is_better": t.lower_is_better, "weight": t.weight}
                for t in self.tasks
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ImprovementReport":
        return cls([
            TaskImprovement(d["task"], d["m_fed"], d["m_target"],
                            d["lower_is_better"], d["weight"])
            for d in data["tasks"]
        ])


def delta_percent(m_fed: Sequence[float], m_target: Sequence[float],
                  lower_is_better: Sequence[bool],
                  weights: Sequence[float] | None = None) -> float:
    """Signed weighted mean of per-task relative change, in percent.

    Each task contributes (-1)^l * (M_fed - M_target) / M_target where l is 1
    for lower-is-better metrics, so positive output always means improvement.
    Tasks get equal weight unless stated otherwise.
    """
    n = len(m_fed)
    if not (n == len(m_target) == len(lower_is_better)):
        raise ValueError("per-task inputs must have equal lengths")
    if weights is None:
        weights = [1.0] * n
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != n or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    total = 0.0
    for fed, target, lower, wi in zip(m_fed, m_target, lower_is_better, w):
        if target == 0:
            raise ValueError("target metric is zero; relative change undefined")
        sign = -1.0 if lower else 1.0
        total += wi * sign * (fed - target) / target
    return float(total / w.sum() * 100.0)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank with Bonferroni correction
# ---------------------------------------------------------------------------

def average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n in ascending order, ties replaced by their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float
    n: int            # non-zero differences used
    w_plus: float
    w_minus: float
    degenerate: bool = False
    method: str = "exact"


EXACT_ENUMERATION_LIMIT = 25


def _exact_tail_probability(ranks2: np.ndarray, threshold2: int) -> float:
    """P(W+ <= threshold) under the signed-rank null, with ranks doubled to
    integers so tied (half-unit) ranks enumerate exactly."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    thresh = min(threshold2, total)
    return float(counts[:thresh + 1].sum()) / float(2 ** len(ranks2))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Two-sided paired signed-rank test of x versus y.

    Zero differences are discarded; |d| ties get average ranks.  With n <= 25
    non-zero differences the p-value is exact by enumerating all 2^n sign
    assignments (via subset-sum counting); beyond that a normal approximation
    with continuity and tie corrections is used.  If every difference is
    zero the result is flagged degenerate with p = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d with equal lengths")
    d = y - x
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, 0.0, 0.0, degenerate=True, method="degenerate")
    if n < 5:
        raise ValueError(f"need >= 5 non-zero differences, got {n}")

    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)

    if n <= EXACT_ENUMERATION_LIMIT:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        p = 2.0 * _exact_tail_probability(ranks2, int(round(2.0 * stat)))
        return WilcoxonResult(stat, min(1.0, p), n, w_plus, w_minus, method="exact")

    mu = n * (n + 1) / 4.0
    sigma_sq = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    sigma_sq -= float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (stat - mu + 0.5) / math.sqrt(sigma_sq)
    p = 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))
    return WilcoxonResult(stat, min(1.0, p), n, w_plus, w_minus, method="normal")


def bonferroni(raw_p: Sequence[float], m: int) -> list[float]:
    """Family-wise correction: adjusted = min(1, p * m) for m comparisons."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return [min(1.0, float(p) * m) for p in raw_p]


@dataclass(frozen=True)
class StatTestResult:
    pair: tuple[str, str]
    raw_p: float
    adjusted_p: float
    statistic: float
    n: int
    degenerate: bool = False


def pairwise_wilcoxon(observations: dict[str, np.ndarray]) -> list[StatTestResult]:
    """All-pairs signed-rank tests over paired observation vectors, with the
    Bonferroni factor m = number of pairs."""
    names = sorted(observations)
    pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    m = len(pairs)
    results = []
    for a, b in pairs:
        res = wilcoxon_signed_rank(observations[a], observations[b])
        adj = bonferroni([res.p_value], m)[0]
        results.append(StatTestResult((a, b), res.p_value, adj, res.statistic,
                                      res.n, res.degenerate))
    return results


# ---------------------------------------------------------------------------
# Friedman test and Nemenyi critical difference
# ---------------------------------------------------------------------------

# Two-tailed Nemenyi critical values q_alpha for k = 2..20 compared methods:
# the studentized range quantile at infinite dof divided by sqrt(2), as
# tabulated for critical-difference diagrams (Demsar, JMLR 7, 2006).
_NEMENYI_Q = {
    0.05: (1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320,
           3.030879, 3.101730, 3.163684, 3.218654, 3.268004, 3.312739,
           3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073,
           3.543799),
    0.01: (2.575829, 2.913494, 3.113250, 3.254686, 3.363740, 3.452213,
           3.526470, 3.590338, 3.646292, 3.696021, 3.740733, 3.781318,
           3.818450, 3.852654, 3.884343, 3.913850, 3.941446, 3.967357,
           3.991769),
    0.10: (1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732,
           2.779884, 2.854606, 2.919889, 2.977768, 3.029694, 3.076733,
           3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224,
           3.319233),
}


@dataclass
class CDReport:
    names: list[str]
    avg_ranks: list[float]
    n_blocks: int
    k: int
    statistic: float
    p_value: float
    cd: float
    alpha: float
    cliques: list[list[str]]

    def to_json(self) -> dict:
        return {
            "names": self.names,
            "avg_ranks": self.avg_ranks,
            "n_blocks": self.n_blocks,
            "k": self.k,
            "friedman_statistic": self.statistic,
            "friedman_p": self.p_value,
            "critical_difference": self.cd,
            "alpha": self.alpha,
            "cliques": self.cliques,
        }


def nemenyi_critical_difference(k: int, n_blocks: int, alpha: float = 0.05) -> float:
    if alpha not in _NEMENYI_Q:
        raise ValueError(f"alpha must be one of {sorted(_NEMENYI_Q)}")
    table = _NEMENYI_Q[alpha]
    if not 2 <= k <= len(table) + 1:
        raise ValueError(f"k={k} outside the tabulated range 2..{len(table) + 1}")
    return table[k - 2] * math.sqrt(k * (k + 1) / (6.0 * n_blocks))


def friedman_nemenyi(scores: np.ndarray, alpha: float = 0.05,
                     lower_is_better=False, names: Sequence[str] | None = None) -> CDReport:
    """Average-rank comparison of k baselines over N blocks.

    `scores` is (N, k); `lower_is_better` is a scalar or per-block array
    saying which direction wins in each block (blocks may mix metrics).
    Rank 1 is best.  The chi-square Friedman statistic uses the classic
    12N/(k(k+1)) * (sum R_j^2 - k(k+1)^2/4) form; cliques are maximal sets of
    baselines whose average-rank spread is within the critical difference.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be a 2-d (blocks x baselines) matrix")
    n_blocks, k = scores.shape
    if n_blocks < 2 or k < 2:
        raise ValueError("need at least 2 blocks and 2 baselines")
    if names is None:
        names = [f"baseline_{j}" for j in range(k)]
    names = list(names)
    if len(names) != k:
        raise ValueError("need one name per baseline column")

    lib = np.broadcast_to(np.asarray(lower_is_better, dtype=bool), (n_blocks,))
    rank_rows = np.empty_like(scores)
    for i in range(n_blocks):
        directed = scores[i] if lib[i] else -scores[i]
        rank_rows[i] = average_ranks(directed)
    avg = rank_rows.mean(axis=0)

    stat = 12.0 * n_blocks / (k * (k + 1)) * (float(np.sum(avg ** 2)) - k * (k + 1) ** 2 / 4.0)
    p = float(chi2.sf(stat, k - 1))
    cd = nemenyi_critical_difference(k, n_blocks, alpha)

    order = np.argsort(avg, kind="stable")
    cliques: list[list[int]] = []
    for i in range(k):
        group = [order[i]]
        for j in range(i + 1, k):
            if avg[order[j]] - avg[order[i]] <= cd:
                group.append(order[j])
            else:
                break
        if len(group) > 1 and not any(set(group) <= set(g) for g in cliques):
            cliques.append(group)

    return CDReport(
        names=names,
        avg_ranks=[float(a) for a in avg],
        n_blocks=n_blocks,
        k=k,
        statistic=float(stat),
        p_value=p,
        cd=float(cd),
        alpha=alpha,
        cliques=[[names[j] for j in g] for g in cliques],
    )
