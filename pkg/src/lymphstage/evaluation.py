"""
Diagnostic-accuracy statistics for region detection, staging and the
Limited/Advanced split.

Note on naming: ``precision`` is TP/(TP+FP); ``accuracy`` is the conventional
(TP+TN)/total used in all result tables. Metrics whose denominator is zero are
``None`` (rendered as "N/A"), never 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import sqrt
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .regions import DISPLAY_NAMES, REGIONS, RegionId
from .staging import Group, InvolvementProfile, Stage, StagingResult, therapeutic_group

STAGES_4 = (Stage.I, Stage.II, Stage.III, Stage.IV)
STAGES_5 = (Stage.NoInvolvement,) + STAGES_4


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def swapped(self) -> "ConfusionCounts":
        """The same table with the negative class treated as positive."""
        return ConfusionCounts(self.tn, self.fn, self.fp, self.tp)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class Metric:
    value: float | None
    ci_low: float | None = None
    ci_high: float | None = None

    @property
    def defined(self) -> bool:
        return self.value is not None

    def to_dict(self) -> dict:
        return {"value": self.value, "ci_low": self.ci_low, "ci_high": self.ci_high}

    def percent(self, digits: int = 2) -> str:
        if self.value is None:
            return "N/A"
        s = f"{100 * self.value:.{digits}f}"
        if self.ci_low is not None:
            s += f" ({100 * self.ci_low:.{digits}f} - {100 * self.ci_high:.{digits}f})"
        return s


@dataclass(frozen=True)
class MetricSet:
    accuracy: Metric
    precision: Metric
    recall: Metric
    specificity: Metric
    f1: Metric
    ppv: Metric
    npv: Metric
    counts: ConfusionCounts

    @property
    def sensitivity(self) -> Metric:
        return self.recall

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).to_dict()
             for k in ("accuracy", "precision", "recall", "specificity", "f1", "ppv", "npv")}
        d["sensitivity"] = self.recall.to_dict()
        d["counts"] = self.counts.to_dict()
        return d


# --------------------------------------------------------------------------
# Confidence intervals
# --------------------------------------------------------------------------

def _check_counts(successes: int, n: int):
    if int(successes) != successes or int(n) != n:
        raise ValueError("successes and n must be integers")
    if n < 1 or successes < 0 or successes > n:
        raise ValueError(f"need 0 <= successes <= n and n >= 1, got successes={successes}, n={n}")


def clopper_pearson_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial interval from beta quantiles; the bound is 0 (or 1)
    when no (or every) trial succeeded."""
    _check_counts(successes, n)
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    alpha = 1.0 - level
    low = 0.0 if successes == 0 else float(stats.beta.ppf(alpha / 2, successes, n - successes + 1))
    high = 1.0 if successes == n else float(stats.beta.ppf(1 - alpha / 2, successes + 1, n - successes))
    return low, high


def wald_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval clipped to [0, 1]."""
    _check_counts(successes, n)
    p = successes / n
    z = float(stats.norm.ppf(0.5 + level / 2))
    half = z * sqrt(p * (1 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


CI_METHODS = {"clopper-pearson": clopper_pearson_ci, "wald": wald_ci}


def proportion(successes: int, n: int, method: str = "clopper-pearson", level: float = 0.95) -> Metric:
    if n == 0:
        return Metric(None)
    lo, hi = CI_METHODS[method](successes, n, level)
    p = successes / n
    return Metric(p, min(lo, p), max(hi, p))


def _bootstrap_ci(counts: ConfusionCounts, fn, level: float, n_boot: int, seed: int):
    """Percentile bootstrap over the multinomial of the four cells."""
    if counts.total == 0:
        return None, None
    rng = np.random.default_rng(seed)
    probs = np.array([counts.tp, counts.fp, counts.fn, counts.tn], dtype=float) / counts.total
    draws = rng.multinomial(counts.total, probs, size=n_boot)
    vals = [fn(ConfusionCounts(*map(int, d))) for d in draws]
    vals = np.array([v for v in vals if v is not None])
    if vals.size == 0:
        return None, None
    a = (1 - level) / 2
    return float(np.quantile(vals, a)), float(np.quantile(vals, 1 - a))


def f1_value(c: ConfusionCounts) -> float | None:
    d = 2 * c.tp + c.fp + c.fn
    return None if d == 0 else 2 * c.tp / d


def macro_f1_value(c: ConfusionCounts) -> float | None:
    a, b = f1_value(c), f1_value(c.swapped())
    if a is None or b is None:
        return None
    return (a + b) / 2


def _stat_metric(c: ConfusionCounts, fn, level, n_boot, seed) -> Metric:
    v = fn(c)
    if v is None:
        return Metric(None)
    lo, hi = _bootstrap_ci(c, fn, level, n_boot, seed)
    if lo is None:
        return Metric(v)
    return Metric(v, min(lo, v), max(hi, v))


def binary_metrics(c: ConfusionCounts, ci_method: str = "clopper-pearson", level: float = 0.95,
                   n_boot: int = 2000, seed: int = 0) -> MetricSet:
    """Accuracy, precision, recall, specificity, F1, PPV and NPV with 95% CIs.

    Proportions use ``ci_method``; F1 uses a seeded percentile bootstrap.
    """
    if c.total < 1:
        raise ValueError("confusion counts are all zero")
    if ci_method not in CI_METHODS:
        raise ValueError(f"unknown CI method {ci_method!r}")
    prec = proportion(c.tp, c.tp + c.fp, ci_method, level)
    return MetricSet(
        accuracy=proportion(c.tp + c.tn, c.total, ci_method, level),
        precision=prec,
        recall=proportion(c.tp, c.tp + c.fn, ci_method, level),
        specificity=proportion(c.tn, c.tn + c.fp, ci_method, level),
        f1=_stat_metric(c, f1_value, level, n_boot, seed),
        ppv=prec,
        npv=proportion(c.tn, c.tn + c.fn, ci_method, level),
        counts=c,
    )


def macro_f1(c: ConfusionCounts, level: float = 0.95, n_boot: int = 2000, seed: int = 0) -> Metric:
    """Mean of the positive-class and negative-class F1."""
    return _stat_metric(c, macro_f1_value, level, n_boot, seed)


# --------------------------------------------------------------------------
# Kappa
# --------------------------------------------------------------------------

def weighted_kappa(matrix, weights: str = "quadratic") -> float | None:
    """Quadratically weighted kappa of a square confusion matrix (rows =
    reference, columns = prediction). ``None`` when chance disagreement is
    zero (e.g. all mass in one reference and one predicted class)."""
    if weights != "quadratic":
        raise ValueError("only quadratic weights are supported")
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ValueError("kappa needs a square matrix of at least 2 classes")
    if (m < 0).any() or not np.isfinite(m).all():
        raise ValueError("matrix entries must be finite and non-negative")
    total = m.sum()
    if total <= 0:
        raise ValueError("matrix is empty")
    k = m.shape[0]
    i, j = np.indices(m.shape)
    w = (i - j) ** 2 / (k - 1) ** 2
    observed = m / total
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    denom = float((w * expected).sum())
    if denom <= 0:
        return None
    return 1.0 - float((w * observed).sum()) / denom


# --------------------------------------------------------------------------
# Cohort evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceRow:
    patient_id: str
    involved: frozenset[RegionId]
    extranodal: bool
    stage: Stage


class ReferenceTableError(ValueError):
    pass


def read_reference_csv(path_or_text) -> dict[str, ReferenceRow]:
    """Reference table: ``patient_id, region_1..region_21, extranodal, stage``.
    Region columns may also be named by region (e.g. ``NeckL``)."""
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text), skipinitialspace=True)
    if reader.fieldnames is None:
        raise ReferenceTableError("reference CSV is empty")
    fields = [f.strip() for f in reader.fieldnames]
    cols = {}
    for i, r in enumerate(REGIONS):
        for name in (f"region_{i + 1}", r.value):
            if name in fields:
                cols[r] = name
                break
        else:
            raise ReferenceTableError(f"reference CSV has no column for region {i + 1} ({r.value})")
    for need in ("patient_id", "extranodal", "stage"):
        if need not in fields:
            raise ReferenceTableError(f"reference CSV lacks column {need!r}")
    rows: dict[str, ReferenceRow] = {}
    for line_no, raw in enumerate(reader, start=2):
        rec = {k.strip(): (v or "").strip() for k, v in raw.items() if k is not None}
        pid = rec["patient_id"]
        if pid in rows:
            raise ReferenceTableError(f"duplicate patient_id {pid!r} on line {line_no}")
        try:
            flags = {r: int(rec[c]) for r, c in cols.items()}
            extranodal = int(rec["extranodal"])
            stage_num = int(rec["stage"])
            if not 1 <= stage_num <= 4 or not set(flags.values()) | {extranodal} <= {0, 1} or not pid:
                raise ValueError
            involved = frozenset(r for r, v in flags.items() if v == 1)
            rows[pid] = ReferenceRow(pid, involved, extranodal == 1, Stage.from_number(stage_num))
        except (ValueError, KeyError):
            raise ReferenceTableError(f"malformed reference row on line {line_no}") from None
    return rows


def write_reference_csv(rows: Iterable[ReferenceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id"] + [f"region_{i + 1}" for i in range(len(REGIONS))] + ["extranodal", "stage"])
        for row in rows:
            if row.stage is Stage.NoInvolvement:
                raise ReferenceTableError(f"reference stage for {row.patient_id!r} must be I-IV")
            w.writerow([row.patient_id] + [int(r in row.involved) for r in REGIONS]
                       + [int(row.extranodal), STAGES_5.index(row.stage)])


@dataclass
class EvalReport:
    per_region: dict[RegionId, ConfusionCounts]
    pooled: ConfusionCounts
    stage_labels: tuple[Stage, ...]
    staging_confusion: np.ndarray
    staging_accuracy: Metric
    kappa: float | None
    group_counts: ConfusionCounts
    n_patients: int
    ci_method: str = "clopper-pearson"
    region_metrics: dict[RegionId, MetricSet] = field(default_factory=dict)
    pooled_metrics: MetricSet | None = None
    group_metrics: MetricSet | None = None
    group_macro_f1: Metric | None = None
    per_stage_metrics: dict[Stage, MetricSet] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "ci_method": self.ci_method,
            "regions": {
                r.value: {"counts": self.per_region[r].to_dict(),
                          "positive_cases": self.per_region[r].tp + self.per_region[r].fn,
                          "metrics": self.region_metrics[r].to_dict()}
                for r in REGIONS
            },
            "pooled_regions": {"counts": self.pooled.to_dict(), "metrics": self.pooled_metrics.to_dict()},
            "staging": {
                "labels": [s.value for s in self.stage_labels],
                "confusion_matrix": self.staging_confusion.astype(int).tolist(),
                "accuracy": self.staging_accuracy.to_dict(),
                "weighted_kappa": self.kappa,
                "per_stage": {s.value: m.to_dict() for s, m in self.per_stage_metrics.items()},
            },
            "limited_vs_advanced": {
                "positive_class": "Advanced",
                "counts": self.group_counts.to_dict(),
                "metrics": self.group_metrics.to_dict(),
                "macro_f1": self.group_macro_f1.to_dict(),
            },
        }

    def region_table_csv(self) -> str:
        """Per-region table with the same columns as the published per-region
        results (plus TP/TN)."""
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["region", "accuracy", "sensitivity", "specificity", "false_positive", "false_negative",
                    "positive_cases", "f1", "tp", "tn"])
        for r in REGIONS:
            c, m = self.per_region[r], self.region_metrics[r]
            w.writerow([DISPLAY_NAMES[r], m.accuracy.percent(), m.recall.percent(), m.specificity.percent(),
                        c.fp, c.fn, c.tp + c.fn, m.f1.percent(), c.tp, c.tn])
        return out.getvalue()

    def confusion_text(self) -> str:
        labels = [s.value for s in self.stage_labels]
        width = max(6, *(len(s) for s in labels)) + 1
        lines = ["reference \\ predicted".ljust(22) + "".join(s.rjust(width) for s in labels)]
        for s, row in zip(labels, self.staging_confusion.astype(int)):
            lines.append(s.ljust(22) + "".join(str(v).rjust(width) for v in row))
        kappa = "undefined" if self.kappa is None else f"{self.kappa:.4f}"
        lines.append(f"staging accuracy: {self.staging_accuracy.percent()}")
        lines.append(f"quadratically weighted kappa: {kappa}")
        return "\n".join(lines) + "\n"


def group_is_advanced(stage: Stage) -> bool:
    return therapeutic_group(stage) is Group.Advanced


def evaluate_cohort(predictions: Sequence[tuple[str, InvolvementProfile, StagingResult]],
                    reference: Mapping[str, ReferenceRow], ci_method: str = "clopper-pearson",
                    seed: int = 0) -> EvalReport:
    """Compare per-patient predictions with the reference standard.

    Limited/Advanced metrics treat Advanced as the positive class; a
    predicted NoInvolvement counts as not Advanced.
    """
    if not predictions:
        raise ValueError("no predictions to evaluate")
    seen: set[str] = set()
    for pid, _, _ in predictions:
        if pid in seen:
            raise ValueError(f"duplicate patient id {pid!r} in predictions")
        seen.add(pid)
        if pid not in reference:
            raise ValueError(f"patient {pid!r} has no reference row")
    cells = {r: [0, 0, 0, 0] for r in REGIONS}
    for pid, profile, _ in predictions:
        ref = reference[pid]
        for r in REGIONS:
            p, t = r in profile.involved, r in ref.involved
            cells[r][0 if p and t else 1 if p else 2 if t else 3] += 1
    per_region = {r: ConfusionCounts(*cells[r]) for r in REGIONS}
    pooled = sum(per_region.values(), ConfusionCounts())

    uses_none = any(res.stage is Stage.NoInvolvement for _, _, res in predictions)
    labels = STAGES_5 if uses_none else STAGES_4
    pos = {s: i for i, s in enumerate(labels)}
    matrix = np.zeros((len(labels), len(labels)), dtype=np.int64)
    g = [0, 0, 0, 0]
    for pid, _, res in predictions:
        ref_stage = reference[pid].stage
        matrix[pos[ref_stage], pos[res.stage]] += 1
        p, t = group_is_advanced(res.stage), group_is_advanced(ref_stage)
        g[0 if p and t else 1 if p else 2 if t else 3] += 1
    group_counts = ConfusionCounts(*g)
    n = len(predictions)
    correct = int(np.trace(matrix))

    per_stage = {}
    for s in STAGES_4:
        i = pos[s]
        tp = int(matrix[i, i])
        fp = int(matrix[:, i].sum()) - tp
        fn = int(matrix[i, :].sum()) - tp
        per_stage[s] = binary_metrics(ConfusionCounts(tp, fp, fn, n - tp - fp - fn), ci_method, seed=seed)

    return EvalReport(
        per_region=per_region,
        pooled=pooled,
        stage_labels=labels,
        staging_confusion=matrix,
        staging_accuracy=proportion(correct, n, ci_method),
        kappa=weighted_kappa(matrix),
        group_counts=group_counts,
        n_patients=n,
        ci_method=ci_method,
        region_metrics={r: binary_metrics(c, ci_method, seed=seed) for r, c in per_region.items()},
        pooled_metrics=binary_metrics(pooled, ci_method, seed=seed),
        group_metrics=binary_metrics(group_counts, ci_method, seed=seed),
        group_macro_f1=macro_f1(group_counts, seed=seed),
        per_stage_metrics=per_stage,
    )


def plot_confusion(report: EvalReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [s.value for s in report.stage_labels]
    m = report.staging_confusion
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(m, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted stage")
    ax.set_ylabel("reference stage")
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ax.text(j, i, str(int(m[i, j])), ha="center", va="center",
                    color="white" if m[i, j] > m.max() / 2 else "black")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
