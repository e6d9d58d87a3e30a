"""Classification metrics, the Wilcoxon signed-rank test and the train/val/test split."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

METRICS = ("accuracy", "f1", "auc", "sensitivity", "specificity")
EXACT_MAX_N = 25


@dataclass
class ScoredExample:
    id: str
    score: float
    label: int


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    auc: float
    sensitivity: float
    specificity: float
    threshold: float = 0.5
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    f1_undefined: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


@dataclass
class SplitSpec:
    test_fraction: float = 0.15
    val_fraction_of_train: float = 0.20
    seed: int = 0

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction_of_train"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass
class WilcoxonResult:
    p_value: float
    w_plus: float
    w_minus: float
    n: int
    method: str
    degenerate: bool = False


def midranks(x):
    """1-based ranks with ties given the average of the positions they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(xs)]))
    ranks = np.empty(len(x))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def _unpack(examples_or_labels, scores):
    if scores is None:
        labels = [e.label for e in examples_or_labels]
        scores = [e.score for e in examples_or_labels]
    else:
        labels = examples_or_labels
    return np.asarray(labels, dtype=np.int64), np.asarray(scores, dtype=np.float64)


def auc(labels, scores=None) -> float:
    """Mann-Whitney AUC with tied pairs counted one half.

    Accepts ``auc(labels, scores)`` or ``auc(list_of_ScoredExample)``.
    """
    labels, scores = _unpack(labels, scores)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs at least one positive and one negative example")
    r = midranks(scores)
    # exact in binary: rank sums are multiples of 1/2
    u = r[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def confusion_metrics(labels, scores=None, threshold: float = 0.5) -> MetricsReport:
    """Threshold metrics (score >= threshold is positive) plus AUC when both classes exist."""
    labels, scores = _unpack(labels, scores)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    n = len(labels)
    f1_undefined = tp + fp + fn == 0
    f1 = 0.0 if f1_undefined else 2 * tp / (2 * tp + fp + fn)
    both = 0 < pos.sum() < n
    return MetricsReport(
        accuracy=(tp + tn) / n,
        f1=f1,
        auc=auc(labels, scores) if both else float("nan"),
        sensitivity=tp / (tp + fn) if tp + fn else float("nan"),
        specificity=tn / (tn + fp) if tn + fp else float("nan"),
        threshold=threshold,
        tp=tp, fp=fp, fn=fn, tn=tn,
        f1_undefined=f1_undefined,
    )


def _exact_upper_tail(doubled_ranks, w2) -> float:
    """P(W+ >= w) under the sign-flip null, ranks given doubled so they are integers."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    counts /= 2.0 ** len(doubled_ranks)
    return float(counts[w2:].sum())


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test with zero differences dropped.

    Exact null distribution (conditional on tied ranks) for n <= 25, otherwise
    the normal approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0.0, 0, "degenerate", degenerate=True)
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    r = midranks(np.abs(d))
    w_plus = float(r[d > 0].sum())
    w_minus = float(r[d < 0].sum())
    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * x)) for x in r]
        total = sum(doubled)
        w2 = int(round(2 * w_plus))
        upper = _exact_upper_tail(doubled, w2)
        lower = _exact_upper_tail(doubled, total - w2)  # P(W+ <= w) by symmetry
        p = min(1.0, 2.0 * min(upper, lower))
        return WilcoxonResult(p, w_plus, w_minus, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(r, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(p, w_plus, w_minus, n, "normal")


@dataclass
class Aggregate:
    mean: dict
    std: dict
    n: int
    std_undefined: bool

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_runs(reports) -> Aggregate:
    """Per-metric sample mean and n-1 standard deviation, folded in run order."""
    if not reports:
        raise ValueError("need at least one report")
    n = len(reports)
    mean, std = {}, {}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        mean[m] = float(np.mean(vals))
        std[m] = float(np.std(vals, ddof=1)) if n > 1 else 0.0
    return Aggregate(mean, std, n, n == 1)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(ids, spec: SplitSpec | None = None):
    """Seeded shuffle into disjoint (train, val, test) lists.

    |test| = round(n * test_fraction); |val| = round(rest * val_fraction_of_train),
    both rounded half up.
    """
    spec = spec or SplitSpec()
    ids = list(ids)
    n = len(ids)
    if n < 5:
        raise ValueError("need at least 5 items to split")
    n_test = _round_half_up(n * spec.test_fraction)
    n_val = _round_half_up((n - n_test) * spec.val_fraction_of_train)
    n_train = n - n_test - n_val
    if min(n_test, n_val, n_train) < 1:
        raise ValueError(f"split sizes train={n_train} val={n_val} test={n_test}: one is empty")
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test:n_test + n_val]
    train = shuffled[n_test + n_val:]
    return train, val, test


def format_table(rows) -> str:
    """Render comparison rows as a fixed-width text table.

    Each row is a dict with keys method, data_type, aggregate (Aggregate) and
    p_value (float or None).
    """
    header = f"{'data type':<14}{'method':<26}{'accuracy':<22}{'F1 score':<22}{'AUC':<22}p-value"
    lines = [header, "-" * len(header)]
    for row in rows:
        agg = row["aggregate"]
        cells = []
        for m in ("accuracy", "f1", "auc"):
            mu, sd = agg.mean[m], agg.std[m]
            cells.append(f"{mu:.3f} ({mu - sd:.3f}-{mu + sd:.3f})")
        p = row.get("p_value")
        p_txt = "" if p is None else ("<0.001" if p < 0.001 else f"{p:.3f}")
        lines.append(f"{row['data_type']:<14}{row['method']:<26}"
                     f"{cells[0]:<22}{cells[1]:<22}{cells[2]:<22}{p_txt}")
    return "\n".join(lines)
