"""Accuracy metrics, detection metrics and latency benchmarking."""

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def _pair(exact, est):
    a = np.asarray(exact, dtype=np.float64)
    b = np.asarray(est, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValidationError("empty distance vectors")
    return a, b


def mae(exact, est):
    """Mean absolute component difference of two distance vectors."""
    a, b = _pair(exact, est)
    return float(np.mean(np.abs(a - b)))


def mape(exact, est):
    """Mean of ``|exact - est| / exact`` over entries with ``exact > 0``.

    Returns ``(value, n_excluded)``; zero exact entries are skipped and counted.
    """
    a, b = _pair(exact, est)
    keep = a != 0
    if not keep.any():
        raise ValidationError("all exact distances are zero; MAPE undefined")
    return float(np.mean(np.abs(a[keep] - b[keep]) / a[keep])), int(a.size - keep.sum())


def lower_median(values):
    """Median that picks the lower-middle element for even counts."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValidationError("median of an empty set")
    return float(v[(v.size - 1) // 2])


@dataclass
class ErrorReport:
    per_query_mae: np.ndarray
    per_query_mape: np.ndarray
    mape_excluded: int
    bucket_edges: list
    bucket_mae: np.ndarray
    mean_mae: float = field(init=False)
    median_mae: float = field(init=False)
    mean_mape: float = field(init=False)
    median_mape: float = field(init=False)

    def __post_init__(self):
        self.mean_mae = float(np.mean(self.per_query_mae))
        self.median_mae = lower_median(self.per_query_mae)
        finite = self.per_query_mape[np.isfinite(self.per_query_mape)]
        self.mean_mape = float(np.mean(finite)) if finite.size else float("nan")
        self.median_mape = lower_median(finite) if finite.size else float("nan")

    @property
    def n_queries(self):
        return self.per_query_mae.size

    def summary(self):
        out = {"n_queries": int(self.n_queries), "mae_mean": self.mean_mae, "mae_median": self.median_mae,
               "mape_mean": self.mean_mape, "mape_median": self.median_mape,
               "mape_excluded": self.mape_excluded}
        for (lo, hi), v in zip(self.bucket_edges, self.bucket_mae):
            out[f"mae_k{lo}_{hi}"] = float(v)
        return out


def error_report_arrays(exact, est, bucket=10):
    """Build an :class:`ErrorReport` from ``(m, k)`` exact and estimated matrices."""
    E = np.atleast_2d(np.asarray(exact, dtype=np.float64))
    H = np.atleast_2d(np.asarray(est, dtype=np.float64))
    if E.shape != H.shape:
        raise ValidationError(f"shape mismatch: {E.shape} vs {H.shape}")
    if E.shape[0] == 0:
        raise ValidationError("error report needs at least one query")
    diff = np.abs(E - H)
    per_mae = diff.mean(axis=1)
    pos = E != 0
    excluded = int(E.size - pos.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(pos, diff / np.where(pos, E, 1.0), 0.0)
        cnt = pos.sum(axis=1)
        per_mape = np.where(cnt > 0, rel.sum(axis=1) / np.maximum(cnt, 1), np.nan)
    k = E.shape[1]
    edges = [(s + 1, min(s + bucket, k)) for s in range(0, k, bucket)]
    bmae = np.array([diff[:, lo - 1:hi].mean() for lo, hi in edges])
    return ErrorReport(per_mae, per_mape, excluded, edges, bmae)


def error_report(queries, exact, estimator, bucket=10):
    """Error report of ``estimator`` against exact vectors for ``queries``.

    ``exact`` is either an ``(m, k_max)`` matrix or any object with an
    ``estimate_many`` method (such as an exact estimator).
    """
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise ValidationError("error report needs a non-empty query matrix")
    truth = exact.estimate_many(Q) if hasattr(exact, "estimate_many") else np.asarray(exact)
    return error_report_arrays(truth, estimator.estimate_many(Q), bucket)


@dataclass(frozen=True)
class DetectionScore:
    precision: float
    recall: float
    precision_defined: bool = True


def precision_recall(detected, truth):
    """Precision and recall of a detected index set against the true set.

    With nothing detected, precision is reported as 1 when the truth set is
    empty too and 0 otherwise; ``precision_defined`` is False in both cases.
    Recall of an empty truth set is 1.
    """
    det = set(int(i) for i in np.asarray(list(detected)).ravel())
    tru = set(int(i) for i in np.asarray(list(truth)).ravel())
    tp = len(det & tru)
    recall = tp / len(tru) if tru else 1.0
    if not det:
        return DetectionScore(1.0 if not tru else 0.0, recall, False)
    return DetectionScore(tp / len(det), recall)


@dataclass(frozen=True)
class Latency:
    mean_us: float
    median_us: float
    iters: int

    def as_dict(self):
        return {"mean_us": self.mean_us, "median_us": self.median_us, "iters": self.iters}


def bench(probe, queries, warmup=100, iters=1000):
    """Per-call wall-clock latency of ``probe(q)`` in microseconds.

    Queries are taken round-robin from ``queries``.
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64))
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise ValidationError("bench needs a non-empty query matrix")
    m = Q.shape[0]
    for i in range(warmup):
        probe(Q[i % m])
    times = np.empty(iters)
    clock = time.perf_counter_ns
    for i in range(iters):
        q = Q[i % m]
        t0 = clock()
        probe(q)
        times[i] = clock() - t0
    times /= 1000.0
    return Latency(float(times.mean()), lower_median(times), iters)


# ----------------------------------------------------------------- output

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(rows, columns):
    """CSV text for a list of dicts, columns in the given order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def to_table(rows, columns):
    """Aligned plain-text table; floats printed with 6 significant digits."""
    def cell(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(b[i]) for b in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.rjust(w) for v, w in zip(b, widths)).rstrip())
    return "\n".join(lines) + "\n"
