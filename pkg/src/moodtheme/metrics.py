"""Multi-label evaluation: PR-AUC, ROC-AUC, F-score, precision, recall (macro and micro)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# (report attribute, printed label) in the order of the published results table
METRIC_ROWS = (
    ("pr_auc_macro", "PR-AUC-macro"),
    ("roc_auc_macro", "ROC-AUC-macro"),
    ("f_macro", "F-score-macro"),
    ("precision_macro", "precision-macro"),
    ("recall_macro", "recall-macro"),
    ("pr_auc_micro", "PR-AUC-micro"),
    ("roc_auc_micro", "ROC-AUC-micro"),
    ("f_micro", "F-score-micro"),
    ("precision_micro", "precision-micro"),
    ("recall_micro", "recall-micro"),
)


class UndefinedMetric(ValueError):
    """The metric has no value for this truth vector (e.g. no positives)."""


def _validate(scores, truth):
    scores = np.asarray(scores, dtype=float).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise ValueError(f"scores {scores.shape} and truth {truth.shape} differ in length")
    if not np.all((truth == 0) | (truth == 1)):
        raise ValueError("truth must be binary")
    return scores, truth.astype(bool)


def _tie_groups(scores):
    """Indices sorting ``scores`` descending and the end offset of each tie group."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    ends = np.flatnonzero(np.diff(s) != 0)
    return order, np.append(ends, s.size - 1)


def roc_auc(scores, truth) -> float:
    """P(score_pos > score_neg) with ties counted one half."""
    scores, truth = _validate(scores, truth)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC-AUC needs at least one positive and one negative")
    # midranks (1-based, ascending) of the positives
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size)
    starts = np.flatnonzero(np.r_[True, np.diff(s) != 0])
    stops = np.r_[starts[1:], s.size]
    for a, b in zip(starts, stops):
        ranks[a:b] = 0.5 * (a + 1 + b)
    rank_pos = ranks[truth[order]].sum()
    return float((rank_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pr_auc(scores, truth) -> float:
    """Average precision: sum over descending distinct thresholds of ΔR·P."""
    scores, truth = _validate(scores, truth)
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise UndefinedMetric("PR-AUC needs at least one positive")
    order, ends = _tie_groups(scores)
    tp = np.cumsum(truth[order])[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(delta * precision))


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros(np.broadcast(a, b).shape)
    np.divide(a, b, out=out, where=b != 0)
    return out


@dataclass
class PRF:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    micro_precision: float
    micro_recall: float
    micro_f1: float


def _prf(tp, fp, fn):
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    f = _safe_div(2 * p * r, p + r)
    return p, r, f


def prf_at_threshold(scores, truth, threshold: float = 0.5) -> PRF:
    """Per-class and pooled precision/recall/F1 for predictions ``scores >= threshold``.

    0/0 is taken as 0 everywhere.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    truth = np.atleast_2d(np.asarray(truth)).astype(bool)
    if scores.shape != truth.shape:
        raise ValueError(f"scores {scores.shape} and truth {truth.shape} differ")
    pred = scores >= threshold
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    p, r, f = _prf(tp, fp, fn)
    mp, mr, mf = _prf(tp.sum(), fp.sum(), fn.sum())
    return PRF(tp, fp, fn, p, r, f, float(mp), float(mr), float(mf))


@dataclass
class MetricsReport:
    pr_auc_macro: float
    roc_auc_macro: float
    f_macro: float
    precision_macro: float
    recall_macro: float
    pr_auc_micro: float
    roc_auc_micro: float
    f_micro: float
    precision_micro: float
    recall_micro: float
    threshold: float = 0.5
    tags: list[str] = field(default_factory=list)
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    undefined: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [(label, getattr(self, attr)) for attr, label in METRIC_ROWS]

    def to_text(self) -> str:
        lines = [f"{'metric':<18}{'value':>10}", "-" * 28]
        lines += [f"{label:<18}{value:>10.6f}" for label, value in self.rows()]
        lines.append(f"(threshold {self.threshold:g}")
        lines[-1] += f"; undefined classes excluded from AUC macro: {', '.join(self.undefined)})" \
            if self.undefined else ")"
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for label, value in self.rows():
            w.writerow([label, repr(float(value))])
        return buf.getvalue()


def evaluate(scores, truth, threshold: float = 0.5, tags: list[str] | None = None) -> MetricsReport:
    """All ten table metrics for an n_tracks × n_labels score/truth pair.

    Macro AUCs average the classes where the metric is defined; classes left
    out are listed in ``report.undefined``.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    truth = np.atleast_2d(np.asarray(truth))
    if scores.shape != truth.shape:
        raise ValueError(f"scores {scores.shape} and truth {truth.shape} differ")
    if not np.all((truth == 0) | (truth == 1)):
        raise ValueError("truth must be binary")
    n_labels = scores.shape[1]
    tags = list(tags) if tags is not None else [f"class{i}" for i in range(n_labels)]
    if len(tags) != n_labels:
        raise ValueError(f"{len(tags)} tag names for {n_labels} columns")
    prf = prf_at_threshold(scores, truth, threshold)
    per_class: dict[str, dict[str, float]] = {}
    rocs, prs, undefined = [], [], []
    for j, tag in enumerate(tags):
        row = {"precision": float(prf.precision[j]), "recall": float(prf.recall[j]),
               "f1": float(prf.f1[j]), "support": float(truth[:, j].sum())}
        try:
            row["roc_auc"] = roc_auc(scores[:, j], truth[:, j])
            rocs.append(row["roc_auc"])
        except UndefinedMetric:
            row["roc_auc"] = float("nan")
            undefined.append(tag)
        try:
            row["pr_auc"] = pr_auc(scores[:, j], truth[:, j])
            prs.append(row["pr_auc"])
        except UndefinedMetric:
            row["pr_auc"] = float("nan")
        per_class[tag] = row
    if not rocs or not prs:
        raise UndefinedMetric("every class is undefined for ROC-AUC or PR-AUC")
    return MetricsReport(
        pr_auc_macro=float(np.mean(prs)),
        roc_auc_macro=float(np.mean(rocs)),
        f_macro=float(prf.f1.mean()),
        precision_macro=float(prf.precision.mean()),
        recall_macro=float(prf.recall.mean()),
        pr_auc_micro=pr_auc(scores.ravel(), truth.ravel()),
        roc_auc_micro=roc_auc(scores.ravel(), truth.ravel()),
        f_micro=prf.micro_f1,
        precision_micro=prf.micro_precision,
        recall_micro=prf.micro_recall,
        threshold=threshold,
        tags=tags,
        per_class=per_class,
        undefined=undefined,
    )


def macro_roc_auc(scores, truth) -> float:
    """Mean ROC-AUC over classes where it is defined (nan if none)."""
    scores = np.atleast_2d(scores)
    truth = np.atleast_2d(truth)
    vals = []
    for j in range(scores.shape[1]):
        try:
            vals.append(roc_auc(scores[:, j], truth[:, j]))
        except UndefinedMetric:
            pass
    return float(np.mean(vals)) if vals else float("nan")


# --- prediction files ---------------------------------------------------------

def write_predictions(path, track_ids: list[str], tags: list[str], scores: np.ndarray) -> None:
    scores = np.asarray(scores, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["track_id"] + [f"score_{t}" for t in tags])
        for tid, row in zip(track_ids, scores):
            w.writerow([tid] + [repr(float(v)) for v in row])


def read_predictions(path) -> tuple[list[str], list[str], np.ndarray]:
    """Parse ``track_id,score_<tag>,...``; returns (track ids, tags, scores)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or not rows[0] or rows[0][0] != "track_id":
        raise ValueError(f"{path}: header must start with 'track_id'")
    tags = [h[len("score_"):] if h.startswith("score_") else h for h in rows[0][1:]]
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(tags) + 1:
            raise ValueError(f"{path}: line {lineno}: expected {len(tags) + 1} fields, got {len(row)}")
        ids.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-numeric score") from None
    return ids, tags, np.array(values).reshape(len(ids), len(tags))


def align_truth(pred_ids: list[str], pred_tags: list[str], manifest) -> np.ndarray:
    """Truth matrix from a manifest, rows in prediction order, columns in prediction tag order."""
    labels = manifest.labels()
    row_of = {e.track_id: i for i, e in enumerate(manifest.entries)}
    col_of = {t: j for j, t in enumerate(manifest.tag_vocabulary)}
    missing = [t for t in pred_ids if t not in row_of]
    if missing:
        raise ValueError(f"predicted tracks absent from manifest: {missing[:5]}")
    out = np.zeros((len(pred_ids), len(pred_tags)))
    for j, tag in enumerate(pred_tags):
        if tag in col_of:
            out[:, j] = labels[[row_of[t] for t in pred_ids], col_of[tag]]
    return out


def write_report_csv(path, report: MetricsReport) -> None:
    Path(path).write_text(report.to_csv(), encoding="utf-8")
