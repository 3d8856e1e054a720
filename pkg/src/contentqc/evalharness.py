"""Agreement and classification metrics over prediction/label datasets.

Covers binary confusion counts with violation as the positive class, the
derived classification metrics, quadratically weighted Cohen's kappa,
Spearman rank correlation, signed bias and MAE between model and human
ratings, per-error-class recall with span overlap, and per-subset
mean/standard-deviation summaries.

Any metric whose denominator is zero is reported as None (an explicit
undefined marker, serialized as JSON null) rather than silently 0: in a
compliance setting a degenerate denominator must be visible, not hidden.

All reductions use math.fsum over inputs in fixed order, so results are
bit-reproducible regardless of how the caller parallelizes sample
evaluation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import (
    DegenerateMarginals,
    DuplicateSample,
    EmptyCounts,
    EmptySubset,
    LengthMismatch,
    MissingSample,
    OutOfRangeScore,
    SchemaError,
    UnknownClass,
    ZeroVariance,
)

logger = logging.getLogger(__name__)

VIOLATION = "violation"
COMPLIANT = "compliant"

ERROR_CLASSES = (
    "Misspelling",
    "ToSplitToMerge",
    "Punctuation",
    "Grammar",
    "InformalNonword",
)


@dataclass(frozen=True)
class ErrorSpan:
    start: int
    end: int
    error_class: str

    def __post_init__(self) -> None:
        if self.error_class not in ERROR_CLASSES:
            raise UnknownClass(f"unknown error class {self.error_class!r}")
        if self.end <= self.start:
            raise ValueError("span end must be greater than start")

    def overlaps(self, other: "ErrorSpan") -> bool:
        return max(self.start, other.start) < min(self.end, other.end)


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    text: str
    gold_label: str
    gold_score: int | None = None
    error_annotations: tuple[ErrorSpan, ...] = ()
    group_id: str | None = None

    def __post_init__(self) -> None:
        if self.gold_label not in (VIOLATION, COMPLIANT):
            raise ValueError(f"gold_label must be violation/compliant, got {self.gold_label!r}")


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    predicted_label: str
    predicted_score: int | None = None
    detected_errors: tuple[ErrorSpan, ...] = ()

    def __post_init__(self) -> None:
        if self.predicted_label not in (VIOLATION, COMPLIANT):
            raise ValueError(
                f"predicted_label must be violation/compliant, got {self.predicted_label!r}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class AgreementStats:
    kappa_qw: float | None
    spearman_rho: float | None
    bias: float
    mae: float


@dataclass(frozen=True)
class ErrorClassRecall:
    error_class: str
    gt_count: int
    detected_count: int
    recall: float | None


@dataclass(frozen=True)
class SubsetStats:
    subset_id: str
    per_sample_accuracy: tuple[float, ...]
    mean: float
    sd: float | None


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


# --------------------------------------------------------------------------
# Confusion and classification metrics
# --------------------------------------------------------------------------

def confusion(preds: Sequence[PredictionRecord],
              golds: Sequence[LabeledSample]) -> ConfusionCounts:
    """Binary confusion counts with violation as the positive class.

    Predictions must cover the gold sample ids exactly once each.
    """
    gold_by_id: dict[str, LabeledSample] = {}
    for gold in golds:
        if gold.sample_id in gold_by_id:
            raise DuplicateSample(f"gold sample {gold.sample_id!r} appears twice")
        gold_by_id[gold.sample_id] = gold
    seen: set[str] = set()
    tp = fp = tn = fn = 0
    for pred in preds:
        if pred.sample_id in seen:
            raise DuplicateSample(f"prediction for {pred.sample_id!r} appears twice")
        seen.add(pred.sample_id)
        gold = gold_by_id.get(pred.sample_id)
        if gold is None:
            raise MissingSample(f"prediction for unknown sample {pred.sample_id!r}")
        positive = gold.gold_label == VIOLATION
        flagged = pred.predicted_label == VIOLATION
        if positive and flagged:
            tp += 1
        elif positive and not flagged:
            fn += 1
        elif not positive and flagged:
            fp += 1
        else:
            tn += 1
    missing = set(gold_by_id) - seen
    if missing:
        raise MissingSample(f"no prediction for samples: {sorted(missing)[:5]}")
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def classification_metrics(c: ConfusionCounts) -> dict[str, float | None]:
    """Accuracy, recall, precision, F1 and specificity from counts.

    Metrics with a zero denominator come back as None, never 0.
    """
    if c.total == 0:
        raise EmptyCounts("confusion counts sum to zero")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "recall": recall,
        "precision": precision,
        "f1": f1,
        "specificity": _ratio(c.tn, c.tn + c.fp),
    }


# --------------------------------------------------------------------------
# Agreement metrics
# --------------------------------------------------------------------------

def _check_paired(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise LengthMismatch(f"vectors differ in length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise LengthMismatch("need at least 2 paired observations")


def weighted_kappa(a: Sequence[int], b: Sequence[int], k: int) -> float:
    """Quadratically weighted Cohen's kappa for ordinal scores in 1..k.

    kappa = 1 - sum(w_ij O_ij) / sum(w_ij E_ij), with w_ij = ((i-j)/(k-1))^2,
    O the observed joint frequencies and E the outer product of the two
    raters' marginals.
    """
    _check_paired(a, b)
    for score in list(a) + list(b):
        if not isinstance(score, int) or not 1 <= score <= k:
            raise OutOfRangeScore(f"score {score!r} outside 1..{k}")
    if len(set(a)) == 1 and set(a) == set(b):
        raise DegenerateMarginals(
            "both raters are constant and equal; expected disagreement is zero")
    n = len(a)
    observed = [[0] * k for _ in range(k)]
    marg_a = [0] * k
    marg_b = [0] * k
    for x, y in zip(a, b):
        observed[x - 1][y - 1] += 1
        marg_a[x - 1] += 1
        marg_b[y - 1] += 1
    num_terms = []
    den_terms = []
    for i in range(k):
        for j in range(k):
            w = ((i - j) / (k - 1)) ** 2
            num_terms.append(w * observed[i][j] / n)
            den_terms.append(w * (marg_a[i] / n) * (marg_b[j] / n))
    denominator = math.fsum(den_terms)
    if denominator == 0:
        raise DegenerateMarginals("expected disagreement mass is zero")
    return 1.0 - math.fsum(num_terms) / denominator


def average_ranks(values: Sequence[float]) -> list[float]:
    """Ranks 1..n with ties assigned the mean of their rank positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for idx in order[i:j + 1]:
            ranks[idx] = mean_rank
        i = j + 1
    return ranks


def _pearson(a: Sequence[float], b: Sequence[float]) -> float:
    mean_a, mean_b = _mean(a), _mean(b)
    da = [x - mean_a for x in a]
    db = [y - mean_b for y in b]
    var_a = math.fsum(x * x for x in da)
    var_b = math.fsum(y * y for y in db)
    if var_a == 0 or var_b == 0:
        raise ZeroVariance("constant vector has no variance")
    cov = math.fsum(x * y for x, y in zip(da, db))
    return cov / math.sqrt(var_a * var_b)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman's rho: Pearson correlation of average-ranked values."""
    _check_paired(a, b)
    return _pearson(average_ranks(a), average_ranks(b))


def bias_mae(llm: Sequence[float], human: Sequence[float]) -> dict[str, float]:
    """Mean signed difference (llm - human) and mean absolute error."""
    if len(llm) != len(human) or len(llm) == 0:
        raise LengthMismatch("vectors must have equal non-zero length")
    diffs = [x - y for x, y in zip(llm, human)]
    return {
        "bias": _mean(diffs),
        "mae": _mean([abs(d) for d in diffs]),
    }


def agreement_stats(llm_scores: Sequence[int], human_scores: Sequence[int],
                    k: int = 5) -> AgreementStats:
    """All four agreement figures in one pass; kappa/rho degrade to None on
    degenerate input instead of failing the whole report."""
    try:
        kappa = weighted_kappa(llm_scores, human_scores, k)
    except DegenerateMarginals:
        kappa = None
    try:
        rho = spearman([float(x) for x in llm_scores], [float(x) for x in human_scores])
    except ZeroVariance:
        rho = None
    bm = bias_mae([float(x) for x in llm_scores], [float(x) for x in human_scores])
    return AgreementStats(kappa_qw=kappa, spearman_rho=rho,
                          bias=bm["bias"], mae=bm["mae"])


# --------------------------------------------------------------------------
# Per-class recall and subset statistics
# --------------------------------------------------------------------------

def per_class_recall(golds: Sequence[LabeledSample],
                     preds: Sequence[PredictionRecord]) -> list[ErrorClassRecall]:
    """Recall per error class: a gold error counts as detected when some
    predicted error on the same sample has the same class and any character
    overlap with its span."""
    preds_by_sample: dict[str, list[ErrorSpan]] = {}
    for pred in preds:
        preds_by_sample.setdefault(pred.sample_id, []).extend(pred.detected_errors)
    gt_counts = {cls: 0 for cls in ERROR_CLASSES}
    detected_counts = {cls: 0 for cls in ERROR_CLASSES}
    for gold in golds:
        candidates = preds_by_sample.get(gold.sample_id, [])
        for annotation in gold.error_annotations:
            gt_counts[annotation.error_class] += 1
            if any(p.error_class == annotation.error_class and p.overlaps(annotation)
                   for p in candidates):
                detected_counts[annotation.error_class] += 1
    return [
        ErrorClassRecall(
            error_class=cls,
            gt_count=gt_counts[cls],
            detected_count=detected_counts[cls],
            recall=_ratio(detected_counts[cls], gt_counts[cls]),
        )
        for cls in ERROR_CLASSES
    ]


def subset_stats(groups: Mapping[str, Sequence[float]]) -> list[SubsetStats]:
    """Mean and sample standard deviation (n-1) of per-sample accuracy for
    each subset. A single-sample subset has an undefined sd."""
    out = []
    for subset_id, values in groups.items():
        if len(values) == 0:
            raise EmptySubset(f"subset {subset_id!r} is empty")
        mean = _mean(values)
        if len(values) >= 2:
            sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))
        else:
            sd = None
        out.append(SubsetStats(
            subset_id=subset_id,
            per_sample_accuracy=tuple(values),
            mean=mean,
            sd=sd,
        ))
    return out


def system_delta(groups_a: Mapping[str, Sequence[float]],
                 groups_b: Mapping[str, Sequence[float]]) -> dict[str, Any]:
    """Per-subset and overall mean-accuracy difference (system A - system B).

    Both systems must report the same subsets; the overall delta is the
    unweighted mean of the per-subset deltas.
    """
    if set(groups_a) != set(groups_b):
        raise EmptySubset("system comparison needs identical subset ids")
    stats_a = {s.subset_id: s for s in subset_stats(groups_a)}
    stats_b = {s.subset_id: s for s in subset_stats(groups_b)}
    per_subset = {sid: stats_a[sid].mean - stats_b[sid].mean for sid in sorted(stats_a)}
    return {
        "per_subset": per_subset,
        "delta": _mean(list(per_subset.values())),
    }


# --------------------------------------------------------------------------
# Fixture loaders (JSON-lines)
# --------------------------------------------------------------------------

def _read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read fixture {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(row, dict):
            raise SchemaError(f"{path}:{lineno}: each line must be an object")
        rows.append(row)
    if not rows:
        raise SchemaError(f"{path}: fixture file is empty")
    return rows


def _parse_spans(raw: Any, where: str) -> tuple[ErrorSpan, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise SchemaError(f"{where}: annotations must be a list")
    spans = []
    for entry in raw:
        try:
            start, end = entry["span"]
            spans.append(ErrorSpan(int(start), int(end), entry["class"]))
        except UnknownClass:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: bad annotation {entry!r}: {exc}") from exc
    return tuple(spans)


def load_aireg_fixture(path: str | Path) -> list[LabeledSample]:
    """Load a regulatory-compliance fixture: labeled system descriptions,
    nominally two violation and one compliant sample per system.

    Deviations from the 2:1 ratio are logged as warnings, not errors.
    """
    samples = []
    for i, row in enumerate(_read_jsonl(path)):
        where = f"{path}:{i + 1}"
        try:
            samples.append(LabeledSample(
                sample_id=str(row["sample_id"]),
                text=row.get("text", ""),
                gold_label=row["label"],
                gold_score=int(row["score"]) if row.get("score") is not None else None,
                group_id=str(row["system_id"]) if row.get("system_id") is not None else None,
            ))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    by_system: dict[str, list[LabeledSample]] = {}
    for sample in samples:
        if sample.group_id is not None:
            by_system.setdefault(sample.group_id, []).append(sample)
    for system_id, group in sorted(by_system.items()):
        violations = sum(1 for s in group if s.gold_label == VIOLATION)
        compliants = len(group) - violations
        if (violations, compliants) != (2, 1):
            logger.warning(
                "system %s has %d violation / %d compliant samples (expected 2:1)",
                system_id, violations, compliants)
    return samples


def load_cspelling_fixture(path: str | Path) -> list[LabeledSample]:
    """Load a spelling/grammar fixture: sentences with span annotations in
    the closed error-class set. Label defaults to violation when annotations
    are present."""
    samples = []
    for i, row in enumerate(_read_jsonl(path)):
        where = f"{path}:{i + 1}"
        spans = _parse_spans(row.get("annotations"), where)
        label = row.get("label") or (VIOLATION if spans else COMPLIANT)
        try:
            samples.append(LabeledSample(
                sample_id=str(row["sample_id"]),
                text=row.get("text", ""),
                gold_label=label,
                error_annotations=spans,
                group_id=str(row["subset_id"]) if row.get("subset_id") is not None else None,
            ))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    return samples


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    records = []
    for i, row in enumerate(_read_jsonl(path)):
        where = f"{path}:{i + 1}"
        try:
            records.append(PredictionRecord(
                sample_id=str(row["sample_id"]),
                predicted_label=row["label"],
                predicted_score=int(row["score"]) if row.get("score") is not None else None,
                detected_errors=_parse_spans(row.get("detected_errors"), where),
            ))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    return records


# --------------------------------------------------------------------------
# Whole-dataset evaluation
# --------------------------------------------------------------------------

CORE_METRICS = ("accuracy", "recall", "precision", "f1", "specificity")


def evaluate(golds: Sequence[LabeledSample], preds: Sequence[PredictionRecord],
             score_scale: int = 5) -> dict[str, Any]:
    """Full report: confusion, classification metrics, agreement stats when
    both sides carry scores, and per-class recall when annotations exist."""
    counts = confusion(preds, golds)
    report: dict[str, Any] = {
        "n_samples": counts.total,
        "confusion": {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn},
        "metrics": classification_metrics(counts),
    }
    pred_by_id = {p.sample_id: p for p in preds}
    scored = [(g, pred_by_id[g.sample_id]) for g in golds
              if g.gold_score is not None
              and pred_by_id[g.sample_id].predicted_score is not None]
    if len(scored) >= 2:
        stats = agreement_stats(
            [p.predicted_score for _, p in scored],
            [g.gold_score for g, _ in scored],
            k=score_scale,
        )
        report["agreement"] = {
            "kappa_qw": stats.kappa_qw,
            "spearman_rho": stats.spearman_rho,
            "bias": stats.bias,
            "mae": stats.mae,
            "n_scored": len(scored),
        }
    if any(g.error_annotations for g in golds):
        report["per_class_recall"] = [
            {
                "error_class": r.error_class,
                "gt_count": r.gt_count,
                "detected_count": r.detected_count,
                "recall": r.recall,
            }
            for r in per_class_recall(golds, preds)
        ]
    return report


def has_undefined_core_metric(report: Mapping[str, Any]) -> bool:
    return any(report["metrics"].get(name) is None for name in CORE_METRICS)
