"""Confusion tallies, Acc/Sen/Pre/F1, and report rendering (canonical JSON or a fixed-width table)."""
import json
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from models.report_info import METRIC_NAMES, ConfusionMatrix2, EvalReport
from models.errors import ReportError, ValidationError

logger = logging.getLogger(__name__)

UNDEFINED = "n/a"
TABLE_COLUMNS = ("Method", "Acc", "Sen", "Pre", "F1")


def tally(labels: Sequence[int], predictions: Sequence[int], positive_class: int = 1) -> ConfusionMatrix2:
    """Count predictions against binary labels with ``positive_class`` as the positive side."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValidationError(f"{len(labels)} labels but {len(predictions)} predictions")
    negative = 1 - positive_class
    if labels.size == 0:
        return ConfusionMatrix2()
    # rows: true, cols: predicted, ordered [negative, positive]
    (tn, fp), (fn, tp) = confusion_matrix(labels, predictions, labels=[negative, positive_class])
    return ConfusionMatrix2(tp=tp, fn=fn, fp=fp, tn=tn)


def _ratio(num, den) -> Optional[float]:
    return None if den == 0 else float(num) / float(den)


def f1_score(sen: Optional[float], pre: Optional[float]) -> Optional[float]:
    if sen is None or pre is None or pre + sen == 0:
        return None
    return 2.0 * pre * sen / (pre + sen)


def compute_metrics(cm: ConfusionMatrix2) -> Dict[str, Optional[float]]:
    """
    acc, sen, pre and f1 of a confusion matrix.

    A metric whose denominator is zero is ``None`` (JSON null, "n/a" in tables),
    never a silent 0.
    """
    sen = _ratio(cm.tp, cm.tp + cm.fn)
    pre = _ratio(cm.tp, cm.tp + cm.fp)
    return {"acc": _ratio(cm.tp + cm.tn, cm.total), "sen": sen, "pre": pre, "f1": f1_score(sen, pre)}


def pool(matrices: Iterable[ConfusionMatrix2]) -> ConfusionMatrix2:
    total = ConfusionMatrix2()
    for cm in matrices:
        total = total + cm
    return total


def _cell(value) -> str:
    return UNDEFINED if value is None else f"{value:.3f}"


def format_table(rows: Sequence[Tuple[str, Dict[str, Optional[float]]]]) -> str:
    """One row per method with Acc/Sen/Pre/F1 to three decimals."""
    if not rows:
        raise ReportError("Nothing to tabulate")
    frame = pd.DataFrame([[name] + [_cell(metrics.get(m)) for m in METRIC_NAMES] for name, metrics in rows],
                         columns=list(TABLE_COLUMNS))
    return frame.to_string(index=False) + "\n"


def canonical_report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def check_report(report: EvalReport):
    if not report.folds:
        raise ReportError(f"Report for {report.backbone} has no folds")
    if pool(f.confusion for f in report.folds) != report.pooled:
        raise ReportError(f"Report for {report.backbone}: pooled matrix is not the sum of its folds")


def emit_report(report, format: str = "json") -> bytes:
    """
    Render one report (or a list of reports) as bytes.

    ``json`` output is canonical (sorted keys, fixed indent, trailing newline),
    so parse -> re-emit is byte-identical. ``table`` prints one row per report.
    """
    reports = list(report) if isinstance(report, (list, tuple)) else [report]
    if not reports:
        raise ReportError("No reports to emit")
    for r in reports:
        check_report(r)
    if format == "json":
        if len(reports) == 1:
            return canonical_report_json(reports[0]).encode("utf-8")
        return (json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n").encode("utf-8")
    if format == "table":
        return format_table([(r.display_name, r.metrics) for r in reports]).encode("utf-8")
    raise ValidationError(f"Unknown report format {format!r}; expected json or table")


def load_report(path) -> EvalReport:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ReportError(f"Report {path} is not valid JSON: {e}") from e
    report = EvalReport.from_dict(data)
    check_report(report)
    return report


def metric_margins(rows: Dict[str, Dict[str, Optional[float]]], reference: str) -> Dict[str, Dict[str, Optional[float]]]:
    """Per-metric difference of every row against ``reference``, in percentage points rounded to 0.1."""
    if reference not in rows:
        raise ValidationError(f"Reference {reference!r} is not among {', '.join(rows)}")
    base = rows[reference]
    margins = {}
    for name, metrics in rows.items():
        if name == reference:
            continue
        margins[name] = {
            m: None if metrics.get(m) is None or base.get(m) is None
            else round((metrics[m] - base[m]) * 100.0, 1)
            for m in METRIC_NAMES
        }
    return margins


def compare_reports(reports: Sequence[EvalReport], reference: str) -> Dict[str, Dict[str, Optional[float]]]:
    """Margins of each report over the one whose backbone id (or display name) is ``reference``."""
    rows = {}
    ref_key = None
    for r in reports:
        rows[r.display_name] = r.metrics
        if reference in (r.backbone, r.display_name):
            ref_key = r.display_name
    if ref_key is None:
        raise ValidationError(f"No report for reference backbone {reference!r}")
    return metric_margins(rows, ref_key)


def format_margins(margins: Dict[str, Dict[str, Optional[float]]], reference: str) -> str:
    lines = []
    for name, values in margins.items():
        parts = [f"{m}={UNDEFINED if v is None else f'{v:+.1f}'}" for m, v in values.items()]
        lines.append(f"{name} vs {reference}: " + " ".join(parts))
    return "\n".join(lines) + "\n"
