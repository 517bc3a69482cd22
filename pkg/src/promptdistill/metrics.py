"""Task metrics and the per-method report aggregation.

Each task type has one designated metric: pooled micro-F1 for the two
structured tasks (NER, RE), exact-match accuracy for QA, balanced
per-class accuracy for NLI, and mean ROUGE-L F1 for SUM. Structured
outputs are parsed leniently: unparseable segments are dropped and the
output is flagged malformed rather than raising.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

from .errors import ContractError

METRIC_FOR_TASK = {
    "NER": "micro_f1",
    "RE": "micro_f1",
    "QA": "accuracy",
    "NLI": "macro_accuracy",
    "SUM": "rouge_l",
}


def parse_structured(generated: str, task_type: str) -> tuple[set, int]:
    """Lenient structured parse; returns (items, malformed_flag 0 or 1).

    NER reads `tok : TYPE ; tok : TYPE ...` into (token, type) pairs; RE
    reads a single relation-label token. Any dropped segment flags the
    whole output as malformed once.
    """
    toks = generated.split()
    if task_type == "NER":
        items: set = set()
        malformed = 0
        segment: list[str] = []
        for tok in toks + [";"]:
            if tok != ";":
                segment.append(tok)
                continue
            if not segment:
                continue
            if len(segment) == 3 and segment[1] == ":":
                items.add((segment[0], segment[2]))
            else:
                malformed = 1
            segment = []
        return items, malformed
    if task_type == "RE":
        if not toks:
            return set(), 0
        if len(toks) == 1:
            return {toks[0]}, 0
        return set(), 1
    raise ContractError(f"parse_structured handles NER and RE, not {task_type!r}")


def micro_f1(pred_sets: list[set], gold_sets: list[set]) -> float:
    """F1 over TP/FP/FN pooled across all examples."""
    if len(pred_sets) != len(gold_sets):
        raise ContractError(f"micro_f1: {len(pred_sets)} predictions vs {len(gold_sets)} golds")
    tp = fp = fn = 0
    for p, g in zip(pred_sets, gold_sets):
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    if tp == fp == fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def accuracy(preds: list[str], golds: list[str]) -> float:
    if len(preds) != len(golds):
        raise ContractError(f"accuracy: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise ContractError("accuracy: empty evaluation list")
    hits = sum(1 for p, g in zip(preds, golds) if p.strip() == g.strip())
    return hits / len(golds)


def macro_accuracy(preds: list[str], golds: list[str]) -> float:
    """Mean per-gold-class recall (balanced accuracy)."""
    if len(preds) != len(golds):
        raise ContractError(f"macro_accuracy: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise ContractError("macro_accuracy: empty evaluation list")
    classes = sorted({g.strip() for g in golds})
    recalls = []
    for c in classes:
        idx = [i for i, g in enumerate(golds) if g.strip() == c]
        recalls.append(sum(1 for i in idx if preds[i].strip() == c) / len(idx))
    return math.fsum(recalls) / len(recalls)


def rouge_l(hyp_tokens: list[str], ref_tokens: list[str]) -> float:
    """LCS-based F1 (beta = 1), no stemming, closed vocabulary."""
    if not hyp_tokens and not ref_tokens:
        return 1.0
    if not hyp_tokens or not ref_tokens:
        return 0.0
    n, m = len(hyp_tokens), len(ref_tokens)
    prev = [0] * (m + 1)
    for i in range(1, n + 1):
        cur = [0] * (m + 1)
        for j in range(1, m + 1):
            if hyp_tokens[i - 1] == ref_tokens[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[m]
    if lcs == 0:
        return 0.0
    p = lcs / n
    r = lcs / m
    return 2.0 * p * r / (p + r)


def score_task(task_type: str, preds: list[str], golds: list[str]) -> tuple[str, float, int]:
    """Designated metric for a task type; returns (name, value, malformed)."""
    metric = METRIC_FOR_TASK.get(task_type)
    if metric is None:
        raise ContractError(f"unknown task type {task_type!r}")
    if metric == "micro_f1":
        malformed = 0
        pred_sets, gold_sets = [], []
        for p, g in zip(preds, golds):
            items, bad = parse_structured(p, task_type)
            malformed += bad
            pred_sets.append(items)
            gold_sets.append(parse_structured(g, task_type)[0])
        return metric, micro_f1(pred_sets, gold_sets), malformed
    if metric == "accuracy":
        return metric, accuracy(preds, golds), 0
    if metric == "macro_accuracy":
        return metric, macro_accuracy(preds, golds), 0
    values = [rouge_l(p.split(), g.split()) for p, g in zip(preds, golds)]
    if not values:
        raise ContractError("score_task: empty evaluation list")
    return metric, math.fsum(values) / len(values), 0


@dataclass
class EvalOutcome:
    task: str
    task_type: str
    metric_name: str
    value: float
    malformed_output_count: int
    n_examples: int
    method: str = ""
    params_pct: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ContractError(f"metric value {self.value} outside [0, 1]")
        if self.metric_name != METRIC_FOR_TASK.get(self.task_type):
            raise ContractError(
                f"metric {self.metric_name!r} is not designated for task type {self.task_type!r}")


def write_outcomes_jsonl(path, outcomes: list[EvalOutcome]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.__dict__, sort_keys=True) + "\n")


def read_outcomes_jsonl(path) -> list[EvalOutcome]:
    outcomes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                outcomes.append(EvalOutcome(**json.loads(line)))
    return outcomes


# -----------------------------------------------------------------------
# Report aggregation (one row per method, one column per task, plus Avg)
# -----------------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    params_pct: float | None
    values: dict[str, float | None]
    avg: float | None = None


@dataclass
class RunReport:
    task_names: list[str]
    rows: list[ReportRow] = field(default_factory=list)


def aggregate_report(task_names: list[str], rows: list[ReportRow]) -> RunReport:
    """Fill each row's Avg as the simple mean over its present cells."""
    report = RunReport(list(task_names))
    for row in rows:
        present = [row.values[t] for t in task_names if row.values.get(t) is not None]
        missing = [t for t in task_names if row.values.get(t) is None]
        if missing:
            warnings.warn(f"method {row.method}: missing cells for {missing}, excluded from Avg")
        avg = math.fsum(present) / len(present) if present else None
        report.rows.append(ReportRow(row.method, row.params_pct, dict(row.values), avg))
    return report


def write_report_tsv(path, report: RunReport):
    def cell(v, fmt):
        return "NA" if v is None else format(v, fmt)

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method\tparams_pct\t" + "\t".join(report.task_names) + "\tavg\n")
        for row in report.rows:
            vals = [cell(row.values.get(t), ".3f") for t in report.task_names]
            fh.write(f"{row.method}\t{cell(row.params_pct, '.2f')}\t"
                     + "\t".join(vals) + f"\t{cell(row.avg, '.3f')}\n")
