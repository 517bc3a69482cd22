"""Greedy-decoding evaluation of a prompt (or adapted model) on a corpus."""

from __future__ import annotations

from .backbone import BackboneCheckpoint, BOS_ID, generate_greedy
from .errors import ContractError
from .metrics import EvalOutcome, score_task
from .ndtensor import Tensor
from .taskforge import PIPE_ID, TaskRecord
from .metrics import METRIC_FOR_TASK


def predict_record(ckpt: BackboneCheckpoint, prompt: Tensor | None, record: TaskRecord,
                   max_new: int = 64, lora=None) -> str:
    tok = ckpt.tokenizer
    if tok is None:
        raise ContractError("checkpoint carries no tokenizer vocabulary")
    input_ids = [BOS_ID] + tok.encode(record.input) + [PIPE_ID]
    out_ids = generate_greedy(ckpt, prompt, input_ids, max_new=max_new, lora=lora)
    return tok.decode(out_ids)


def evaluate_records(ckpt: BackboneCheckpoint, prompt: Tensor | None,
                     records: list[TaskRecord], max_new: int = 64, lora=None,
                     method: str = "", params_pct: float | None = None) -> EvalOutcome:
    """Generate for every record and score the task's designated metric."""
    if not records:
        raise ContractError("evaluate_records: empty record list")
    task_types = {r.task_type for r in records}
    if len(task_types) != 1:
        raise ContractError(f"evaluate_records: mixed task types {sorted(task_types)}")
    task_type = task_types.pop()
    preds = [predict_record(ckpt, prompt, r, max_new=max_new, lora=lora) for r in records]
    golds = [r.target for r in records]
    metric, value, malformed = score_task(task_type, preds, golds)
    assert metric == METRIC_FOR_TASK[task_type]
    return EvalOutcome(task=records[0].dataset_id, task_type=task_type, metric_name=metric,
                       value=value, malformed_output_count=malformed,
                       n_examples=len(records), method=method, params_pct=params_pct)
