"""Shared training-loop plumbing: batched losses, early stopping, cycling.

Every method (teacher prompts, the joint distillation, rank-1 adaptation,
and the baselines) trains per-sequence graphs whose losses are averaged
into one scalar per step, so the helpers here take a ``prompt_fn`` that
rebuilds the (possibly composed) prompt for each batch graph.
"""

from __future__ import annotations

import numpy as np

from .backbone import BackboneCheckpoint, Tokenizer, sequence_loss
from .errors import ContractError
from .ndtensor import Tensor, add, no_grad, scale
from .optim import AdamW
from .taskforge import TaskRecord, encode_record


def batch_loss(ckpt: BackboneCheckpoint, prompt: Tensor | None,
               records: list[TaskRecord], tokenizer: Tokenizer, lora=None) -> Tensor:
    """Mean teacher-forced cross-entropy over a batch of records."""
    if not records:
        raise ContractError("batch_loss: empty batch")
    total = None
    for rec in records:
        input_ids, target_ids = encode_record(tokenizer, rec)
        term = sequence_loss(ckpt, prompt, input_ids, target_ids, lora=lora)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(records))


def mean_eval_loss(ckpt: BackboneCheckpoint, prompt_fn, records: list[TaskRecord],
                   tokenizer: Tokenizer, lora=None) -> float:
    """Held-out mean cross-entropy; no graph is recorded."""
    if not records:
        raise ContractError("mean_eval_loss: empty evaluation split")
    with no_grad():
        return batch_loss(ckpt, prompt_fn(), records, tokenizer, lora=lora).item()


class BatchCycler:
    """Endless seeded batches over n indices, reshuffling at each pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1 or batch_size < 1:
            raise ContractError("BatchCycler needs at least one example and batch size 1")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_batch(self) -> list[int]:
        out: list[int] = []
        while len(out) < self.batch_size:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out


def train_early_stopped(params: dict[str, Tensor], run_epoch, val_loss,
                        max_epochs: int, patience: int, lr: float,
                        weight_decay: float = 0.01) -> dict:
    """Best-epoch training with patience-based early stopping.

    ``run_epoch(opt, epoch)`` performs one pass of optimizer steps;
    ``val_loss()`` scores the current parameters. The initial state counts
    as epoch 0, so a run that never improves returns the initialization.
    """
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    best = val_loss()
    snapshot = {n: p.data.copy() for n, p in params.items()}
    history = [best]
    best_epoch = 0
    bad = 0
    for epoch in range(1, max_epochs + 1):
        run_epoch(opt, epoch)
        v = val_loss()
        history.append(v)
        if v < best:
            best = v
            best_epoch = epoch
            snapshot = {n: p.data.copy() for n, p in params.items()}
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    for name, p in params.items():
        p.data[...] = snapshot[name]
    return {"val_losses": history, "best_epoch": best_epoch, "best_val_loss": best,
            "n_trainable": sum(p.data.size for p in params.values())}
