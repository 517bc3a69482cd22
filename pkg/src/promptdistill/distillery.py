"""Teacher-prompt training and joint distillation of the shared prompt.

Stage 1 trains one soft prompt per task type with plain cross-entropy.
Stage 2 learns the shared prompt P* and per-task low-rank factors jointly:
each step samples a task subset, and every sampled task contributes

    L_k = task cross-entropy + lambda1 * KL(teacher || student)
        + lambda2 * MSE(teacher hidden, student hidden)

with the step loss (sum over sampled tasks) / K. Teacher outputs are a
pure function of the frozen teacher prompt and the example, so they are
computed once and cached across epochs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .backbone import BackboneCheckpoint, ForwardPass, forward_with_prompt
from .errors import ContractError
from .ndtensor import (
    Tensor, add, cross_entropy, kl_divergence_rows, mse, no_grad, scale, softmax_rows,
)
from .optim import AdamW
from .promptkit import SharedMetaPrompt, TaskFactors, TeacherPrompt, compose_prompt, init_prompt_from_vocab
from .taskforge import TASK_TYPES, TaskRecord, encode_record
from .training import BatchCycler, batch_loss


@dataclass
class DistillConfig:
    prompt_len: int = 8
    rank: int = 1
    lambda1: float = 0.5
    lambda2: float = 0.5
    K_choices: tuple[int, ...] = (2, 3, 4, 5)
    epochs_stage1: int = 5
    lr_stage1: float = 0.05
    batch_stage1: int = 32
    epochs_stage2: int = 10
    lr_stage2: float = 0.01
    batch_stage2: int = 32
    subsample_cap: int = 512
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be nonnegative")
        ks = set(self.K_choices)
        if not ks or not ks <= set(range(1, 6)):
            raise ContractError(f"K_choices must be a nonempty subset of 1..5, got {self.K_choices}")
        if self.prompt_len < 1 or self.rank < 1:
            raise ContractError("prompt_len and rank must be positive")


class LossRow(NamedTuple):
    stage: int
    epoch: int
    step: int
    task_type: str
    task_loss: float
    logit_loss: float
    hidden_loss: float
    total: float


def write_loss_csv(path, rows: list[LossRow]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "step", "task_type", "task_loss",
                    "logit_loss", "hidden_loss", "total"])
        for r in rows:
            w.writerow([r.stage, r.epoch, r.step, r.task_type,
                        f"{r.task_loss:.6f}", f"{r.logit_loss:.6f}",
                        f"{r.hidden_loss:.6f}", f"{r.total:.6f}"])


def epoch_means(rows: list[LossRow]) -> dict[int, float]:
    """Mean of the total column per epoch (optimization-sanity check)."""
    sums: dict[int, list[float]] = {}
    for r in rows:
        sums.setdefault(r.epoch, []).append(r.total)
    return {e: float(np.mean(v)) for e, v in sums.items()}


def _capped_train_split(corpus: list[TaskRecord], cap: int, rng: np.random.Generator) -> list[TaskRecord]:
    train = [r for r in corpus if r.split == "train"]
    if len(train) > cap:
        order = rng.permutation(len(train))[:cap]
        train = [train[i] for i in sorted(order)]
    return train


def train_teacher(ckpt: BackboneCheckpoint, task_corpus: list[TaskRecord],
                  config: DistillConfig, seed: int) -> tuple[TeacherPrompt, list[LossRow]]:
    """Cross-entropy prompt tuning for a single task type; theta frozen."""
    if not task_corpus:
        raise ContractError("train_teacher: empty corpus")
    task_types = {r.task_type for r in task_corpus}
    if len(task_types) != 1:
        raise ContractError(f"train_teacher: corpus mixes task types {sorted(task_types)}")
    task_type = task_types.pop()
    if not ckpt.frozen:
        raise ContractError("train_teacher: backbone must be frozen")

    rng = np.random.default_rng(seed)
    train = _capped_train_split(task_corpus, config.subsample_cap, rng)
    if not train:
        raise ContractError("train_teacher: no training records")

    P = init_prompt_from_vocab(ckpt, config.prompt_len, seed)
    P.requires_grad = True
    opt = AdamW({"P_k": P}, lr=config.lr_stage1, weight_decay=config.weight_decay)
    rows: list[LossRow] = []
    step = 0
    for epoch in range(1, config.epochs_stage1 + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_stage1):
            batch = [train[i] for i in order[start:start + config.batch_stage1]]
            loss = batch_loss(ckpt, P, batch, ckpt.tokenizer)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            v = loss.item()
            rows.append(LossRow(1, epoch, step, task_type, v, 0.0, 0.0, v))
    P.requires_grad = False
    return TeacherPrompt(task_type, P), rows


def _combine(task: Tensor, logit: Tensor, hidden: Tensor, lambda1: float, lambda2: float) -> Tensor:
    return add(add(task, scale(logit, lambda1)), scale(hidden, lambda2))


def distill_loss(teacher_out: ForwardPass, student_out: ForwardPass, targets, mask,
                 config: DistillConfig) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Three-term distillation loss; returns (total, task, logit, hidden).

    Teacher and student must have been evaluated on the identical token
    sequence under equal prompt lengths, so positions align. The hidden
    term covers only token positions; teacher and student prompts differ
    by construction, so prompt rows are excluded.
    """
    if teacher_out.n_prompt != student_out.n_prompt:
        raise ContractError(
            f"prompt lengths differ: teacher {teacher_out.n_prompt}, student {student_out.n_prompt}")
    if teacher_out.logits.shape != student_out.logits.shape:
        raise ContractError(
            f"teacher/student logits disagree: {teacher_out.logits.shape} vs {student_out.logits.shape}")
    task = cross_entropy(student_out.logits, targets, mask)
    logit = kl_divergence_rows(softmax_rows(teacher_out.logits),
                               softmax_rows(student_out.logits), mask)
    token_mask = np.arange(teacher_out.logits.shape[0]) >= teacher_out.n_prompt
    hidden = mse(teacher_out.final_hidden, student_out.final_hidden, token_mask)
    total = _combine(task, logit, hidden, config.lambda1, config.lambda2)
    return total, task, logit, hidden


def sample_tasks(K_choices, rng: np.random.Generator) -> list[str]:
    """Uniform K from K_choices, then K distinct task types, canonical order."""
    choices = sorted(set(K_choices))
    K = choices[int(rng.integers(len(choices)))]
    picked = set(rng.choice(len(TASK_TYPES), size=K, replace=False).tolist())
    return [t for i, t in enumerate(TASK_TYPES) if i in picked]


@dataclass
class _TeacherCache:
    """Frozen-teacher forward passes, filled lazily, reused across epochs."""
    ckpt: BackboneCheckpoint
    teachers: dict[str, TeacherPrompt]
    store: dict = field(default_factory=dict)

    def get(self, task_type: str, index: int, record: TaskRecord) -> ForwardPass:
        key = (task_type, index)
        fp = self.store.get(key)
        if fp is None:
            input_ids, target_ids = encode_record(self.ckpt.tokenizer, record)
            with no_grad():
                fp = forward_with_prompt(self.ckpt, self.teachers[task_type].P_k,
                                         input_ids, target_ids)
            self.store[key] = fp
        return fp


def train_shared_prompt(ckpt: BackboneCheckpoint, teachers: dict[str, TeacherPrompt],
                        corpora: dict[str, list[TaskRecord]], config: DistillConfig,
                        ) -> tuple[SharedMetaPrompt, dict[str, TaskFactors], list[LossRow]]:
    """Joint distillation of P* and all task factors from the five teachers."""
    missing = [t for t in TASK_TYPES if t not in teachers]
    if missing:
        raise ContractError(f"missing teacher prompts for {missing}")
    missing = [t for t in TASK_TYPES if t not in corpora or not corpora[t]]
    if missing:
        raise ContractError(f"missing corpora for {missing}")
    if not ckpt.frozen:
        raise ContractError("train_shared_prompt: backbone must be frozen")
    Ls = {teachers[t].L for t in TASK_TYPES}
    if len(Ls) != 1:
        raise ContractError(f"teacher prompt lengths differ: {sorted(Ls)}")
    L = Ls.pop()
    d = ckpt.config.d_model
    r = config.rank

    # P* starts at the teachers' consensus; factors start near identity so
    # every student prompt begins close to P*.
    stack = np.stack([teachers[t].P_k.data for t in TASK_TYPES])
    P_star = Tensor(stack.mean(axis=0), requires_grad=True)
    init_rng = np.random.default_rng([config.seed, 7])
    base = 1.0 / np.sqrt(r)
    factors: dict[str, TaskFactors] = {}
    params: dict[str, Tensor] = {"P_star": P_star}
    for t in TASK_TYPES:
        U = Tensor((base + init_rng.normal(0.0, 0.01, size=(L, r))).astype(np.float32),
                   requires_grad=True)
        V = Tensor((base + init_rng.normal(0.0, 0.01, size=(r, d))).astype(np.float32),
                   requires_grad=True)
        factors[t] = TaskFactors(t, U, V)
        params[f"U_{t}"] = U
        params[f"V_{t}"] = V
    opt = AdamW(params, lr=config.lr_stage2, weight_decay=config.weight_decay)

    rng = np.random.default_rng(config.seed)
    trains = {t: _capped_train_split(corpora[t], config.subsample_cap, rng) for t in TASK_TYPES}
    cyclers = {t: BatchCycler(len(trains[t]), config.batch_stage2,
                              np.random.default_rng([config.seed, 100 + i]))
               for i, t in enumerate(TASK_TYPES)}
    cache = _TeacherCache(ckpt, teachers)

    total_train = sum(len(v) for v in trains.values())
    mean_k = float(np.mean(sorted(set(config.K_choices))))
    steps_per_epoch = max(1, int(np.ceil(total_train / (config.batch_stage2 * mean_k))))

    rows: list[LossRow] = []
    step = 0
    for epoch in range(1, config.epochs_stage2 + 1):
        for _ in range(steps_per_epoch):
            step += 1
            sampled = sample_tasks(config.K_choices, rng)
            step_loss = None
            for t in sampled:
                idxs = cyclers[t].next_batch()
                prompt = compose_prompt(P_star, factors[t])
                sums = np.zeros(4)
                task_total = None
                for i in idxs:
                    rec = trains[t][i]
                    teacher_fp = cache.get(t, i, rec)
                    input_ids, target_ids = encode_record(ckpt.tokenizer, rec)
                    student_fp = forward_with_prompt(ckpt, prompt, input_ids, target_ids)
                    total, task, logit, hidden = distill_loss(
                        teacher_fp, student_fp, student_fp.targets, student_fp.loss_mask, config)
                    sums += (task.item(), logit.item(), hidden.item(), total.item())
                    task_total = total if task_total is None else add(task_total, total)
                task_mean = scale(task_total, 1.0 / len(idxs))
                step_loss = task_mean if step_loss is None else add(step_loss, task_mean)
                means = sums / len(idxs)
                rows.append(LossRow(2, epoch, step, t, means[0], means[1], means[2], means[3]))
            opt.zero_grad()
            scale(step_loss, 1.0 / len(sampled)).backward()
            opt.step()

    for p in params.values():
        p.requires_grad = False
    return SharedMetaPrompt(P_star), factors, rows
