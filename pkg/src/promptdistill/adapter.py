"""Target-task adaptation of the frozen shared prompt, full-data and few-shot.

Full-data adaptation trains the rank-1 vectors with early stopping on the
validation loss and returns the best-validation epoch (the initialization
counts as epoch 0). The few-shot protocol draws k training examples per
seeded draw and runs a fixed step budget with no validation; k = 0 performs
zero optimizer steps, which is the pure-transfer condition.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .backbone import BackboneCheckpoint
from .baselines import fewshot_lora, fewshot_pt, sample_shots, _fewshot_steps
from .errors import ContractError
from .evaluation import evaluate_records
from .ndtensor import Tensor
from .promptkit import (
    SharedMetaPrompt, TaskFactors, TargetAdapter, compose_target_prompt, init_target_adapter,
)
from .taskforge import TASK_TYPES, TaskRecord, split_records
from .training import batch_loss, mean_eval_loss, train_early_stopped


@dataclass
class AdaptConfig:
    prompt_len: int = 8          # baseline PT prompt rows
    max_epochs: int = 10
    lr: float = 0.01
    patience: int = 2
    batch: int = 32
    fewshot_steps: int = 50
    fewshot_k: tuple[int, ...] = (0, 1, 5, 10, 20)
    n_draws: int = 10
    seed: int = 0
    seed_base: int = 1000
    batch_cap: int = 8
    weight_decay: float = 0.01
    fullft_lr: float = 1e-4
    eval_max_new: int = 64

    def __post_init__(self):
        if any(k < 0 for k in self.fewshot_k):
            raise ContractError("k values must be nonnegative")
        if self.n_draws < 1:
            raise ContractError("n_draws must be at least 1")
        if self.patience < 1 or self.fewshot_steps < 1:
            raise ContractError("patience and fewshot_steps must be positive")


def adapt_full(ckpt: BackboneCheckpoint, meta: SharedMetaPrompt, factors: TaskFactors,
               target_corpus: list[TaskRecord], config: AdaptConfig,
               ) -> tuple[TargetAdapter, dict]:
    """Early-stopped training of u_t, v_t on the full target training split."""
    splits = split_records(target_corpus)
    if not splits["validation"]:
        raise ContractError("adapt_full: empty validation split")
    if not splits["train"]:
        raise ContractError("adapt_full: empty training split")
    train = splits["train"]
    task_id = target_corpus[0].dataset_id

    adapter = init_target_adapter(factors, config.seed, target_task=task_id)
    adapter.u.requires_grad = True
    adapter.v.requires_grad = True
    prompt_fn = lambda: compose_target_prompt(meta.P_star, adapter)
    rng = np.random.default_rng(config.seed)
    tok = ckpt.tokenizer

    def run_epoch(opt, epoch):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch):
            batch = [train[i] for i in order[start:start + config.batch]]
            loss = batch_loss(ckpt, prompt_fn(), batch, tok)
            opt.zero_grad()
            loss.backward()
            opt.step()

    def val_loss():
        return mean_eval_loss(ckpt, prompt_fn, splits["validation"], tok)

    info = train_early_stopped({"u_t": adapter.u, "v_t": adapter.v}, run_epoch, val_loss,
                               config.max_epochs, config.patience, config.lr,
                               config.weight_decay)
    adapter.u.requires_grad = False
    adapter.v.requires_grad = False
    return adapter, info


def adapt_fewshot(ckpt: BackboneCheckpoint, meta: SharedMetaPrompt, factors: TaskFactors,
                  target_corpus: list[TaskRecord], k: int, draw_seed: int,
                  config: AdaptConfig) -> TargetAdapter:
    """k-shot adaptation: exactly ``fewshot_steps`` steps, none when k = 0."""
    train = [r for r in target_corpus if r.split == "train"]
    task_id = target_corpus[0].dataset_id
    rng = np.random.default_rng(draw_seed)
    shots = sample_shots(train, k, rng)
    adapter = init_target_adapter(factors, draw_seed, target_task=task_id)
    if k == 0:
        return adapter
    adapter.u.requires_grad = True
    adapter.v.requires_grad = True
    prompt_fn = lambda: compose_target_prompt(meta.P_star, adapter)
    _fewshot_steps(ckpt, shots, {"u_t": adapter.u, "v_t": adapter.v},
                   prompt_fn, None, config, rng)
    adapter.u.requires_grad = False
    adapter.v.requires_grad = False
    return adapter


# -----------------------------------------------------------------------
# Sweep over (method, task, k, draw)
# -----------------------------------------------------------------------

SWEEP_METHODS = ("mpt", "pt", "lora")


class SweepRow(NamedTuple):
    method: str
    task: str
    task_type: str
    k: int
    draw_seed: int
    metric_name: str
    value: float


@dataclass
class FewShotResult:
    method: str
    task: str
    task_type: str
    k: int
    values: list[float]
    mean: float
    std: float

    @classmethod
    def from_values(cls, method, task, task_type, k, values) -> "FewShotResult":
        n = len(values)
        mean = math.fsum(values) / n
        var = math.fsum((v - mean) ** 2 for v in values) / n
        return cls(method, task, task_type, k, list(values), mean, math.sqrt(var))


_STATE: dict | None = None


def _init_worker(payload):
    global _STATE
    _STATE = payload


def _run_cell(cell: tuple[str, str, int, int]) -> SweepRow:
    method, task_type, k, draw_seed = cell
    s = _STATE
    ckpt: BackboneCheckpoint = s["ckpt"]
    corpus = s["corpora"][task_type]
    config: AdaptConfig = s["config"]
    test = [r for r in corpus if r.split == "test"]
    if method == "mpt":
        adapter = adapt_fewshot(ckpt, s["meta"], s["factors"][task_type], corpus,
                                k, draw_seed, config)
        prompt = compose_target_prompt(s["meta"].P_star, adapter)
        outcome = evaluate_records(ckpt, prompt, test, max_new=config.eval_max_new, method=method)
    elif method == "pt":
        prompt = fewshot_pt(ckpt, corpus, k, draw_seed, config)
        outcome = evaluate_records(ckpt, prompt, test, max_new=config.eval_max_new, method=method)
    elif method == "lora":
        la = fewshot_lora(ckpt, corpus, s["lora_rank"], k, draw_seed, config)
        outcome = evaluate_records(ckpt, None, test, max_new=config.eval_max_new,
                                   lora=la, method=method)
    else:
        raise ContractError(f"unknown sweep method {method!r}")
    return SweepRow(method, corpus[0].dataset_id, task_type, k, draw_seed,
                    outcome.metric_name, outcome.value)


def run_fewshot_sweep(ckpt: BackboneCheckpoint, meta: SharedMetaPrompt,
                      factors: dict[str, TaskFactors], corpora: dict[str, list[TaskRecord]],
                      methods: list[str], config: AdaptConfig,
                      k_set: tuple[int, ...] | None = None, n_draws: int | None = None,
                      lora_rank: int = 2, jobs: int = 1,
                      ) -> tuple[list[SweepRow], list[FewShotResult]]:
    """Every (method, task, k, draw) cell, evaluated on the fixed test split.

    Cells are independent deterministic jobs; with ``jobs > 1`` they fan out
    across processes sharing the read-only checkpoint. Results are sorted
    into canonical order, so scheduling cannot affect the output bytes.
    """
    for m in methods:
        if m not in SWEEP_METHODS:
            raise ContractError(f"unknown method {m!r}; choose from {SWEEP_METHODS}")
    k_set = tuple(config.fewshot_k) if k_set is None else tuple(k_set)
    n_draws = config.n_draws if n_draws is None else n_draws
    tasks = [t for t in TASK_TYPES if t in corpora]
    if not tasks:
        raise ContractError("run_fewshot_sweep: no task corpora supplied")
    cells = [(m, t, k, config.seed_base + d)
             for m in methods for t in tasks for k in k_set for d in range(n_draws)]
    payload = {"ckpt": ckpt, "meta": meta, "factors": factors, "corpora": corpora,
               "config": config, "lora_rank": lora_rank}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(payload,)) as ex:
            rows = list(ex.map(_run_cell, cells, chunksize=4))
    else:
        _init_worker(payload)
        rows = [_run_cell(c) for c in cells]
    rows.sort(key=lambda r: (r.method, TASK_TYPES.index(r.task_type), r.k, r.draw_seed))
    return rows, aggregate_sweep(rows)


def aggregate_sweep(rows: list[SweepRow]) -> list[FewShotResult]:
    groups: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.task_type, r.k), []).append(r)
    results = []
    for (method, task_type, k), group in sorted(
            groups.items(), key=lambda g: (g[0][0], TASK_TYPES.index(g[0][1]), g[0][2])):
        group = sorted(group, key=lambda r: r.draw_seed)
        results.append(FewShotResult.from_values(
            method, group[0].task, task_type, k, [r.value for r in group]))
    return results


def write_sweep_csv(path, rows: list[SweepRow]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "task", "task_type", "k", "draw_seed", "metric_name", "value"])
        for r in rows:
            w.writerow([r.method, r.task, r.task_type, r.k, r.draw_seed,
                        r.metric_name, f"{r.value:.6f}"])


def write_sweep_agg_csv(path, results: list[FewShotResult]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "task_type", "k", "mean", "std"])
        for r in results:
            w.writerow([r.method, r.task_type, r.k, f"{r.mean:.6f}", f"{r.std:.6f}"])
