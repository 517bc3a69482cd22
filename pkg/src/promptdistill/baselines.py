"""Comparison methods trained under the same data and evaluation protocol:
single-task prompt tuning, LoRA on the attention q/v projections, and full
fine-tuning of a cloned backbone.
"""

from __future__ import annotations

import numpy as np

from .backbone import BackboneCheckpoint, read_container, write_container
from .errors import ContractError, ParseError
from .ndtensor import Tensor, add, matmul, scale
from .promptkit import init_prompt_from_vocab
from .taskforge import TaskRecord, split_records
from .training import BatchCycler, batch_loss, mean_eval_loss, train_early_stopped


class LoraAdapter:
    """Low-rank deltas on the query and value projections of every layer.

    The effective projection is W + (alpha / r) * B A with B zero-initialized,
    so a fresh adapter is a bit-exact no-op on the forward pass. The delta is
    applied merge-free at matmul time: base + scale * (h B) A.
    """

    def __init__(self, config, r: int, seed: int, alpha: float | None = None):
        if r < 1:
            raise ContractError(f"LoRA rank must be positive, got {r}")
        if r > config.d_model:
            raise ContractError(f"LoRA rank {r} exceeds d_model {config.d_model}")
        self.r = r
        self.alpha = float(r) if alpha is None else float(alpha)
        self.n_layers = config.n_layers
        self.d_model = config.d_model
        rng = np.random.default_rng(seed)
        self.pairs: dict[tuple[int, str], tuple[Tensor, Tensor]] = {}
        for i in range(config.n_layers):
            for which in ("q", "v"):
                B = Tensor(np.zeros((config.d_model, r), dtype=np.float32), requires_grad=True)
                A = Tensor(rng.normal(0.0, 0.02, size=(r, config.d_model)).astype(np.float32),
                           requires_grad=True)
                self.pairs[(i, which)] = (B, A)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def apply(self, layer: int, which: str, h: Tensor, base: Tensor) -> Tensor:
        pair = self.pairs.get((layer, which))
        if pair is None:
            return base
        B, A = pair
        return add(base, scale(matmul(matmul(h, B), A), self.scaling))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for (i, which), (B, A) in sorted(self.pairs.items()):
            out[f"layer{i}.{which}.B"] = B
            out[f"layer{i}.{which}.A"] = A
        return out

    def n_trainable(self) -> int:
        return sum(B.size + A.size for B, A in self.pairs.values())

    def set_trainable(self, flag: bool):
        for B, A in self.pairs.values():
            B.requires_grad = flag
            A.requires_grad = flag

    def save(self, path):
        lines = ["kind=lora", f"r={self.r}", f"alpha={self.alpha}",
                 f"n_layers={self.n_layers}", f"d={self.d_model}"]
        write_container(path, lines, self.params())

    @classmethod
    def load(cls, path, config) -> "LoraAdapter":
        kv, tensors = read_container(path)
        if kv.get("kind") != "lora":
            raise ParseError(f"{path}: not a lora container")
        la = cls(config, int(kv["r"]), seed=0, alpha=float(kv["alpha"]))
        for name, t in tensors.items():
            layer, which, part = name.split(".")
            i = int(layer.removeprefix("layer"))
            B, A = la.pairs[(i, which)]
            (B if part == "B" else A).data[...] = t.data
        la.set_trainable(False)
        return la


def percent_trainable(n_trainable: int, ckpt: BackboneCheckpoint) -> float:
    """Trainable scalars as a percentage of the backbone parameter count."""
    return 100.0 * n_trainable / ckpt.n_parameters()


def save_pt_prompt(path, prompt: Tensor, task: str):
    write_container(path, ["kind=pt", f"task={task}"], {"prompt": prompt})


def load_pt_prompt(path) -> tuple[str, Tensor]:
    kv, tensors = read_container(path)
    if kv.get("kind") != "pt" or "prompt" not in tensors:
        raise ParseError(f"{path}: not a pt prompt container")
    return kv.get("task", ""), tensors["prompt"]


def _full_data_protocol(ckpt, corpus, params, prompt_fn, lora, config, seed):
    splits = split_records(corpus)
    if not splits["validation"]:
        raise ContractError("empty validation split")
    if not splits["train"]:
        raise ContractError("empty training split")
    train = splits["train"]
    rng = np.random.default_rng(seed)
    tok = ckpt.tokenizer

    def run_epoch(opt, epoch):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch):
            batch = [train[i] for i in order[start:start + config.batch]]
            loss = batch_loss(ckpt, prompt_fn(), batch, tok, lora=lora)
            opt.zero_grad()
            loss.backward()
            opt.step()

    def val_loss():
        return mean_eval_loss(ckpt, prompt_fn, splits["validation"], tok, lora=lora)

    return run_epoch, val_loss


def baseline_pt(ckpt: BackboneCheckpoint, target_corpus: list[TaskRecord],
                config, seed: int) -> tuple[Tensor, dict]:
    """Prompt tuning from scratch: all L x d prompt scalars, no shared prompt."""
    if not ckpt.frozen:
        raise ContractError("baseline_pt: backbone must be frozen")
    prompt = init_prompt_from_vocab(ckpt, config.prompt_len, seed)
    prompt.requires_grad = True
    run_epoch, val_loss = _full_data_protocol(
        ckpt, target_corpus, None, lambda: prompt, None, config, seed)
    info = train_early_stopped({"prompt": prompt}, run_epoch, val_loss,
                               config.max_epochs, config.patience, config.lr,
                               config.weight_decay)
    prompt.requires_grad = False
    info["params_pct"] = percent_trainable(info["n_trainable"], ckpt)
    return prompt, info


def baseline_lora(ckpt: BackboneCheckpoint, target_corpus: list[TaskRecord],
                  r_l: int, config, seed: int) -> tuple[LoraAdapter, dict]:
    if not ckpt.frozen:
        raise ContractError("baseline_lora: backbone must be frozen")
    la = LoraAdapter(ckpt.config, r_l, seed)
    run_epoch, val_loss = _full_data_protocol(
        ckpt, target_corpus, None, lambda: None, la, config, seed)
    info = train_early_stopped(la.params(), run_epoch, val_loss,
                               config.max_epochs, config.patience, config.lr,
                               config.weight_decay)
    la.set_trainable(False)
    info["params_pct"] = percent_trainable(info["n_trainable"], ckpt)
    return la, info


def baseline_fullft(ckpt: BackboneCheckpoint, target_corpus: list[TaskRecord],
                    config, seed: int) -> tuple[BackboneCheckpoint, dict]:
    """Fine-tune every backbone weight on a private clone."""
    work = ckpt.clone(trainable=True)
    run_epoch, val_loss = _full_data_protocol(
        work, target_corpus, None, lambda: None, None, config, seed)
    info = train_early_stopped(work.params, run_epoch, val_loss,
                               config.max_epochs, config.patience, config.fullft_lr,
                               weight_decay=0.0)
    work.freeze()
    info["params_pct"] = percent_trainable(info["n_trainable"], ckpt)
    return work, info


# -----------------------------------------------------------------------
# Few-shot variants (fixed step budget, shared shot subsets)
# -----------------------------------------------------------------------


def sample_shots(train: list[TaskRecord], k: int, rng: np.random.Generator) -> list[TaskRecord]:
    """The k-shot subset for one draw; every method sees the same subset."""
    if k < 0:
        raise ContractError(f"negative k: {k}")
    if k > len(train):
        raise ContractError(f"k={k} exceeds training split size {len(train)}")
    chosen = sorted(rng.choice(len(train), size=k, replace=False).tolist())
    return [train[i] for i in chosen]


def _fewshot_steps(ckpt, shots, params, prompt_fn, lora, config, rng):
    from .optim import AdamW

    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    cycler = BatchCycler(len(shots), min(len(shots), config.batch_cap), rng)
    for _ in range(config.fewshot_steps):
        batch = [shots[i] for i in cycler.next_batch()]
        loss = batch_loss(ckpt, prompt_fn(), batch, ckpt.tokenizer, lora=lora)
        opt.zero_grad()
        loss.backward()
        opt.step()


def fewshot_pt(ckpt: BackboneCheckpoint, target_corpus: list[TaskRecord], k: int,
               draw_seed: int, config) -> Tensor:
    train = [r for r in target_corpus if r.split == "train"]
    rng = np.random.default_rng(draw_seed)
    shots = sample_shots(train, k, rng)
    prompt = init_prompt_from_vocab(ckpt, config.prompt_len, draw_seed)
    if k == 0:
        return prompt
    prompt.requires_grad = True
    _fewshot_steps(ckpt, shots, {"prompt": prompt}, lambda: prompt, None, config, rng)
    prompt.requires_grad = False
    return prompt


def fewshot_lora(ckpt: BackboneCheckpoint, target_corpus: list[TaskRecord], r_l: int,
                 k: int, draw_seed: int, config) -> LoraAdapter:
    train = [r for r in target_corpus if r.split == "train"]
    rng = np.random.default_rng(draw_seed)
    shots = sample_shots(train, k, rng)
    la = LoraAdapter(ckpt.config, r_l, draw_seed)
    if k == 0:
        return la
    _fewshot_steps(ckpt, shots, la.params(), lambda: None, la, config, rng)
    la.set_trainable(False)
    return la
