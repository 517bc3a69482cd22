"""Tiny frozen decoder-only transformer with soft-prompt prepending.

The model is a standard pre-norm causal transformer (sinusoidal absolute
positions, GELU MLP, untied output head by default) sized for desk-scale
experiments. A soft prompt is an L x d matrix of continuous rows occupying
positions 0..L-1 ahead of the token embeddings; every token position
attends to all prompt rows under the ordinary causal mask.

Checkpoints carry the architecture header, the named parameter tensors,
the tokenizer's content vocabulary, and a 64-bit content hash, so a frozen
backbone can be verified bit-exact across pipeline stages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, DimensionError, ParseError
from .ndtensor import (
    Tensor,
    add,
    causal_attention,
    concat_rows,
    cross_entropy,
    fnv1a64,
    gather_rows,
    gelu,
    layernorm_rows,
    matmul,
    no_grad,
    scale,
    tensor_from_bytes,
    tensor_to_bytes,
    transpose,
)

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", ";", ":", "|")
PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3


class Tokenizer:
    """Closed whitespace vocabulary: seven specials plus the world's tokens.

    There is no unknown-token fallback; an out-of-vocabulary surface form
    is a caller error.
    """

    def __init__(self, content_tokens):
        tokens = list(SPECIAL_TOKENS) + list(content_tokens)
        if len(set(tokens)) != len(tokens):
            raise ContractError("tokenizer: duplicate tokens in vocabulary")
        for t in content_tokens:
            if not t or any(c.isspace() for c in t):
                raise ContractError(f"tokenizer: token {t!r} is empty or contains whitespace")
        self.tokens = tokens
        self.id_of = {t: i for i, t in enumerate(tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def content_tokens(self) -> list[str]:
        return self.tokens[len(SPECIAL_TOKENS):]

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in text.split():
            i = self.id_of.get(tok)
            if i is None:
                raise ContractError(f"tokenizer: unknown token {tok!r}")
            ids.append(i)
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise ContractError(f"tokenizer: id {i} outside vocabulary")
            out.append(self.tokens[i])
        return " ".join(out)


@dataclass
class BackboneConfig:
    vocab_size: int = 71
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 160
    tied: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for f in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, f) <= 0:
                raise ContractError(f"config field {f} must be positive")


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Absolute sin/cos position table, float64; callers cast as needed."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, dim / d)
    pe = np.zeros((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


MPTC1_MAGIC = b"MPTC1"


def serialize_named_tensors(tensors: dict[str, Tensor]) -> bytes:
    chunks = []
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb + tensor_to_bytes(tensors[name]))
    return b"".join(chunks)


def write_container(path, lines: list[str], tensors: dict[str, Tensor]):
    """MPTC1 container: header lines, named tensors, trailing content hash."""
    body = [MPTC1_MAGIC, struct.pack("<I", len(lines))]
    for line in lines:
        lb = line.encode("utf-8")
        body.append(struct.pack("<I", len(lb)) + lb)
    blob = serialize_named_tensors(tensors)
    body.append(struct.pack("<I", len(tensors)))
    body.append(blob)
    body.append(struct.pack("<Q", fnv1a64(blob)))
    with open(path, "wb") as fh:
        fh.write(b"".join(body))


def read_container(path) -> tuple[dict[str, str], dict[str, Tensor]]:
    """Inverse of write_container; verifies the stored content hash."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != MPTC1_MAGIC:
        raise ParseError(f"{path}: bad container magic")
    pos = 5
    (n_lines,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    kv: dict[str, str] = {}
    for _ in range(n_lines):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        line = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        key, _, val = line.partition("=")
        kv[key] = val
    (n_tensors,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    blob_start = pos
    tensors: dict[str, Tensor] = {}
    for _ in range(n_tensors):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        t, pos = tensor_from_bytes(buf, pos)
        tensors[name] = t
    (stored_hash,) = struct.unpack_from("<Q", buf, pos)
    if fnv1a64(buf[blob_start:pos]) != stored_hash:
        raise ParseError(f"{path}: content hash mismatch")
    return kv, tensors


class BackboneCheckpoint:
    """Named parameter map plus config, tokenizer vocabulary, and hash."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor],
                 tokenizer: Tokenizer | None = None, frozen: bool = False):
        self.config = config
        self.params = params
        self.tokenizer = tokenizer
        self.frozen = frozen
        self.content_hash: int | None = fnv1a64(self.serialized_params()) if frozen else None
        self._pe = sinusoidal_positions(config.max_seq_len, config.d_model)

    # -- construction -------------------------------------------------

    @classmethod
    def init_random(cls, config: BackboneConfig, seed: int,
                    tokenizer: Tokenizer | None = None) -> "BackboneCheckpoint":
        if tokenizer is not None and tokenizer.vocab_size != config.vocab_size:
            raise ContractError(
                f"vocab_size {config.vocab_size} does not match tokenizer ({tokenizer.vocab_size})")
        rng = np.random.default_rng(seed)
        d, ff, v = config.d_model, config.d_ff, config.vocab_size

        def w(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32))

        params: dict[str, Tensor] = {"embed": w(v, d)}
        for i in range(config.n_layers):
            pre = f"layer{i}."
            params[pre + "ln1.gamma"] = Tensor(np.ones(d, dtype=np.float32))
            params[pre + "ln1.beta"] = Tensor(np.zeros(d, dtype=np.float32))
            for name in ("wq", "wk", "wv", "wo"):
                params[pre + name] = w(d, d)
            params[pre + "ln2.gamma"] = Tensor(np.ones(d, dtype=np.float32))
            params[pre + "ln2.beta"] = Tensor(np.zeros(d, dtype=np.float32))
            params[pre + "w1"] = w(d, ff)
            params[pre + "w2"] = w(ff, d)
        params["ln_f.gamma"] = Tensor(np.ones(d, dtype=np.float32))
        params["ln_f.beta"] = Tensor(np.zeros(d, dtype=np.float32))
        if not config.tied:
            params["head"] = w(d, v)
        return cls(config, params, tokenizer)

    # -- identity and lifecycle ----------------------------------------

    def serialized_params(self) -> bytes:
        return serialize_named_tensors(self.params)

    def compute_hash(self) -> int:
        return fnv1a64(self.serialized_params())

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        self.content_hash = self.compute_hash()

    def clone(self, trainable: bool = True) -> "BackboneCheckpoint":
        """Private deep copy for methods that mutate weights."""
        params = {n: Tensor(p.data.copy(), requires_grad=trainable) for n, p in self.params.items()}
        return BackboneCheckpoint(self.config, params, self.tokenizer, frozen=False)

    def astype(self, dtype) -> "BackboneCheckpoint":
        """Width-converted deep copy (gradient checks run in float64)."""
        params = {n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
                  for n, p in self.params.items()}
        out = BackboneCheckpoint(self.config, params, self.tokenizer, frozen=False)
        out.frozen = self.frozen
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def positional(self, n: int, dtype) -> np.ndarray:
        return self._pe[:n].astype(dtype)

    # -- persistence ----------------------------------------------------

    def _config_lines(self) -> list[str]:
        c = self.config
        lines = [
            f"vocab_size={c.vocab_size}", f"d_model={c.d_model}", f"n_layers={c.n_layers}",
            f"n_heads={c.n_heads}", f"d_ff={c.d_ff}", f"max_seq_len={c.max_seq_len}",
            f"tied={str(c.tied).lower()}", f"frozen={str(self.frozen).lower()}",
        ]
        if self.tokenizer is not None:
            lines.append("tokens=" + " ".join(self.tokenizer.content_tokens))
        return lines

    def save(self, path):
        write_container(path, self._config_lines(), self.params)

    @classmethod
    def load(cls, path) -> "BackboneCheckpoint":
        kv, params = read_container(path)
        try:
            config = BackboneConfig(
                vocab_size=int(kv["vocab_size"]), d_model=int(kv["d_model"]),
                n_layers=int(kv["n_layers"]), n_heads=int(kv["n_heads"]),
                d_ff=int(kv["d_ff"]), max_seq_len=int(kv["max_seq_len"]),
                tied=kv["tied"] == "true",
            )
        except KeyError as exc:
            raise ParseError(f"{path}: missing config key {exc}") from exc
        tok = Tokenizer(kv["tokens"].split()) if "tokens" in kv else None
        ckpt = cls(config, params, tok, frozen=kv.get("frozen") == "true")
        if ckpt.frozen:
            for p in ckpt.params.values():
                p.requires_grad = False
        return ckpt


class ForwardPass(NamedTuple):
    logits: Tensor          # (L+n) x vocab, pre-softmax
    final_hidden: Tensor    # (L+n) x d, after the final layer norm
    loss_mask: np.ndarray   # bool (L+n); True where the next token is supervised
    targets: np.ndarray     # int64 (L+n); next-token ids at masked positions
    n_prompt: int           # L; rows [0, L) are prompt positions


def forward_with_prompt(ckpt: BackboneCheckpoint, prompt: Tensor | None,
                        input_ids, target_ids, lora=None) -> ForwardPass:
    """Teacher-forced forward over [prompt rows] ++ [input ++ target tokens].

    ``loss_mask`` marks the positions that predict each target token under
    the next-token shift, so it has exactly ``len(target_ids)`` true
    entries. ``lora``, when given, contributes low-rank deltas to the query
    and value projections.
    """
    cfg = ckpt.config
    p = ckpt.params
    input_ids = list(input_ids)
    target_ids = list(target_ids)
    if not input_ids:
        raise ContractError("forward_with_prompt: empty input_ids")
    ids = input_ids + target_ids
    L = 0 if prompt is None else prompt.shape[0]
    if prompt is not None:
        if prompt.data.ndim != 2 or prompt.shape[1] != cfg.d_model:
            raise DimensionError(f"prompt shape {prompt.shape} incompatible with d_model {cfg.d_model}")
    n = len(ids)
    total = L + n
    if total > cfg.max_seq_len:
        raise DimensionError(f"sequence length {total} exceeds max_seq_len {cfg.max_seq_len}")

    emb = gather_rows(p["embed"], ids)
    x = emb if L == 0 else concat_rows(prompt, emb)
    x = add(x, Tensor(ckpt.positional(total, x.data.dtype)))

    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        h = layernorm_rows(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        q = matmul(h, p[pre + "wq"])
        k = matmul(h, p[pre + "wk"])
        v = matmul(h, p[pre + "wv"])
        if lora is not None:
            q = lora.apply(i, "q", h, q)
            v = lora.apply(i, "v", h, v)
        attn = causal_attention(q, k, v, cfg.n_heads)
        x = add(x, matmul(attn, p[pre + "wo"]))
        h2 = layernorm_rows(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        x = add(x, matmul(gelu(matmul(h2, p[pre + "w1"])), p[pre + "w2"]))

    hidden = layernorm_rows(x, p["ln_f.gamma"], p["ln_f.beta"])
    head = transpose(p["embed"]) if cfg.tied else p["head"]
    logits = matmul(hidden, head)

    mask = np.zeros(total, dtype=bool)
    targets = np.zeros(total, dtype=np.int64)
    n_in = len(input_ids)
    if target_ids:
        mask[L + n_in - 1:L + n - 1] = True
        targets[L + n_in - 1:L + n - 1] = ids[n_in:]
    return ForwardPass(logits, hidden, mask, targets, L)


def sequence_loss(ckpt: BackboneCheckpoint, prompt: Tensor | None,
                  input_ids, target_ids, lora=None) -> Tensor:
    """Cross-entropy of the target segment under teacher forcing."""
    fp = forward_with_prompt(ckpt, prompt, input_ids, target_ids, lora=lora)
    return cross_entropy(fp.logits, fp.targets, fp.loss_mask)


def generate_greedy(ckpt: BackboneCheckpoint, prompt: Tensor | None,
                    input_ids, max_new: int = 64, lora=None) -> list[int]:
    """Argmax decoding (ties resolve to the lowest id); stops at eos."""
    out: list[int] = []
    with no_grad():
        for _ in range(max_new):
            fp = forward_with_prompt(ckpt, prompt, list(input_ids) + out, [], lora=lora)
            nxt = int(np.argmax(fp.logits.data[-1]))
            if nxt == EOS_ID:
                break
            out.append(nxt)
    return out


def stream_nll(ckpt: BackboneCheckpoint, corpus: list[list[int]]) -> float:
    """Mean per-token next-token negative log-likelihood over a stream."""
    total = 0.0
    count = 0
    with no_grad():
        for seq in corpus:
            ids = [BOS_ID] + list(seq) + [EOS_ID]
            fp = forward_with_prompt(ckpt, None, ids[:1], ids[1:])
            loss = cross_entropy(fp.logits, fp.targets, fp.loss_mask).item()
            n = int(fp.loss_mask.sum())
            total += loss * n
            count += n
    if count == 0:
        raise ContractError("stream_nll: empty corpus")
    return total / count


def stream_perplexity(ckpt: BackboneCheckpoint, corpus: list[list[int]]) -> float:
    return float(np.exp(stream_nll(ckpt, corpus)))


def pretrain_backbone(corpus: list[list[int]], config: BackboneConfig, seed: int,
                      tokenizer: Tokenizer | None = None, epochs: int = 3,
                      lr: float = 1e-3, batch_size: int = 16,
                      prefix_max: int = 12) -> BackboneCheckpoint:
    """Brief next-token pretraining on the world stream, then freeze + hash.

    ``corpus`` is a list of token-id sequences. Every sequence trains as
    ``<bos> tokens <eos>`` with loss over all positions after the first,
    behind a random-length, loss-free prefix of random tokens (0 to
    ``prefix_max`` of them). The prefix teaches the model that content may
    start at any early position with arbitrary vectors before it — the
    situation every prompt-based method later puts it in.
    """
    from .optim import AdamW

    if len(corpus) < batch_size:
        raise ContractError(f"pretraining corpus has {len(corpus)} sequences, batch needs {batch_size}")
    ckpt = BackboneCheckpoint.init_random(config, seed, tokenizer)
    for p in ckpt.params.values():
        p.requires_grad = True
    opt = AdamW(ckpt.params, lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            if len(batch) < batch_size:
                break
            loss = None
            for idx in batch:
                pre = rng.integers(0, config.vocab_size,
                                   size=int(rng.integers(0, prefix_max + 1))).tolist()
                ids = [BOS_ID] + list(corpus[idx]) + [EOS_ID]
                term = sequence_loss(ckpt, None, pre + ids[:1], ids[1:])
                loss = term if loss is None else add(loss, term)
            opt.zero_grad()
            scale(loss, 1.0 / len(batch)).backward()
            opt.step()
    ckpt.freeze()
    return ckpt
