"""Soft-prompt containers, Hadamard composition, and parameter accounting.

A task prompt is reconstructed as P_hat = P* (.) (U V): the shared meta
prompt modulated element-wise by a low-rank task pattern. Adapting to an
unseen task only trains the rank-1 pattern outer(u, v); L + d scalars.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneCheckpoint
from .errors import ContractError, ParseError
from .ndtensor import Tensor, hadamard, matmul, outer, tensor_from_bytes, tensor_to_bytes
from .taskforge import TASK_TYPES


def _check_task_type(task_type: str):
    if task_type not in TASK_TYPES:
        raise ContractError(f"unknown task type {task_type!r}")


@dataclass
class TeacherPrompt:
    task_type: str
    P_k: Tensor

    def __post_init__(self):
        _check_task_type(self.task_type)
        if self.P_k.data.ndim != 2:
            raise ContractError(f"teacher prompt must be L x d, got shape {self.P_k.shape}")

    @property
    def L(self) -> int:
        return self.P_k.shape[0]


@dataclass
class SharedMetaPrompt:
    P_star: Tensor

    @property
    def L(self) -> int:
        return self.P_star.shape[0]

    @property
    def d(self) -> int:
        return self.P_star.shape[1]


@dataclass
class TaskFactors:
    task_type: str
    U: Tensor  # L x r
    V: Tensor  # r x d

    def __post_init__(self):
        _check_task_type(self.task_type)
        L, r = self.U.shape
        r2, d = self.V.shape
        if r != r2:
            raise ContractError(f"factor ranks disagree: U is {self.U.shape}, V is {self.V.shape}")
        if r < 1:
            raise ContractError("rank must be at least 1")
        if r > 1 and r > min(L, d) / 2:
            raise ContractError(f"rank {r} too large for L={L}, d={d} (must be <= min/2)")

    @property
    def r(self) -> int:
        return self.U.shape[1]


@dataclass
class TargetAdapter:
    target_task: str
    task_type: str  # source task type the factors came from
    u: Tensor  # (L,)
    v: Tensor  # (d,)

    def __post_init__(self):
        _check_task_type(self.task_type)
        if self.u.data.ndim != 1 or self.v.data.ndim != 1:
            raise ContractError("adapter vectors must be 1-D")


def init_prompt_from_vocab(ckpt: BackboneCheckpoint, L: int, seed: int) -> Tensor:
    """L rows copied from uniformly sampled embedding-table rows."""
    if L < 1 or L > ckpt.config.max_seq_len:
        raise ContractError(f"prompt length {L} outside [1, {ckpt.config.max_seq_len}]")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, ckpt.config.vocab_size, size=L)
    return Tensor(ckpt.params["embed"].data[rows].copy())


def compose_prompt(P_star: Tensor, factors: TaskFactors) -> Tensor:
    """P* (.) (U V); differentiable through all three inputs."""
    return hadamard(P_star, matmul(factors.U, factors.V))


def compose_target_prompt(P_star: Tensor, adapter: TargetAdapter) -> Tensor:
    """P* (.) outer(u, v); the rank-1 case of compose_prompt."""
    return hadamard(P_star, outer(adapter.u, adapter.v))


def top_singular_triple(M: np.ndarray, seed: int, iters: int = 50,
                        tol: float = 1e-8) -> tuple[float, np.ndarray, np.ndarray]:
    """Dominant singular triple of M by alternating power iteration.

    Convergence is declared when the singular-value estimate moves by a
    relative step below ``tol``; otherwise the final iterate is returned
    with a warning.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=M.shape[1])
    v /= np.linalg.norm(v)
    sigma_prev = 0.0
    sigma = 0.0
    u = np.zeros(M.shape[0])
    for _ in range(iters):
        mv = M @ v
        norm = np.linalg.norm(mv)
        if norm < 1e-30:
            return 0.0, np.zeros(M.shape[0]), np.zeros(M.shape[1])
        u = mv / norm
        mtu = M.T @ u
        sigma = float(np.linalg.norm(mtu))
        v = mtu / sigma
        if abs(sigma - sigma_prev) <= tol * max(1.0, sigma):
            return sigma, u, v
        sigma_prev = sigma
    warnings.warn(f"power iteration did not converge within {iters} iterations")
    return sigma, u, v


def init_target_adapter(factors: TaskFactors, seed: int, target_task: str = "") -> TargetAdapter:
    """Rank-1 seed for the target vectors.

    r=1 factors copy over exactly; r>1 factors are truncated to their best
    rank-1 approximation, split as u = sqrt(sigma1) a, v = sqrt(sigma1) b.
    """
    if factors.r == 1:
        u = Tensor(factors.U.data[:, 0].copy())
        v = Tensor(factors.V.data[0, :].copy())
    else:
        M = factors.U.data.astype(np.float64) @ factors.V.data.astype(np.float64)
        sigma, a, b = top_singular_triple(M, seed)
        root = np.sqrt(sigma)
        dtype = factors.U.data.dtype
        u = Tensor((root * a).astype(dtype))
        v = Tensor((root * b).astype(dtype))
    return TargetAdapter(target_task or factors.task_type, factors.task_type, u, v)


def compress_adapter(P_star: Tensor, adapter: TargetAdapter) -> Tensor:
    """Materialize the composed target prompt as a standalone L x d matrix.

    The stored matrix is the same expression evaluated once, so feeding it
    to the backbone is bit-identical to composing on the fly.
    """
    return Tensor(compose_target_prompt(P_star, adapter).data.copy())


_PARAM_MODES = ("adaptation", "per_task_total", "group_total")


def param_count(L: int, d: int, tau: int = 1, mode: str = "adaptation") -> int:
    """Tunable-parameter formulas of the rank-1 adaptation scheme."""
    if L <= 0 or d <= 0 or tau <= 0:
        raise ContractError(f"param_count needs positive L, d, tau; got {L}, {d}, {tau}")
    if mode == "adaptation":
        return L + d
    if mode == "per_task_total":
        return L * d + L + d
    if mode == "group_total":
        return L * d + (L + d) * tau
    raise ContractError(f"unknown mode {mode!r}; expected one of {_PARAM_MODES}")


# -----------------------------------------------------------------------
# Prompt files: one header line, then NDT1 tensors
# -----------------------------------------------------------------------

PROMPT_KINDS = ("teacher", "meta", "factors", "adapter", "compressed")


def write_prompt_file(path, kind: str, task_type: str, tensors: list[Tensor],
                      L: int, d: int, r: int):
    if kind not in PROMPT_KINDS:
        raise ContractError(f"unknown prompt kind {kind!r}")
    header = f"kind={kind} task_type={task_type} L={L} d={d} r={r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for t in tensors:
            fh.write(tensor_to_bytes(t))


def read_prompt_file(path) -> tuple[dict[str, str], list[Tensor]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    nl = buf.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: missing prompt header line")
    meta: dict[str, str] = {}
    for part in buf[:nl].decode("utf-8").split():
        key, _, val = part.partition("=")
        meta[key] = val
    if meta.get("kind") not in PROMPT_KINDS:
        raise ParseError(f"{path}: bad or missing kind in header")
    tensors = []
    pos = nl + 1
    while pos < len(buf):
        t, pos = tensor_from_bytes(buf, pos)
        tensors.append(t)
    return meta, tensors


def save_teacher(path, teacher: TeacherPrompt):
    L, d = teacher.P_k.shape
    write_prompt_file(path, "teacher", teacher.task_type, [teacher.P_k], L, d, 0)


def load_teacher(path) -> TeacherPrompt:
    meta, tensors = read_prompt_file(path)
    if meta["kind"] != "teacher" or len(tensors) != 1:
        raise ParseError(f"{path}: not a teacher prompt file")
    return TeacherPrompt(meta["task_type"], tensors[0])


def save_meta(path, meta_prompt: SharedMetaPrompt):
    write_prompt_file(path, "meta", "-", [meta_prompt.P_star],
                      meta_prompt.L, meta_prompt.d, 0)


def load_meta(path) -> SharedMetaPrompt:
    meta, tensors = read_prompt_file(path)
    if meta["kind"] != "meta" or len(tensors) != 1:
        raise ParseError(f"{path}: not a meta prompt file")
    return SharedMetaPrompt(tensors[0])


def save_factors(path, factors: TaskFactors):
    L, r = factors.U.shape
    d = factors.V.shape[1]
    write_prompt_file(path, "factors", factors.task_type, [factors.U, factors.V], L, d, r)


def load_factors(path) -> TaskFactors:
    meta, tensors = read_prompt_file(path)
    if meta["kind"] != "factors" or len(tensors) != 2:
        raise ParseError(f"{path}: not a factors file")
    return TaskFactors(meta["task_type"], tensors[0], tensors[1])


def save_adapter(path, adapter: TargetAdapter):
    L = adapter.u.shape[0]
    d = adapter.v.shape[0]
    write_prompt_file(path, "adapter", adapter.task_type, [adapter.u, adapter.v], L, d, 1)


def load_adapter(path, target_task: str = "") -> TargetAdapter:
    meta, tensors = read_prompt_file(path)
    if meta["kind"] != "adapter" or len(tensors) != 2:
        raise ParseError(f"{path}: not an adapter file")
    return TargetAdapter(target_task or meta["task_type"], meta["task_type"],
                         tensors[0], tensors[1])


def save_compressed(path, task_type: str, matrix: Tensor):
    L, d = matrix.shape
    write_prompt_file(path, "compressed", task_type, [matrix], L, d, 1)


def load_compressed(path) -> tuple[str, Tensor]:
    meta, tensors = read_prompt_file(path)
    if meta["kind"] != "compressed" or len(tensors) != 1:
        raise ParseError(f"{path}: not a compressed prompt file")
    return meta["task_type"], tensors[0]
