"""Dense float tensors with a minimal reverse-mode autodiff engine.

The op set is exactly what a tiny decoder-only transformer, soft-prompt
composition, and the three training loss terms need: matmul, Hadamard
product, row softmax, layer norm, GELU, fused causal attention, gathers,
concatenations, and the masked cross-entropy / KL / MSE losses.

Graphs are recorded eagerly during the forward pass (each op output keeps
its parents plus a backward rule) and discarded after ``backward``.
Parameters are leaf tensors; their ``grad`` arrays accumulate additively
across backward passes until explicitly reset. Everything is
single-threaded within one graph.

Two float widths are supported: float32 for training runs and float64 for
finite-difference gradient verification, which is unreliable at 32 bits.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParseError

# Probability floor applied inside ln() of the cross-entropy and KL losses,
# so degenerate rows cannot produce -inf.
PROB_FLOOR = 1e-9

_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {4: np.dtype(np.float32), 8: np.dtype(np.float64)}

_grad_enabled = True


@contextmanager
def no_grad():
    """Run forward passes without recording the graph (teacher/eval mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense row-major float array, optionally participating in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        """Detached copy in the given float width."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def backward(self, free_graph: bool = True):
        """Reverse-mode sweep from this scalar; accumulates into ``grad``.

        Traversal is exact reverse topological order. With ``free_graph``
        (the default) all recorded nodes are released afterwards;
        parameters and their accumulated grads persist.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        gmap: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = gmap.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward_fn is not None:
                for p, pg in zip(node._parents, node._backward_fn(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    acc = gmap.get(id(p))
                    gmap[id(p)] = pg if acc is None else acc + pg
            if free_graph:
                node._parents = ()
                node._backward_fn = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _same_dtype(*ts: Tensor):
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise ContractError(f"mixed float widths: {d.name} vs {t.data.dtype.name}")
    return d


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} vs {b.shape}")


def _mask_array(mask, n: int, op: str) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != (n,):
        raise DimensionError(f"{op}: mask length {m.shape} does not match leading dimension {n}")
    if not m.any():
        raise ContractError(f"{op}: mask selects no positions")
    return m


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; operands must have identical shapes."""
    _same_dtype(a, b)
    _same_shape(a, b, "hadamard")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape {a.shape} x {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: need a matrix, got shape {a.shape}")
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),))


def outer(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise DimensionError(f"outer: need vectors, got shapes {u.shape} and {v.shape}")
    _same_dtype(u, v)
    return _result(np.outer(u.data, v.data), (u, v), lambda g: (g @ v.data, u.data @ g))


def gather_rows(table: Tensor, ids) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows: ids must be a flat list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"gather_rows: id out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: shape {a.shape} vs {b.shape}")
    na = a.shape[0]
    return _result(
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        lambda g: (g[:na], g[na:]),
    )


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if not 0 <= lo <= hi <= x.shape[0]:
        raise DimensionError(f"slice_rows: [{lo}:{hi}] outside {x.shape}")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[lo:hi] = g
        return (gx,)

    return _result(x.data[lo:hi].copy(), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(
        np.asarray(x.data.sum() / n, dtype=x.data.dtype),
        (x,),
        lambda g: (np.full_like(x.data, g / n),),
    )


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences verify it."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du),)

    return _result(out.astype(xd.dtype, copy=False), (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _result(p.astype(x.data.dtype, copy=False), (x,), bw)


def layernorm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm_rows: gamma/beta must be ({d},)")
    _same_dtype(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=0) if g.ndim == 2 else g * xhat
        dbeta = g.sum(axis=0) if g.ndim == 2 else g
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx.astype(x.data.dtype, copy=False), dgamma, dbeta)

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal self-attention over one sequence.

    q, k, v are (n, d) with d divisible by n_heads; position i attends to
    positions 0..i. Fused into a single graph node for speed.
    """
    _same_dtype(q, k, v)
    _same_shape(q, k, "causal_attention")
    _same_shape(q, v, "causal_attention")
    n, d = q.shape
    if d % n_heads:
        raise DimensionError(f"causal_attention: d={d} not divisible by {n_heads} heads")
    dh = d // n_heads
    sc = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(n, n_heads, dh)
    kh = k.data.reshape(n, n_heads, dh)
    vh = v.data.reshape(n, n_heads, dh)
    scores = np.einsum("ihd,jhd->ihj", qh, kh) * sc
    mask = np.triu(np.full((n, n), -np.inf), k=1)
    scores = scores + mask[:, None, :]
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    w /= w.sum(axis=2, keepdims=True)
    out = np.einsum("ihj,jhd->ihd", w, vh).reshape(n, d)

    def bw(g):
        gh = g.reshape(n, n_heads, dh)
        gw = np.einsum("ihd,jhd->ihj", gh, vh)
        gs = w * (gw - (w * gw).sum(axis=2, keepdims=True))
        gq = sc * np.einsum("ihj,jhd->ihd", gs, kh)
        gk = sc * np.einsum("ihj,ihd->jhd", gs, qh)
        gv = np.einsum("ihj,ihd->jhd", w, gh)
        return (gq.reshape(n, d), gk.reshape(n, d), gv.reshape(n, d))

    return _result(out.astype(q.data.dtype, copy=False), (q, k, v), bw)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-probability of the target ids over masked rows."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise DimensionError(f"cross_entropy: {len(tgt)} targets for {n} rows")
    m = _mask_array(mask, n, "cross_entropy")
    sel = tgt[m]
    if sel.size and (sel.min() < 0 or sel.max() >= v):
        raise ContractError(f"cross_entropy: target id outside [0, {v})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.nonzero(m)[0]
    pt = p[rows, tgt[rows]]
    nm = rows.size
    loss = -np.log(pt + PROB_FLOOR).sum() / nm

    def bw(g):
        gl = np.zeros_like(logits.data)
        coef = pt / (pt + PROB_FLOOR)
        gl[rows] = p[rows] * coef[:, None]
        gl[rows, tgt[rows]] -= coef
        return (gl * (g / nm),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def kl_divergence_rows(p: Tensor, q: Tensor, mask) -> Tensor:
    """Mean over masked rows of sum_i p_i ln(p_i / q_i), teacher-style.

    Both logs carry the probability floor, so zero entries contribute
    exactly zero (0 * ln(floor) multiplies out) and degenerate rows stay
    finite. Gradients flow into whichever side requires them; callers
    detach the teacher.
    """
    _same_dtype(p, q)
    _same_shape(p, q, "kl_divergence_rows")
    n = p.shape[0]
    m = _mask_array(mask, n, "kl_divergence_rows")
    rows = np.nonzero(m)[0]
    nm = rows.size
    pm = p.data[rows]
    qm = q.data[rows]
    logdiff = np.log(pm + PROB_FLOOR) - np.log(qm + PROB_FLOOR)
    loss = (pm * logdiff).sum() / nm

    def bw(g):
        gp = gq = None
        if p.requires_grad:
            gp = np.zeros_like(p.data)
            gp[rows] = (logdiff + pm / (pm + PROB_FLOOR)) * (g / nm)
        if q.requires_grad:
            gq = np.zeros_like(q.data)
            gq[rows] = -(pm / (qm + PROB_FLOOR)) * (g / nm)
        return (gp, gq)

    return _result(np.asarray(loss, dtype=p.data.dtype), (p, q), bw)


def mse(a: Tensor, b: Tensor, mask) -> Tensor:
    """Mean squared element-wise difference over masked leading positions."""
    _same_dtype(a, b)
    _same_shape(a, b, "mse")
    n = a.shape[0]
    m = _mask_array(mask, n, "mse")
    rows = np.nonzero(m)[0]
    diff = a.data[rows] - b.data[rows]
    cnt = diff.size
    loss = (diff * diff).sum() / cnt

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[rows] = 2.0 * diff * (g / cnt)
        if b.requires_grad:
            gb = np.zeros_like(b.data)
            gb[rows] = -2.0 * diff * (g / cnt)
        return (ga, gb)

    return _result(np.asarray(loss, dtype=a.data.dtype), (a, b), bw)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Outcome of one finite-difference check: max relative error + failures."""

    def __init__(self, max_rel_error, n_checked, failures):
        self.max_rel_error = max_rel_error
        self.n_checked = n_checked
        self.failures = failures

    @property
    def ok(self) -> bool:
        return not self.failures

    def __repr__(self):
        state = "ok" if self.ok else f"{len(self.failures)} failures"
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, checked={self.n_checked}, {state})"


def gradcheck(f, params: dict[str, Tensor], rel_tol: float = 1e-4, step: float = 1e-5,
              max_checks_per_param: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central finite differences.

    ``f`` rebuilds the scalar loss from the given parameter tensors on every
    call. All parameters must be float64; element subsets are sampled with
    the given seed when a tensor exceeds ``max_checks_per_param``.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractError(f"gradcheck: parameter '{name}' must be float64")
        if not p.requires_grad:
            raise ContractError(f"gradcheck: parameter '{name}' does not require grad")
        p.zero_grad()

    out = f()
    if out.data.size != 1:
        raise ContractError("gradcheck: f() must return a scalar tensor")
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    max_err = 0.0
    n_checked = 0
    failures = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_checks_per_param is not None and flat.size > max_checks_per_param:
            idxs = np.sort(rng.choice(flat.size, size=max_checks_per_param, replace=False))
        ana = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = f().item()
            flat[i] = orig - step
            with no_grad():
                lo = f().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(ana[i] - fd) / max(1.0, abs(ana[i]), abs(fd))
            n_checked += 1
            if err > max_err:
                max_err = err
            if err > rel_tol:
                failures.append((name, int(i), float(ana[i]), float(fd), float(err)))
        p.zero_grad()
    return GradCheckReport(max_err, n_checked, failures)


# ---------------------------------------------------------------------------
# Serialization: NDT1 tensor format
# ---------------------------------------------------------------------------

NDT1_MAGIC = b"NDT1"


def tensor_to_bytes(t: Tensor) -> bytes:
    """Serialize: magic, u8 dtype code (4=f32, 8=f64), u8 rank, u64 LE dims, payload."""
    code = _DTYPE_CODES[t.data.dtype]
    dims = t.data.shape
    head = NDT1_MAGIC + struct.pack("<BB", code, len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    payload = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes(order="C")
    return head + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Inverse of ``tensor_to_bytes``; returns (tensor, next offset)."""
    if buf[offset:offset + 4] != NDT1_MAGIC:
        raise ParseError(f"bad tensor magic at offset {offset}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_DTYPES:
        raise ParseError(f"unknown dtype code {code}")
    pos = offset + 6
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise ParseError("truncated tensor payload")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
    return Tensor(arr.reshape(dims)), pos + nbytes


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a digest; used as the content hash of serialized tensors."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
