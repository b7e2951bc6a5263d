"""Minimal reverse-mode numeric kernel on numpy.

Tape-based autodiff over the handful of ops the model needs, dense and
embedding layers, learned Fourier relative encodings, masked multi-head
attention with additive relative encodings, and AdamW with cosine decay.
32-bit by default; a float64 mode exists for gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the kernel dtype (e.g. np.float64 for grad checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip tape construction (forward values are unchanged)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "parents", "bwd", "requires_grad", "name")

    def __init__(self, data, parents=(), bwd=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.name = name
        if _GRAD_ENABLED:
            self.parents = parents
            self.bwd = bwd
            self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        else:
            self.parents = ()
            self.bwd = None
            self.requires_grad = False

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.bwd is not None and node.grad is not None:
                node.bwd(node.grad)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Param(Tensor):
    """Trainable tensor; zero-initialized gradient accumulator semantics."""

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    if out.requires_grad:
        out.bwd = bwd
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    if out.requires_grad:
        out.bwd = bwd
    return out


def scale(a, c: float):
    a = as_tensor(a)
    out = Tensor(a.data * c, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * c)

    if out.requires_grad:
        out.bwd = bwd
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.data.shape))

    if out.requires_grad:
        out.bwd = bwd
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    if out.requires_grad:
        out.bwd = bwd
    return out


def transpose(a, axes):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes), parents=(a,))
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.transpose(g, inv))

    if out.requires_grad:
        out.bwd = bwd
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    if out.requires_grad:
        out.bwd = bwd
    return out


def gather(a, idx):
    """a[idx] along axis 0; idx is an integer array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], parents=(a,))

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            flat_idx = idx.reshape(-1)
            updates = g.reshape(-1, *a.data.shape[1:])
            # segment-sum (sort + reduceat) is much faster than ufunc.at and
            # has a fixed, deterministic reduction order
            order = np.argsort(flat_idx, kind="stable")
            si = flat_idx[order]
            sg = updates[order]
            starts = np.concatenate([[0], np.flatnonzero(np.diff(si)) + 1])
            sums = np.add.reduceat(sg, starts, axis=0)
            acc[si[starts]] += sums
            a.accumulate(acc)

    if out.requires_grad:
        out.bwd = bwd
    return out


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(gg, a.data.shape).copy())

    if out.requires_grad:
        out.bwd = bwd
    return out


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _unary(a, f, df):
    a = as_tensor(a)
    y = f(a.data)
    out = Tensor(y, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * df(a.data, y))

    if out.requires_grad:
        out.bwd = bwd
    return out


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype))


def gelu(a):
    """tanh-approximation GELU."""
    a = as_tensor(a)
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            dinner = c * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            a.accumulate(g * da)

    if out.requires_grad:
        out.bwd = bwd
    return out


def softplus(a):
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)
    out = Tensor(y, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / (1.0 + np.exp(-x)))

    if out.requires_grad:
        out.bwd = bwd
    return out


def absolute(a):
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def masked_softmax(scores, mask):
    """Row-wise softmax over admitted entries of the last axis.

    mask is a constant boolean array broadcastable to scores; masked entries
    contribute exactly zero, and rows with no admitted entries produce an
    all-zero distribution (not NaN).
    """
    scores = as_tensor(scores)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.data.shape)
    neg = np.where(m, scores.data, -np.inf)
    row_max = neg.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(m, np.exp(neg - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    y = e / safe
    out = Tensor(y, parents=(scores,))

    def bwd(g):
        if scores.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            scores.accumulate((g - dot) * y)

    if out.requires_grad:
        out.bwd = bwd
    return out


def log_softmax(logits):
    logits = as_tensor(logits)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y, parents=(logits,))

    def bwd(g):
        if logits.requires_grad:
            softmax = np.exp(y)
            logits.accumulate(g - softmax * g.sum(axis=-1, keepdims=True))

    if out.requires_grad:
        out.bwd = bwd
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis (fused forward/backward)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta))

    def bwd(g):
        n = xd.shape[-1]
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            t1 = gy.mean(axis=-1, keepdims=True)
            t2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gy - t1 - xhat * t2))

    if out.requires_grad:
        out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def attention_core(q, k, v, mask, n_heads: int):
    """Scaled dot-product attention over padded contexts.

    q: [Q, D]; k, v: [Q, C, D]; mask: constant bool [Q, C]. Splits into
    n_heads, softmaxes over admitted context entries, returns [Q, D] with
    exact zeros for queries that admit no context.
    """
    Q, D = q.shape
    C = k.shape[1]
    hd = D // n_heads
    qh = transpose(reshape(q, (Q, n_heads, hd)), (1, 0, 2))  # [H, Q, hd]
    kh = transpose(reshape(k, (Q, C, n_heads, hd)), (2, 0, 1, 3))  # [H, Q, C, hd]
    vh = transpose(reshape(v, (Q, C, n_heads, hd)), (2, 0, 1, 3))
    qh = reshape(qh, (n_heads, Q, 1, hd))
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))  # [H, Q, 1, C]
    w = masked_softmax(scores, np.asarray(mask, dtype=bool)[None, :, None, :])
    out = matmul(w, vh)  # [H, Q, 1, hd]
    out = reshape(transpose(reshape(out, (n_heads, Q, hd)), (1, 0, 2)), (Q, D))
    return out


def masked_mhca(queries, keys, values, rel_encodings, index_pairs, mask=None, n_heads: int = 8):
    """Pair-list surface for relative-encoded masked attention.

    queries [Q, D]; keys/values [C, D]; rel_encodings [K, D] aligned with
    index_pairs [K, 2] of admitted (query, context) row indices; mask is an
    optional extra [K] bool. Relative encodings are added to both keys and
    values; queries admitting no pair return exact zero vectors.
    """
    queries = as_tensor(queries)
    Qn, D = queries.shape
    pairs = np.asarray(index_pairs, dtype=int).reshape(-1, 2)
    keep = np.ones(pairs.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pairs = pairs[keep]
    if pairs.shape[0] == 0:
        return Tensor(np.zeros((Qn, D)))
    rel = as_tensor(rel_encodings)
    if mask is not None:
        rel = gather(rel, np.flatnonzero(keep))
    counts = np.bincount(pairs[:, 0], minlength=Qn) if pairs.size else np.zeros(Qn, dtype=int)
    cmax = int(counts.max()) if counts.size and counts.max() > 0 else 1
    slot = np.zeros(pairs.shape[0], dtype=int)
    fill = np.zeros(Qn, dtype=int)
    for i, (qi, _) in enumerate(pairs):
        slot[i] = fill[qi]
        fill[qi] += 1
    idx_ctx = np.zeros((Qn, cmax), dtype=int)
    pad_mask = np.zeros((Qn, cmax), dtype=bool)
    rel_idx = np.zeros((Qn, cmax), dtype=int)
    for i, (qi, ci) in enumerate(pairs):
        idx_ctx[qi, slot[i]] = ci
        rel_idx[qi, slot[i]] = i
        pad_mask[qi, slot[i]] = True
    k_pad = gather(as_tensor(keys), idx_ctx)  # [Q, C, D]
    v_pad = gather(as_tensor(values), idx_ctx)
    rel_pad = gather(rel, rel_idx)
    k2 = add(k_pad, rel_pad)
    v2 = add(v_pad, rel_pad)
    return attention_core(queries, k2, v2, pad_mask, n_heads)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Module:
    def parameters(self) -> list:
        seen, out = set(), []

        def walk(obj):
            if isinstance(obj, Param):
                if id(obj) not in seen:
                    seen.add(id(obj))
                    out.append(obj)
            elif isinstance(obj, Module):
                for v in vars(obj).values():
                    walk(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    walk(v)
            elif isinstance(obj, dict):
                for v in obj.values():
                    walk(v)

        walk(self)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Dense(Module):
    """Affine layer; weights uniform scaled by fan-in, zero bias."""

    def __init__(self, rng, n_in: int, n_out: int, name: str = "dense"):
        bound = 1.0 / math.sqrt(n_in)
        self.w = Param(rng.uniform(-bound, bound, size=(n_in, n_out)), name=f"{name}.w")
        self.b = Param(np.zeros(n_out), name=f"{name}.b")

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)


class MLP(Module):
    def __init__(self, rng, dims: Sequence[int], name: str = "mlp", activation=relu):
        self.layers = [Dense(rng, a, b, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.activation = activation

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


class Embedding(Module):
    def __init__(self, rng, n: int, dim: int, name: str = "emb"):
        self.table = Param(rng.normal(0.0, 0.02, size=(n, dim)), name=f"{name}.table")

    def __call__(self, idx):
        return gather(self.table, np.asarray(idx, dtype=int))


class LayerNorm(Module):
    def __init__(self, dim: int, name: str = "ln"):
        self.gamma = Param(np.ones(dim), name=f"{name}.g")
        self.beta = Param(np.zeros(dim), name=f"{name}.b")

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


class FourierEmbedding(Module):
    """Learned-frequency sin/cos features of descriptors, projected to dim."""

    def __init__(self, rng, n_inputs: int, dim: int, bands: int = 64, name: str = "pe"):
        self.freqs = Param(rng.normal(0.0, 1.0, size=(n_inputs, bands)), name=f"{name}.freqs")
        self.proj = MLP(rng, (n_inputs * (2 * bands + 1), dim, dim), name=f"{name}.proj")
        self.n_inputs = n_inputs
        self.bands = bands

    def __call__(self, desc):
        """desc: [..., n_inputs] -> [..., dim]"""
        desc = as_tensor(desc)
        lead = desc.shape[:-1]
        z = mul(reshape(desc, lead + (self.n_inputs, 1)),
                scale(self.freqs, 2.0 * math.pi))  # [..., n_inputs, bands]
        feats = concat([sin(z), cos(z), reshape(desc, lead + (self.n_inputs, 1))], axis=-1)
        flat = reshape(feats, lead + (self.n_inputs * (2 * self.bands + 1),))
        return self.proj(flat)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    def __init__(self, params: Sequence[Param], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {p.name}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            upd = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data.astype(np.float64)
            p.data = (p.data.astype(np.float64) - lr * upd).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradient_check(loss_fn, params: Sequence[Param], n_samples: int = 20,
                   eps: float = 1e-5, seed: int = 0):
    """Compare analytic grads against central differences on sampled entries.

    Returns (max_relative_error, n_checked). Runs loss_fn twice per probe;
    use under precision(np.float64).
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    worst = 0.0
    checked = 0
    sizes = np.array([p.data.size for p in params], dtype=float)
    probs = sizes / sizes.sum()
    for _ in range(n_samples):
        pi = int(rng.choice(len(params), p=probs))
        p = params[pi]
        flat = int(rng.integers(0, p.data.size))
        orig = p.data.reshape(-1)[flat]
        p.data.reshape(-1)[flat] = orig + eps
        lp = float(loss_fn().data)
        p.data.reshape(-1)[flat] = orig - eps
        lm = float(loss_fn().data)
        p.data.reshape(-1)[flat] = orig
        num = (lp - lm) / (2 * eps)
        ana = float(analytic[id(p)].reshape(-1)[flat])
        denom = max(abs(num), abs(ana), 1e-8)
        worst = max(worst, abs(num - ana) / denom)
        checked += 1
    return worst, checked
