"""Minimal reverse-mode autodiff engine on numpy buffers.

Every forward op records a node with a backward closure; `backward()` walks
the graph once in reverse topological order. All ops check output finiteness
(NaN/Inf anywhere is treated as a hard numeric error, not a value).
"""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """Shape/precision/argument contract violated by the caller."""


class NumericError(RuntimeError):
    """A forward op produced non-finite values."""


def _check_finite(data: np.ndarray, op: str) -> None:
    # a single C reduction; NaN/Inf propagate through the sum
    if not np.isfinite(data.sum()):
        raise NumericError(f"non-finite output in op '{op}'")


class Tensor:
    """N-d float tensor participating in a dynamically built graph.

    `data` is a float32 or float64 numpy array; precision must be uniform
    across all inputs of an op. Gradients accumulate into `.grad` during
    `backward()` for every tensor with `requires_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            raise ContractError("Tensor of Tensor is not allowed")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar loss node."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free interior closures so the graph can be collected
        for node in order:
            if node is not self:
                node._backward = None
                node._parents = ()

    # convenience operators (constants or tensors)
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _make(data, parents, backward, op, track=True):
    _check_finite(data, op)
    out = Tensor(data)
    if track and _needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a buffer another parent also accumulates from
        t.grad = np.array(g, dtype=t.data.dtype)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _same_dtype(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise ContractError(f"mixed precision inputs: {dt} vs {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    y = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(y, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    y = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(y, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    y = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(y, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    y = a.data * c

    def bwd(g):
        _accum(a, g * c)

    return _make(y, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    y = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(y, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractError("transpose expects a 2-d tensor")
    y = a.data.T.copy()

    def bwd(g):
        _accum(a, g.T)

    return _make(y, (a,), bwd, "transpose")


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2:
        raise ContractError("slice_cols expects a 2-d tensor")
    y = a.data[:, lo:hi].copy()

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            _accum(a, full)

    return _make(y, (a,), bwd, "slice_cols")


def concat_cols(parts) -> Tensor:
    _same_dtype(*parts)
    y = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def bwd(g):
        lo = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, lo:lo + w])
            lo += w

    return _make(y, tuple(parts), bwd, "concat_cols")


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), bwd, "sigmoid")


def swish(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    y = a.data * s

    def bwd(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _make(y, (a,), bwd, "swish")


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU."""
    from scipy.special import erf

    x = a.data
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    y = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accum(a, g * (phi + x * pdf))

    return _make(y, (a,), bwd, "gelu")


def glu(a: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half gated by sigmoid(second half)."""
    d = a.data.shape[-1]
    if d % 2 != 0:
        raise ContractError("glu needs an even last dimension")
    h = d // 2
    u, v = a.data[..., :h], a.data[..., h:]
    s = 1.0 / (1.0 + np.exp(-v))
    y = u * s

    def bwd(g):
        if a.requires_grad:
            full = np.empty_like(a.data)
            full[..., :h] = g * s
            full[..., h:] = g * u * s * (1.0 - s)
            _accum(a, full)

    return _make(y, (a,), bwd, "glu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, y * (g - dot))

    return _make(y, (a,), bwd, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bwd(g):
        if a.requires_grad:
            sm = np.exp(y)
            _accum(a, g - sm * g.sum(axis=-1, keepdims=True))

    return _make(y, (a,), bwd, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance and learnable affine."""
    _same_dtype(x, gamma, beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ContractError("layer_norm affine params must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(y, (x, gamma, beta), bwd, "layer_norm")


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 1-d convolution along the first axis, zero-padded to same length.

    x is (L, d); w is (k, d) with odd k.
    """
    _same_dtype(x, w)
    L, d = x.data.shape
    k, dw = w.data.shape
    if dw != d:
        raise ContractError("depthwise kernel channel count must match input width")
    if k % 2 != 1:
        raise ContractError("depthwise kernel length must be odd")
    pad = k // 2
    xp = np.zeros((L + 2 * pad, d), dtype=x.data.dtype)
    xp[pad:pad + L] = x.data
    y = np.zeros_like(x.data)
    for j in range(k):
        y += xp[j:j + L] * w.data[j]

    def bwd(g):
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[j:j + L] += g * w.data[j]
            _accum(x, gp[pad:pad + L])
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = (g * xp[j:j + L]).sum(axis=0)
            _accum(w, gw)

    return _make(y, (x, w), bwd, "depthwise_conv1d")


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup (embedding / repeat-upsampling); gradient scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError("gather_rows expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError("gather_rows index out of range")
    y = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accum(table, full)

    return _make(y, (table,), bwd, "gather_rows")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout: scales at train time so inference is a no-op."""
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError("dropout rate must be < 1")
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    factor = (rng.random(x.data.shape, dtype=draw_dtype) >= rate).astype(x.data.dtype)
    factor /= np.asarray(1.0 - rate, dtype=x.data.dtype)
    y = x.data * factor

    def bwd(g):
        _accum(x, g * factor)

    return _make(y, (x,), bwd, "dropout")


def sum_all(a: Tensor) -> Tensor:
    y = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(y, (a,), bwd, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    y = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(y, (a,), bwd, "mean")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient at zero is zero (np.sign convention)."""
    _same_dtype(pred, target)
    if pred.data.shape != target.data.shape:
        raise ContractError(f"l1_loss shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    y = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype)
    sign = np.sign(diff)

    def bwd(g):
        _accum(pred, g * sign / n)
        _accum(target, -g * sign / n)

    return _make(y, (pred, target), bwd, "l1_loss")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean softmax cross-entropy over rows; `mask` selects which rows count.

    logits is (L, C); targets is an int vector of length L.
    """
    t = np.asarray(targets, dtype=np.int64)
    L, C = logits.data.shape
    if t.shape != (L,):
        raise ContractError("cross_entropy target length must match logit rows")
    if t.size and (t.min() < 0 or t.max() >= C):
        raise ContractError("cross_entropy target class out of range")
    if mask is None:
        sel = np.ones(L, dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != (L,):
            raise ContractError("cross_entropy mask length must match logit rows")
    n = max(int(sel.sum()), 1)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(L), t]
    y = np.asarray(nll[sel].sum() / n, dtype=logits.data.dtype)
    sm = np.exp(logp)

    def bwd(g):
        if logits.requires_grad:
            gz = sm.copy()
            gz[np.arange(L), t] -= 1.0
            gz[~sel] = 0.0
            _accum(logits, g * gz / n)

    return _make(y, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference audit


def grad_check(f, params, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    `f()` rebuilds and returns the scalar loss from the given parameter
    tensors, which must be float64. With `max_coords`, a random subset of
    coordinates per parameter is audited (needed for large graphs).
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ContractError("grad_check eps must lie in [1e-6, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit parameters")
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ContractError("grad_check function must return a scalar")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            a = an.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            worst = max(worst, rel)
    return worst
