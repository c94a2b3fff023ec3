"""Tensor algebra with reverse-mode automatic differentiation.

A small dynamic-tape engine on top of numpy arrays: each forward op records
its parents and a backward closure, `backward()` walks the graph once in
reverse topological order, then frees it.  Training runs in float32; the
`use_dtype` context switches everything to float64 for finite-difference
gradient checks.  Also hosts the GRU cell, Adam, inverted dropout and the
gradient checker, i.e. everything the model math stands on.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Disable tape recording; forward results carry no graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense float array plus optional participation in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic; model code mostly calls the named ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def constant(values) -> Tensor:
    """Wrap values as a graph-free tensor in the current default dtype."""
    return Tensor(np.asarray(values, dtype=default_dtype()))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def bwd(g):
        if a.requires_grad:
            a._accum(g * s)

    return _node(data, (a,), bwd)


def add_scalar(a: Tensor, s: float) -> Tensor:
    data = a.data + s

    def bwd(g):
        if a.requires_grad:
            a._accum(g)

    return _node(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for the 1D/2D combinations the model uses."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1D/2D operands, got {a.data.ndim}D @ {b.data.ndim}D")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 2:      # (n,) @ (n,p) -> (p,)
            ga, gb = bd @ g, np.outer(ad, g)
        elif ad.ndim == 2 and bd.ndim == 1:    # (m,n) @ (n,) -> (m,)
            ga, gb = np.outer(g, bd), ad.T @ g
        elif ad.ndim == 1 and bd.ndim == 1:    # (n,) @ (n,) -> ()
            ga, gb = g * bd, g * ad
        else:                                  # (m,n) @ (n,p) -> (m,p)
            ga, gb = g @ bd.T, ad.T @ g
        if a.requires_grad:
            a._accum(ga)
        if b.requires_grad:
            b._accum(gb)

    return _node(data, (a, b), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (1.0 - y * y))

    return _node(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    y = y.astype(x.data.dtype)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * y * (1.0 - y))

    return _node(y, (x,), bwd)


def softmax(z: Tensor) -> Tensor:
    """Stable softmax over a 1D tensor; outputs positive and sum to 1."""
    if z.data.ndim != 1 or z.data.size < 1:
        raise DimensionError(f"softmax expects a non-empty vector, got shape {z.data.shape}")
    if np.isnan(z.data).any():
        raise NumericError("softmax input contains NaN")
    e = np.exp(z.data - z.data.max())
    y = e / e.sum()

    def bwd(g):
        if z.requires_grad:
            z._accum(y * (g - np.dot(g, y)))

    return _node(y, (z,), bwd)


def log_softmax_values(z: np.ndarray) -> np.ndarray:
    """Plain-numpy stable log-softmax, for graph-free beam scoring."""
    m = z.max()
    return z - m - math.log(np.exp(z - m).sum())


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                p._accum(g[tuple(idx)])
            offset += size

    return _node(data, tuple(parts), bwd)


def stack_rows(vectors: list[Tensor]) -> Tensor:
    """Stack 1D tensors into a (n, d) matrix."""
    data = np.stack([v.data for v in vectors], axis=0)

    def bwd(g):
        for i, v in enumerate(vectors):
            if v.requires_grad:
                v._accum(g[i])

    return _node(data, tuple(vectors), bwd)


def slice0(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along axis 0 (rows of a matrix or a span of a vector)."""
    data = x.data[start:stop].copy()

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[start:stop] = g
            x._accum(full)

    return _node(data, (x,), bwd)


def take_row(x: Tensor, i: int) -> Tensor:
    data = x.data[i].copy()

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[i] = g
            x._accum(full)

    return _node(data, (x,), bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup (embedding); gradient scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accum(full)

    return _node(data, (table,), bwd)


def tile_row(v: Tensor, n: int) -> Tensor:
    """Repeat a 1D tensor into n identical rows."""
    data = np.tile(v.data, (n, 1))

    def bwd(g):
        if v.requires_grad:
            v._accum(g.sum(axis=0))

    return _node(data, (v,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return _node(data, (x,), bwd)


def ssum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, g))

    return _node(data, (x,), bwd)


def mean0(x: Tensor) -> Tensor:
    """Mean over axis 0 of a (n, d) matrix -> (d,)."""
    n = x.data.shape[0]
    data = x.data.mean(axis=0)

    def bwd(g):
        if x.requires_grad:
            x._accum(np.tile(g / n, (n, 1)))

    return _node(data, (x,), bwd)


def vmax(x: Tensor) -> Tensor:
    """Max of a 1D tensor; subgradient goes to the first argmax."""
    i = int(np.argmax(x.data))
    data = np.asarray(x.data[i], dtype=x.data.dtype)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[i] = g
            x._accum(full)

    return _node(data, (x,), bwd)


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """Softmax cross entropy against a single target id, fused for stability."""
    z = logits.data
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    data = np.asarray(lse - z[target], dtype=z.dtype)

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(z - lse)
            p[target] -= 1.0
            logits._accum(p * g)

    return _node(data, (logits,), bwd)


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable parameter, then free the tape."""
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    # iterative topological sort; poem graphs get too deep for recursion
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    # clear the tape: drop closures and intermediate grads, keep leaf grads
    for node in topo:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.grad = None


class Parameter:
    """A named leaf tensor with Adam moment buffers."""

    __slots__ = ("name", "tensor", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.tensor.grad = np.zeros_like(data)
        self.adam_m = np.zeros_like(data)
        self.adam_v = np.zeros_like(data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class ParameterRegistry:
    """Unique-name parameter store; iteration order is insertion order."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def uniform(self, name: str, shape, rng, lo: float = -0.08, hi: float = 0.08) -> Parameter:
        data = rng.uniform(lo, hi, size=shape).astype(default_dtype())
        return self.add(name, data)

    def zeros(self, name: str, shape) -> Parameter:
        return self.add(name, np.zeros(shape, dtype=default_dtype()))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)


def linear_forward(x: Tensor, w, b=None) -> Tensor:
    """y = x @ W (+ b).  Accepts Parameters or Tensors for w/b."""
    wt = w.tensor if isinstance(w, Parameter) else w
    if x.data.shape[-1] != wt.data.shape[0]:
        raise DimensionError(f"linear: input width {x.data.shape[-1]} != weight rows {wt.data.shape[0]}")
    y = matmul(x, wt)
    if b is not None:
        bt = b.tensor if isinstance(b, Parameter) else b
        y = add(y, bt)
    return y


@dataclass
class GruCellParams:
    """Update/reset/candidate weights of one GRU cell (Cho et al. 2014 layout)."""

    input_size: int
    hidden_size: int
    w_xz: Parameter
    w_hz: Parameter
    b_z: Parameter
    w_xr: Parameter
    w_hr: Parameter
    b_r: Parameter
    w_xn: Parameter
    w_hn: Parameter
    b_n: Parameter

    @classmethod
    def create(cls, prefix: str, input_size: int, hidden_size: int,
               registry: ParameterRegistry, rng) -> "GruCellParams":
        def w(tag, shape):
            return registry.uniform(f"{prefix}.{tag}", shape, rng)

        def b(tag):
            return registry.zeros(f"{prefix}.{tag}", (hidden_size,))

        return cls(
            input_size, hidden_size,
            w("w_xz", (input_size, hidden_size)), w("w_hz", (hidden_size, hidden_size)), b("b_z"),
            w("w_xr", (input_size, hidden_size)), w("w_hr", (hidden_size, hidden_size)), b("b_r"),
            w("w_xn", (input_size, hidden_size)), w("w_hn", (hidden_size, hidden_size)), b("b_n"),
        )


def gru_cell_forward(x: Tensor, h_prev: Tensor, p: GruCellParams) -> Tensor:
    """One GRU step: h' = z*h + (1-z)*n, with the reset gate on the hidden path."""
    if x.data.shape[-1] != p.input_size or h_prev.data.shape[-1] != p.hidden_size:
        raise DimensionError(
            f"gru: got x width {x.data.shape[-1]} (want {p.input_size}), "
            f"h width {h_prev.data.shape[-1]} (want {p.hidden_size})")
    z = sigmoid(add(add(matmul(x, p.w_xz.tensor), matmul(h_prev, p.w_hz.tensor)), p.b_z.tensor))
    r = sigmoid(add(add(matmul(x, p.w_xr.tensor), matmul(h_prev, p.w_hr.tensor)), p.b_r.tensor))
    n = tanh(add(add(matmul(x, p.w_xn.tensor), mul(r, matmul(h_prev, p.w_hn.tensor))), p.b_n.tensor))
    one_minus_z = add_scalar(scale(z, -1.0), 1.0)
    return add(mul(z, h_prev), mul(one_minus_z, n))


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, l2: float = 0.0) -> None:
    """Adam with bias correction; L2 joins the gradient before the moments.

    Grads are zeroed afterwards.
    """
    for p in params:
        g = p.grad
        if l2 != 0.0:
            g = g + l2 * p.data
        p.step_count += 1
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.data[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale grads so the global norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            p.grad[...] *= factor
    return norm


def dropout_apply(x: Tensor, rate: float, training: bool, rng) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    mask = Tensor(keep / (1.0 - rate))
    return mul(x, mask)


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def gradient_check(loss_fn, params, tolerance: float, eps: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of a scalar-loss closure against central differences.

    The closure must be deterministic (dropout off, any internal RNG
    reseeded per call); two probe evaluations that disagree raise
    ContractError.  Relative error per element is
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8); the report holds the max per
    parameter.  Run under `use_dtype(np.float64)` for meaningful tolerances.
    """
    params = list(params)
    with no_grad():
        probe_a = loss_fn().data.copy()
        probe_b = loss_fn().data.copy()
    if not np.array_equal(probe_a, probe_b):
        raise ContractError("loss closure is non-deterministic: two forward passes disagree")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        flat = p.data.reshape(-1)
        g_ad = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            g_fd = (up - down) / (2.0 * eps)
            denom = max(abs(g_ad[i]), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
        report.per_param[p.name] = worst
    return report
