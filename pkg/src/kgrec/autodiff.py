"""Minimal dense-tensor engine with tape-based reverse-mode autodiff.

Double precision throughout.  A forward pass records closures on each
output tensor; ``backward`` walks the implicit tape in reverse
topological order and accumulates gradients into ``.grad`` (without
zeroing, so two backward passes accumulate 2x).
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip tape recording inside the block (forward values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NumericError(FloatingPointError):
    """Raised when non-finite values enter or leave an op."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(op: str, arr: np.ndarray) -> None:
    # nan/inf both poison the sum, so one scalar test covers the array
    if not np.isfinite(arr.sum()):
        raise NumericError(f"{op}: non-finite values in tensor of shape {arr.shape}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to the given operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
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
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            node.accumulate(g)
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += pg
                else:
                    # copy: bw closures may alias one array across parents
                    grads[id(parent)] = np.array(pg)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _make(data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _make(data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def bw(g):
        return [(a, g * c)]

    return _make(a.data * c, (a,), bw, "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    _check_finite("matmul", data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _make(data, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def bw(g):
        return [(a, g.reshape(a.shape))]

    return _make(data, (a,), bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return [(a, np.transpose(g, inv))]

    return _make(data, (a,), bw, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return out

    return _make(data, tuple(tensors), bw, "concat")


def gather(table, indices) -> Tensor:
    """Embedding lookup: rows of a 2-D table by an integer index array."""
    table = _wrap(table)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"gather: index out of range [0, {table.shape[0]}) in lookup")
    data = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[1]))
        return [(table, gt)]

    return _make(data, (table,), bw, "gather")


def slice_axis(a, axis: int, lo: int, hi: int) -> Tensor:
    """Contiguous slice [lo, hi) along one axis."""
    a = _wrap(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(lo, hi)
    sl = tuple(sl)
    data = a.data[sl]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return [(a, ga)]

    return _make(data, (a,), bw, "slice")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape).copy())]

    return _make(data, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Row softmax of a / temperature, computed with max-subtraction."""
    a = _wrap(a)
    if temperature <= 0:
        raise ShapeError(f"softmax: temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    _check_finite("softmax", data)

    def bw(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return [(a, data * (g - inner) / temperature)]

    return _make(data, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    _check_finite("log_softmax", data)

    def bw(g):
        return [(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))]

    return _make(data, (a,), bw, "log_softmax")


def nll_from_logits(logits, targets) -> Tensor:
    """Per-row negative log-likelihood of integer targets under row logits."""
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ShapeError(f"nll: logits must be 2-D, got {logits.shape}")
    tgt = np.asarray(targets)
    if tgt.shape != (logits.shape[0],):
        raise ShapeError(
            f"nll: targets shape {tgt.shape} does not match logits rows {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(logits.shape[0])
    data = -logp[rows, tgt]
    _check_finite("nll", data)

    def bw(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        return [(logits, p * g[:, None])]

    return _make(data, (logits,), bw, "nll")


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    data = xn * gain.data + bias.data
    _check_finite("layer_norm", data)
    n = a.shape[-1]

    def bw(g):
        gxn = g * gain.data
        ggain = _unbroadcast(g * xn, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        ga = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                    - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        return [(a, ga), (gain, ggain), (bias, gbias)]

    return _make(data, (a, gain, bias), bw, "layer_norm")


def max_const(a, c: float) -> Tensor:
    """Elementwise max(a, c); subgradient 0 on the tied boundary."""
    a = _wrap(a)
    c = float(c)
    data = np.maximum(a.data, c)
    active = a.data > c

    def bw(g):
        return [(a, g * active)]

    return _make(data, (a,), bw, "max_const")


def relu(a) -> Tensor:
    return max_const(a, 0.0)


_SG_RECORD: list | None = None
_SG_REPLAY: list | None = None
_SG_POS = 0


def stop_gradient(a) -> Tensor:
    """Forward identity; blocks all gradient flow into a's subtree.

    Under grad_check's record/replay protocol the recorded value is
    reused, which realizes the defining semantics: the sg subtree is a
    constant function of the parameters.
    """
    global _SG_POS
    a = _wrap(a)
    if _SG_REPLAY is not None:
        value = _SG_REPLAY[_SG_POS]
        _SG_POS += 1
        out = Tensor(value.copy())
    else:
        if _SG_RECORD is not None:
            _SG_RECORD.append(a.data.copy())
        out = Tensor(a.data.copy())
    out._op = "stop_gradient"
    return out


def frozen_array(arr: np.ndarray) -> np.ndarray:
    """Identity on plain arrays, except under grad_check, where the value
    from the first evaluation is replayed.  Used for data-dependent
    discrete choices (e.g. argmax indices) so the finite-differenced
    function keeps the selection the tape differentiated."""
    global _SG_POS
    if _SG_REPLAY is not None:
        value = _SG_REPLAY[_SG_POS]
        _SG_POS += 1
        return value.copy()
    if _SG_RECORD is not None:
        _SG_RECORD.append(np.array(arr))
    return arr


_PRIMITIVES = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["c"]),
    "softmax": lambda inputs, attrs: softmax(
        inputs[0], temperature=attrs.get("temperature", 1.0),
        axis=attrs.get("axis", -1)),
    "layer_norm": lambda inputs, attrs: layer_norm(*inputs),
    "gather": lambda inputs, attrs: gather(inputs[0], attrs["indices"]),
    "mean": lambda inputs, attrs: mean(
        inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", 0)),
    "nll": lambda inputs, attrs: nll_from_logits(inputs[0], attrs["targets"]),
    "max_const": lambda inputs, attrs: max_const(inputs[0], attrs["c"]),
    "stop_gradient": lambda inputs, attrs: stop_gradient(inputs[0]),
}


def forward_primitive(kind: str, inputs, attrs=None) -> Tensor:
    """Dispatch a primitive by name; the table doubles as the op registry."""
    if kind not in _PRIMITIVES:
        raise ShapeError(f"unknown primitive kind: {kind}")
    return _PRIMITIVES[kind](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params: list[Tensor], h: float = 1e-5) -> float:
    """Max over params of the relative gap between analytic and central
    finite-difference gradients of the scalar function f(params).

    Relative gap per parameter is ||ga - gn|| / max(||ga|| + ||gn||, 1e-12).

    Stop-gradient outputs are recorded on the first evaluation and
    replayed as constants for every subsequent one, so the function
    being finite-differenced is the one the tape actually
    differentiates (sg subtrees are constants by definition).
    """
    global _SG_RECORD, _SG_REPLAY, _SG_POS
    record: list = []
    _SG_RECORD = record
    try:
        loss1 = f()
    finally:
        _SG_RECORD = None
    _SG_REPLAY = record

    def eval_f():
        global _SG_POS
        _SG_POS = 0
        return f()

    try:
        loss2 = eval_f()
        if not np.allclose(loss1.data, loss2.data, rtol=0, atol=0):
            raise ShapeError("grad_check: f is not deterministic")
        return _grad_check_inner(eval_f, loss1, params, h)
    finally:
        _SG_REPLAY = None
        _SG_POS = 0


def _grad_check_inner(f, loss1: Tensor, params: list[Tensor], h: float) -> float:
    for p in params:
        p.zero_grad()
    backward(loss1)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = np.zeros_like(p.data)
        flat = p.data.ravel()
        gn_flat = gn.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f().data)
            flat[i] = orig - h
            lo = float(f().data)
            flat[i] = orig
            gn_flat[i] = (hi - lo) / (2 * h)
        na, nn = np.linalg.norm(ga), np.linalg.norm(gn)
        err = np.linalg.norm(ga - gn) / max(na + nn, 1e-12)
        worst = max(worst, err)
    return worst
