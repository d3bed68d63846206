"""Dense f64 tensors with tape-based reverse-mode automatic differentiation.

Everything is float64 and deterministic. Operations record onto the
innermost active :class:`Graph` whenever an input requires gradients;
without an active graph the forward result is computed but nothing is taped.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class GradCheckError(RuntimeError):
    pass


class Tensor:
    """A dense float64 tensor. ``requires_grad`` marks autodiff leaves."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are accepted on either side
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "inputs", "vjps", "name")

    def __init__(self, name, out, inputs, vjps):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjps = vjps


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Recording tape. Use as a context manager around the forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._backward_done = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of ``loss`` w.r.t. every recorded leaf."""
        if self._backward_done:
            raise GraphError("backward already run on this graph; call reset() first")
        if loss.data.ndim != 0:
            raise GraphError(f"backward seed must be a scalar, got shape {loss.data.shape}")
        self._backward_done = True
        self.gradients[id(loss)] = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            gout = self.gradients.get(id(node.out))
            if gout is None:
                continue
            for inp, vjp in zip(node.inputs, node.vjps):
                if vjp is None or not inp.requires_grad:
                    continue
                g = vjp(gout)
                acc = self.gradients.get(id(inp))
                if acc is None:
                    self.gradients[id(inp)] = np.asarray(g, dtype=np.float64).copy()
                else:
                    acc += g

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward pass; zeros for disconnected leaves."""
        g = self.gradients.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def reset(self) -> None:
        self.nodes.clear()
        self.gradients.clear()
        self._backward_done = False


def _current_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _record(name, out_data, inputs: Sequence[Tensor], vjps) -> Tensor:
    out = Tensor(out_data)
    g = _current_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.nodes.append(_Node(name, out, tuple(inputs), tuple(vjps)))
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _record("matmul", out, (a, b),
                   (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def _bcast_vjp(g, shape):
    # reduce a gradient back to ``shape`` after numpy broadcasting
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _ew(name, a, b, fwd, dfa, dfb) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name} shapes do not conform: {a.shape} vs {b.shape}") from exc
    if out.shape != np.broadcast_shapes(a.shape, b.shape):
        raise ShapeError(f"{name} shapes do not conform: {a.shape} vs {b.shape}")
    return _record(name, out, (a, b),
                   (lambda g: _bcast_vjp(dfa(g), a.shape),
                    lambda g: _bcast_vjp(dfb(g), b.shape)))


def add(a, b) -> Tensor:
    return _ew("add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    return _ew("sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _ew("mul", a, b, lambda x, y: x * y,
               lambda g: g * b.data, lambda g: g * a.data)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _ew("div", a, b, lambda x, y: x / y,
               lambda g: g / b.data, lambda g: -g * a.data / (b.data * b.data))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), (lambda g: -g,))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), (lambda g: g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _record("reshape", out.copy(), (a,), (lambda g: g.reshape(old),))


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concatenate shapes do not conform: {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record("concatenate", out, ts, tuple(make_vjp(k) for k in range(len(ts))))


def gather(a: Tensor, index) -> Tensor:
    """Select rows (axis 0) of ``a`` by an integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather index out of range for {a.shape[0]} rows")
    n_rows = a.shape[0]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _record("gather", a.data[idx].copy(), (a,), (vjp,))


def scatter_add(a: Tensor, index, num_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``num_rows`` output rows given by ``index``."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add index shape {idx.shape} != ({a.shape[0]},)")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_add index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)
    return _record("scatter_add", out, (a,), (lambda g: g[idx],))


def sum_(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        return _record("sum", a.data.sum(), (a,),
                       (lambda g: np.broadcast_to(g, a.shape).copy(),))
    return _record("sum", a.data.sum(axis=axis), (a,),
                   (lambda g: np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
        return _record("mean", a.data.mean(), (a,),
                       (lambda g: np.broadcast_to(g / n, a.shape).copy(),))
    n = a.shape[axis]
    return _record("mean", a.data.mean(axis=axis), (a,),
                   (lambda g: np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise DomainError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _record("softmax", y, (a,), (vjp,))


def layer_norm(a: Tensor, eps: float = 1e-9) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = (a.data - mu) / sigma

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (g - gm - y * gym) / sigma

    return _record("layer_norm", y, (a,), (vjp,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _record("relu", np.where(mask, a.data, 0.0), (a,),
                   (lambda g: g * mask,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0.0).any():
        raise DomainError("log of non-positive value")
    return _record("log", np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0.0).any():
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), (lambda g: g * 0.5 / np.maximum(out, 1e-300),))


def elu1(a: Tensor) -> Tensor:
    """Positive kernel map elu(x) + 1 used by linear attention."""
    a = _as_tensor(a)
    pos = a.data > 0.0
    e = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data + 1.0, e)

    def vjp(g):
        return g * np.where(pos, 1.0, e)

    return _record("elu1", out, (a,), (vjp,))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit L2 norm."""
    a = _as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    y = a.data / n

    def vjp(g):
        return (g - y * (g * y).sum(axis=-1, keepdims=True)) / n

    return _record("l2_normalize", y, (a,), (vjp,))


# ---------------------------------------------------------------------------
# gradient checking


def _eval_scalar(fn, inputs):
    val = fn(*inputs)
    return float(val.data)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    ``fn`` must return a scalar tensor. Relative error per entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
    with Graph() as g:
        out = fn(*inputs)
        if out.data.ndim != 0:
            raise ShapeError(f"grad_check function must return a scalar, got {out.shape}")
        if not np.isfinite(out.data):
            raise GradCheckError("function produced a non-finite value at the base point")
        g.backward(out)
        analytic = [g.grad(t).copy() for t in inputs]

    max_rel = 0.0
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        ana = analytic[ti].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = _eval_scalar(fn, inputs)
            flat[j] = orig - h
            fm = _eval_scalar(fn, inputs)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite value while perturbing input {ti} entry {j}")
            num = (fp - fm) / (2.0 * h)
            rel = abs(ana[j] - num) / max(1e-8, abs(ana[j]) + abs(num))
            if rel > max_rel:
                max_rel = rel
    return max_rel


# ---------------------------------------------------------------------------
# parameter storage

_MAGIC = "fdmparams v1"


class ParameterStore:
    """Ordered name -> Tensor map with a bit-exact binary file format."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._params:
            raise KeyError(f"missing parameter {name!r}")
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = requires_grad
        self._params[name] = t
        return t

    def init_uniform(self, name: str, shape, rng: np.random.Generator,
                     fan_in: int | None = None) -> Tensor:
        if fan_in is None:
            fan_in = shape[0] if len(shape) >= 2 else max(shape[-1], 1)
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape, dtype=np.float64))

    def manifest(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self._params.items()}

    def validate(self, expected: dict[str, tuple]) -> None:
        """Fail unless names and shapes match ``expected`` exactly."""
        have = self.manifest()
        missing = sorted(set(expected) - set(have))
        extra = sorted(set(have) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={missing} extra={extra}")
        for k in expected:
            if tuple(expected[k]) != have[k]:
                raise ValueError(
                    f"parameter {k!r} shape mismatch: expected {tuple(expected[k])}, got {have[k]}")

    def save(self, path) -> None:
        header = [_MAGIC, f"n {len(self._params)}"]
        offset = 0
        blobs = []
        for name, t in self._params.items():
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            # ascontiguousarray promotes 0-d to (1,); keep the true shape
            shape = ",".join(str(s) for s in t.data.shape) or "scalar"
            header.append(f"{name} {shape} {offset}")
            blobs.append(arr.tobytes())
            offset += len(blobs[-1])
        header.append("data")
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("utf-8"))
            for b in blobs:
                f.write(b)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as f:
            raw = f.read()
        end = raw.index(b"data\n") + len(b"data\n")
        lines = raw[:end].decode("utf-8").splitlines()
        if lines[0] != _MAGIC:
            raise ValueError(f"{path}: not a parameter file")
        count = int(lines[1].split()[1])
        store = cls()
        data = raw[end:]
        for line in lines[2:2 + count]:
            name, shape_s, off_s = line.rsplit(" ", 2)
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
            n = int(np.prod(shape)) if shape else 1
            off = int(off_s)
            arr = np.frombuffer(data[off:off + 8 * n], dtype="<f8").reshape(shape).copy()
            store.add(name, arr)
        return store
