"""A small reverse-mode differentiation engine over float64 numpy arrays.

Graphs are built eagerly on a :class:`Tape`: every operation computes its
value when recorded, and the tape keeps nodes in creation order, which is a
valid topological order. :meth:`Tape.forward` replays the graph from the
current leaf values (used by finite-difference checks) and
:meth:`Tape.backward` accumulates adjoints into every node that depends on a
trainable leaf.

Subgradient convention for ``clamp_max``/``clamp_min``: at a tie the clamped
(constant) branch wins, so the gradient there is zero.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Node", "Tape", "ShapeError", "NonFiniteError", "forward", "backward",
    "grad_check", "AdamState", "adam_step", "init_uniform",
    "save_checkpoint", "load_checkpoint", "dump_checkpoint", "parse_checkpoint",
    "add", "sub", "mul", "neg", "scale", "matvec", "bilinear", "tanh", "sigmoid",
    "log", "power", "clamp_max", "clamp_min", "sum", "mean", "concat", "take",
    "LOG_EPS",
]

LOG_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"non-finite value produced by {op!r}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x):
    # exp(-log(1 + exp(-x))) never overflows
    return np.exp(-np.logaddexp(0.0, -x))


def _matvec_fwd(m, x):
    return x @ m.T if m.ndim == 2 else x @ m


def _matvec_vjp(g, out, m, x):
    n = x.shape[-1]
    if m.ndim == 2:
        gm = g.reshape(-1, m.shape[0]).T @ x.reshape(-1, n)
        gx = g @ m
    else:
        gm = g.reshape(-1) @ x.reshape(-1, n)
        gx = g[..., None] * m
    return gm, gx


def _bilinear_fwd(x, w):
    # out[..., k] = x^T W[k] x
    d = x.shape[-1]
    x2 = x.reshape(-1, d)
    xw = np.tensordot(x2, w, axes=([1], [1]))  # (n, k, j)
    return (xw * x2[:, None, :]).sum(-1).reshape(x.shape[:-1] + (w.shape[0],))


def _bilinear_vjp(g, out, x, w):
    d, k = x.shape[-1], w.shape[0]
    g2, x2 = g.reshape(-1, k), x.reshape(-1, d)
    outer = (x2[:, :, None] * x2[:, None, :]).reshape(-1, d * d)
    gw = (g2.T @ outer).reshape(k, d, d)
    sym = w + np.swapaxes(w, 1, 2)
    t = np.tensordot(x2, sym, axes=([1], [2]))  # (n, k, i)
    gx = (g2[:, :, None] * t).sum(1).reshape(x.shape)
    return gx, gw


def _power_vjp(g, out, a, *, p):
    if p == 0:
        return (np.zeros_like(a),)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = p * np.power(a, p - 1)
    return (g * np.where(np.isfinite(d), d, 0.0),)


def _reduce_vjp(g, a, axis, scale=1.0):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g * scale, a.shape).copy(),)


def _concat_vjp(g, out, *xs, axis):
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _take_vjp(g, out, a, *, idx):
    ga = np.zeros_like(a)
    np.add.at(ga, idx, g)
    return (ga,)


# op name -> (forward(*values, **attrs), vjp(grad, out, *values, **attrs))
_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (np.add, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": (np.subtract, lambda g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))),
    "mul": (np.multiply, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "neg": (np.negative, lambda g, out, a: (-g,)),
    "scale": (lambda a, *, c: c * a, lambda g, out, a, *, c: (c * g,)),
    "matvec": (_matvec_fwd, _matvec_vjp),
    "bilinear": (_bilinear_fwd, _bilinear_vjp),
    "tanh": (np.tanh, lambda g, out, a: (g * (1.0 - out * out),)),
    "sigmoid": (_sigmoid, lambda g, out, a: (g * out * (1.0 - out),)),
    "log": (lambda a, *, eps: np.log(np.maximum(a, eps)) if eps > 0 else np.log(a),
            lambda g, out, a, *, eps: (np.where(a > eps, g / np.maximum(a, eps), 0.0)
                                        if eps > 0 else g / a,)),
    "power": (lambda a, *, p: np.power(a, p), _power_vjp),
    "clamp_max": (lambda a, *, c: np.minimum(a, c), lambda g, out, a, *, c: (np.where(a < c, g, 0.0),)),
    "clamp_min": (lambda a, *, c: np.maximum(a, c), lambda g, out, a, *, c: (np.where(a > c, g, 0.0),)),
    "sum": (lambda a, *, axis: np.sum(a, axis=axis),
            lambda g, out, a, *, axis: _reduce_vjp(g, a, axis)),
    "mean": (lambda a, *, axis: np.mean(a, axis=axis),
             lambda g, out, a, *, axis: _reduce_vjp(g, a, axis, out.size / a.size)),
    "concat": (lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp),
    "take": (lambda a, *, idx: a[idx], _take_vjp),
}


class Node:
    """One value in a computation graph."""

    __slots__ = ("tape", "op", "inputs", "attrs", "value", "grad", "requires_grad", "name")
    # make ``ndarray <op> Node`` dispatch to the reflected Node operator
    __array_ufunc__ = None

    def __init__(self, tape, op, inputs, attrs, value, requires_grad, name=None):
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape}{', ' + self.name if self.name else ''})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)


class Tape:
    """Single-owner record of a computation graph."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: list[Node] = []
        self.output: Node | None = None

    def __len__(self):
        return len(self.nodes)

    def constant(self, value, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteError("constant", f"non-finite constant {name or ''}".strip())
        node = Node(self, "leaf", (), {}, value, False, name)
        self.nodes.append(node)
        return node

    def parameter(self, value, name: str) -> Node:
        """A trainable leaf. ``value`` is used without copying when already float64."""
        # contiguous so grad_check can perturb entries through a flat view
        node = self.constant(np.asarray(value, dtype=np.float64, order="C"), name)
        node.requires_grad = True
        self.parameters.append(node)
        return node

    def apply(self, op: str, *inputs, **attrs) -> Node:
        nodes = tuple(x if isinstance(x, Node) else self.constant(x) for x in inputs)
        for x in nodes:
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
        fwd, _ = _OPS[op]
        try:
            # overflow surfaces as NonFiniteError below rather than as a warning
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                value = np.asarray(fwd(*(x.value for x in nodes), **attrs), dtype=np.float64)
        except ValueError as exc:
            shapes = ", ".join(str(x.shape) for x in nodes)
            raise ShapeError(f"{op}: incompatible shapes {shapes}") from exc
        if not np.isfinite(value).all():
            raise NonFiniteError(op)
        node = Node(self, op, nodes, attrs, value, any(x.requires_grad for x in nodes))
        self.nodes.append(node)
        self.output = node
        return node

    def forward(self, output: Node | None = None) -> np.ndarray:
        """Recompute every non-leaf node from the current leaf values."""
        _recompute(n for n in self.nodes if n.op != "leaf")
        out = output or self.output
        return out.value

    def downstream(self, leaf: Node, output: Node) -> list[Node]:
        """Non-leaf nodes up to ``output`` whose value depends on ``leaf``, in tape order."""
        stop = self.nodes.index(output)
        dirty = {id(leaf)}
        out = []
        for node in self.nodes[:stop + 1]:
            if node.op != "leaf" and any(id(x) in dirty for x in node.inputs):
                dirty.add(id(node))
                out.append(node)
        return out

    def backward(self, output: Node | None = None) -> dict[str, np.ndarray]:
        """Accumulate d(output)/d(node) and return gradients of the trainable leaves."""
        out = output or self.output
        if out is None or out.value.size != 1:
            raise ShapeError("backward requires a scalar output")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value)
        stop = self.nodes.index(out)
        for node in reversed(self.nodes[:stop + 1]):
            if node.grad is None or not node.inputs or not node.requires_grad:
                continue
            _, vjp = _OPS[node.op]
            grads = vjp(node.grad, node.value, *(x.value for x in node.inputs), **node.attrs)
            for x, gx in zip(node.inputs, grads):
                if not x.requires_grad:
                    continue
                x.grad = gx if x.grad is None else x.grad + gx
        result = {}
        for p in self.parameters:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            result[p.name] = result[p.name] + g if p.name in result else g
        return result


def _recompute(nodes) -> None:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in nodes:
            fwd, _ = _OPS[node.op]
            value = np.asarray(fwd(*(x.value for x in node.inputs), **node.attrs), dtype=np.float64)
            if not np.isfinite(value).all():
                raise NonFiniteError(node.op)
            node.value = value


def forward(tape: Tape, output: Node | None = None) -> np.ndarray:
    return tape.forward(output)


def backward(tape: Tape, output: Node | None = None) -> dict[str, np.ndarray]:
    return tape.backward(output)


def grad_check(tape: Tape, eps: float = 1e-6, output: Node | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    For each trainable leaf the error is ``|a - c| / max(1e-12, |a| + |c|)``
    with ``|.|`` the Euclidean norm over the leaf's entries, so gradient
    entries that are numerically zero do not dominate. Leaf values are
    restored afterwards.
    """
    out = output or tape.output
    tape.forward(out)
    tape.backward(out)
    worst = 0.0
    for p in tape.parameters:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        analytic = np.array(analytic, dtype=np.float64).reshape(-1)
        central = np.empty_like(analytic)
        flat = p.value.reshape(-1)
        # only the nodes fed by this leaf change when it is perturbed
        affected = tape.downstream(p, out)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            _recompute(affected)
            f_plus = out.value.item()
            flat[i] = saved - eps
            _recompute(affected)
            f_minus = out.value.item()
            flat[i] = saved
            central[i] = (f_plus - f_minus) / (2.0 * eps)
        _recompute(affected)
        denom = max(1e-12, float(np.linalg.norm(analytic) + np.linalg.norm(central)))
        worst = max(worst, float(np.linalg.norm(analytic - central)) / denom)
    tape.forward(out)
    return worst


# ---------------------------------------------------------------------------
# graph-building helpers

def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a graph node")


def add(a, b): return _tape_of(a, b).apply("add", a, b)
def sub(a, b): return _tape_of(a, b).apply("sub", a, b)
def mul(a, b): return _tape_of(a, b).apply("mul", a, b)
def neg(a): return a.tape.apply("neg", a)
def scale(a, c: float): return a.tape.apply("scale", a, c=float(c))
def tanh(a): return a.tape.apply("tanh", a)
def sigmoid(a): return a.tape.apply("sigmoid", a)
def power(a, p: float): return a.tape.apply("power", a, p=float(p))
def clamp_max(a, c: float): return a.tape.apply("clamp_max", a, c=float(c))
def clamp_min(a, c: float): return a.tape.apply("clamp_min", a, c=float(c))
def sum(a, axis=None): return a.tape.apply("sum", a, axis=axis)  # noqa: A001
def mean(a, axis=None): return a.tape.apply("mean", a, axis=axis)


def log(a, eps: float = LOG_EPS):
    """Guarded logarithm ``log(max(a, eps))``; pass ``eps=0`` for the raw log."""
    return a.tape.apply("log", a, eps=float(eps))


def matvec(m, x):
    """``x @ m.T`` for a matrix ``m`` (k, n), or ``x @ m`` for a vector ``m``."""
    return _tape_of(m, x).apply("matvec", m, x)


def bilinear(x, w):
    """Stacked quadratic forms ``x^T W[k] x`` for ``w`` of shape (k, d, d)."""
    return _tape_of(x, w).apply("bilinear", x, w)


def bilinear_value(x, w) -> np.ndarray:
    """Numpy counterpart of :func:`bilinear`."""
    return _bilinear_fwd(np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64))


def concat(xs, axis=-1):
    return _tape_of(*xs).apply("concat", *xs, axis=axis)


def take(a, idx):
    """Gather rows of ``a`` along the first axis."""
    return a.tape.apply("take", a, idx=np.asarray(idx, dtype=np.intp))


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """One Adam update. Weight decay enters as ``weight_decay * theta`` added to the gradient.

    Raises :class:`NonFiniteError` without touching ``params`` if any gradient
    is non-finite.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError("adam_step", f"non-finite gradient for {name}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        g = g + weight_decay * theta
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t, b1, b2, state.eps)


def init_uniform(rng: np.random.Generator, shape, scale: float = 0.05) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


# ---------------------------------------------------------------------------
# checkpoint format: "LTNW", u32 version, u64 count, then per parameter
# u32 name length, utf-8 name, u32 rank, u64 dims, f64 payload (little endian)

_MAGIC = b"LTNW"
_VERSION = 1


def dump_checkpoint(params: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IQ", _VERSION, len(params)))
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(value.tobytes(order="C"))
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    try:
        return _parse_checkpoint(memoryview(data))
    except struct.error:
        raise ValueError("truncated checkpoint") from None


def _parse_checkpoint(view: memoryview) -> dict[str, np.ndarray]:
    if bytes(view[:4]) != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<IQ", view, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * size > len(view):
            raise ValueError("truncated checkpoint")
        params[name] = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(view):
        raise ValueError("trailing bytes in checkpoint")
    return params


def save_checkpoint(path, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
