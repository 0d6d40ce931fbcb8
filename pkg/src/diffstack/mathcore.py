"""Dense math primitives, seeded random streams and a reverse-mode gradient tape.

Matrices are plain ``numpy.ndarray`` objects in float64 (row-major). The tape
records every primitive applied to :class:`Var` nodes so that
:func:`backward` can replay the computation in reverse and accumulate
gradients for the named parameters.

Random numbers come from :class:`RngStream`, a thin wrapper over numpy's
``PCG64`` bit generator (128-bit state, XSL-RR output) seeded through
``SeedSequence``.  Gaussian draws use numpy's ziggurat sampler.  The bit
stream is identical on every platform for a given numpy release; float
results can drift across BLAS/libm builds only in the last ulp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

TANH_SCALE = 1.7519
TANH_SLOPE = 2.0 / 3.0


class NonFiniteError(FloatingPointError):
    """Raised when a named tensor holds NaN or Inf."""

    def __init__(self, name: str, where: str = "value"):
        super().__init__(f"non-finite {where} in tensor '{name}'")
        self.name = name
        self.where = where


def check_finite(name: str, arr, where: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name, where)


# ---------------------------------------------------------------------------
# activations (plain numpy)


def scaled_tanh(x):
    return TANH_SCALE * np.tanh(TANH_SLOPE * np.asarray(x, dtype=DTYPE))


def logistic(x):
    x = np.asarray(x, dtype=DTYPE)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(x):
    x = np.asarray(x, dtype=DTYPE)
    s = x - x.max()
    return s - np.log(np.exp(s).sum())


def uniform_init(rng: "RngStream", rows: int, cols: int | None = None):
    """Uniform weights in +-1/sqrt(fan_in); fan_in is the column count."""
    shape = (rows,) if cols is None else (rows, cols)
    fan_in = rows if cols is None else cols
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.generator.uniform(-bound, bound, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# random streams


class RngStream:
    """Deterministic random stream (numpy PCG64 seeded via SeedSequence)."""

    algorithm = "numpy.PCG64/SeedSequence"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream derived from (seed, key)."""
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        child.generator = np.random.Generator(np.random.PCG64(ss))
        return child

    def random(self) -> float:
        return float(self.generator.random())

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low: float, high: float) -> float:
        return float(self.generator.uniform(low, high))

    def shuffle(self, seq: list) -> None:
        order = self.generator.permutation(len(seq))
        seq[:] = [seq[i] for i in order]


def gaussian(rng: RngStream, mu: float, sigma2: float, n: int):
    if sigma2 < 0:
        raise ValueError(f"variance must be non-negative, got {sigma2}")
    if sigma2 == 0:
        return np.full(n, float(mu), dtype=DTYPE)
    return rng.generator.normal(mu, np.sqrt(sigma2), size=n).astype(DTYPE)


# ---------------------------------------------------------------------------
# reverse-mode tape


@dataclass(eq=False)
class Var:
    value: np.ndarray
    tape: "GradTape"
    parents: tuple = ()
    backward_fn: Callable | None = None
    name: str | None = None
    grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)


class GradTape:
    """Ordered record of primitive operations for reverse accumulation."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, value) -> Var:
        v = Var(np.array(value, dtype=DTYPE), self, name=name)
        self.params[name] = v
        self.nodes.append(v)
        return v

    def const(self, value) -> Var:
        v = Var(np.array(value, dtype=DTYPE), self)
        self.nodes.append(v)
        return v

    def lift(self, x) -> Var:
        return x if isinstance(x, Var) else self.const(x)

    def record(self, value, parents: Sequence[Var], backward_fn) -> Var:
        v = Var(np.asarray(value, dtype=DTYPE), self, tuple(parents), backward_fn)
        self.nodes.append(v)
        return v


def backward(tape: GradTape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse accumulation from a scalar ``loss``; returns d loss / d param."""
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            g = _unbroadcast(np.asarray(g, dtype=DTYPE), parent.value.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    out = {}
    for name, p in tape.params.items():
        g = np.zeros_like(p.value) if p.grad is None else p.grad
        check_finite(name, g, "gradient")
        out[name] = g
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Var):
        return a, a.tape.lift(b)
    return b.tape.lift(a), b


def add(a, b) -> Var:
    a, b = _pair(a, b)
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    return a.tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def matvec(W: Var, x: Var) -> Var:
    Wv, xv = W.value, x.value
    return W.tape.record(Wv @ xv, (W, x), lambda g: (np.outer(g, xv), Wv.T @ g))


def column(W: Var, j: int) -> Var:
    """``W @ onehot(j)`` without materialising the one-hot vector."""
    Wv = W.value

    def bw(g):
        gW = np.zeros_like(Wv)
        gW[:, j] = g
        return (gW,)

    return W.tape.record(Wv[:, j], (W,), bw)


def dot(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.record(np.dot(av, bv), (a, b), lambda g: (g * bv, g * av))


def total(a: Var) -> Var:
    shape = a.value.shape
    return a.tape.record(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape),))


def index(a: Var, idx) -> Var:
    av = a.value

    def bw(g):
        ga = np.zeros_like(av)
        np.add.at(ga, idx, g)
        return (ga,)

    return a.tape.record(av[idx], (a,), bw)


def concat(parts: Sequence[Var]) -> Var:
    tape = parts[0].tape
    sizes = [p.value.size for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    val = np.concatenate([np.atleast_1d(p.value) for p in parts])
    shapes = [p.value.shape for p in parts]
    return tape.record(
        val, tuple(parts), lambda g: tuple(s.reshape(sh) for s, sh in zip(np.split(g, cuts), shapes))
    )


def tanh_scaled(x: Var) -> Var:
    t = np.tanh(TANH_SLOPE * x.value)
    return x.tape.record(TANH_SCALE * t, (x,), lambda g: (g * TANH_SCALE * TANH_SLOPE * (1 - t * t),))


def sigmoid(x: Var) -> Var:
    s = logistic(x.value)
    return x.tape.record(s, (x,), lambda g: (g * s * (1 - s),))


def softmax_v(x: Var) -> Var:
    p = softmax(x.value)
    return x.tape.record(p, (x,), lambda g: (p * (g - np.dot(g, p)),))


def log_softmax_v(x: Var) -> Var:
    ls = log_softmax(x.value)
    p = np.exp(ls)
    return x.tape.record(ls, (x,), lambda g: (g - p * g.sum(),))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape.record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def shift_down(s: Var, top: Var) -> Var:
    """``[top, s[0], ..., s[n-2]]``: the push shift (bottom cell falls off)."""
    sv = s.value

    def bw(g):
        gs = np.zeros_like(sv)
        gs[:-1] = g[1:]
        return gs, g[0]

    out = np.empty_like(sv)
    out[0] = top.value
    out[1:] = sv[:-1]
    return s.tape.record(out, (s, top), bw)


def shift_up(s: Var) -> Var:
    """``[s[1], ..., s[n-1], 0]``: the pop shift."""
    sv = s.value

    def bw(g):
        gs = np.zeros_like(sv)
        gs[1:] = g[:-1]
        return (gs,)

    out = np.zeros_like(sv)
    out[:-1] = sv[1:]
    return s.tape.record(out, (s,), bw)


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[dict], float], params: dict[str, np.ndarray], h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` for every entry of ``params``."""
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(params)
            flat[i] = old - h
            fm = f(params)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(a: dict, b: dict, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor) across all entries of matching dicts."""
    if set(a) != set(b):
        raise KeyError(f"gradient keys differ: {sorted(set(a) ^ set(b))}")
    worst = 0.0
    for k in a:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
