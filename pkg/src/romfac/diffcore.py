"""Dense float64 tensors with tape-based reverse-mode gradients.

Only what small feedforward actors and critics need: affine layers,
elementwise nonlinearities, softmax, logs, reductions and a handful of
shape helpers.  Every operation whose operands live on a
:class:`GradientTape` is recorded in creation order, so the backward pass
is a single reverse sweep over the tape.

Leaves are created through the tape and are tagged either ``"param"``
(network weights, used for training) or ``"input"`` (observations, used
for input-gradient attacks).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12

ACTIVATIONS = ("relu", "tanh", "identity")

MAGIC = b"DIFFCORE"
FORMAT_VERSION = 1


class DiffcoreError(Exception):
    pass


class ConfigurationError(DiffcoreError, ValueError):
    pass


class NumericError(DiffcoreError, FloatingPointError):
    pass


class UsageError(DiffcoreError, RuntimeError):
    pass


class FormatError(DiffcoreError, ValueError):
    pass


class Tensor:
    """A float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "parents", "vjp", "kind", "__weakref__")

    def __init__(self, data, tape=None, parents=(), vjp=None, kind=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.kind = kind

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        where = "tape" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class GradientTape:
    """Records operations and runs the reverse sweep.

    Not thread-safe; use one tape per thread.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def _leaf(self, array, kind: str) -> Tensor:
        t = Tensor(np.array(array, dtype=np.float64), tape=self, kind=kind)
        self.leaves.append(t)
        return t

    def param(self, array) -> Tensor:
        return self._leaf(array, "param")

    def input(self, array) -> Tensor:
        return self._leaf(array, "input")

    def parameters(self, net: "FeedforwardNet") -> list[Tensor]:
        return [self.param(p) for p in net.params()]

    def record(self, data, parents, vjp) -> Tensor:
        node = Tensor(data, tape=self, parents=parents, vjp=vjp)
        self.nodes.append(node)
        return node

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``output`` for every leaf on this tape.

        Leaves with no path to ``output`` get zero gradients.
        """
        if output.data.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {}
        if output.tape is self:
            grads[id(output)] = np.ones_like(output.data)
            start = len(self.nodes)
            if output.kind is None:
                start = _index_of(self.nodes, output) + 1
            for node in reversed(self.nodes[:start]):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if parent.tape is not self or pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        elif output.tape is not None:
            raise UsageError("output was recorded on a different tape")
        return {
            leaf: np.array(grads.get(id(leaf), np.zeros_like(leaf.data)), dtype=np.float64)
            for leaf in self.leaves
        }


def _index_of(nodes, target):
    for i in range(len(nodes) - 1, -1, -1):
        if nodes[i] is target:
            return i
    raise UsageError("output node is not on the tape")


def backward(tape: GradientTape, output: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(output)


# ---------------------------------------------------------------- op helpers


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise UsageError("operands recorded on different tapes")
    return tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, vjp):
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    return tape.record(data, tuple(parents), vjp)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log with inputs clamped from below at ``floor``.

    The gradient is zero where the clamp is active.
    """
    a = _as_tensor(a)
    clamped = np.maximum(a.data, floor)
    active = a.data > floor
    return _make(np.log(clamped), (a,), lambda g: (np.where(active, g / clamped, 0.0),))


def activate(a, name: str) -> Tensor:
    if name == "relu":
        return relu(a)
    if name == "tanh":
        return tanh(a)
    if name == "identity":
        return _as_tensor(a)
    raise ConfigurationError(f"unknown activation {name!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), vjp)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def take_rows(a, index) -> Tensor:
    """``a[i, index[i]]`` for a 2-D ``a``; ``a[index]`` for 1-D."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape
    if a.ndim == 1:
        out = a.data[index]

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return _make(out, (a,), vjp)
    rows = np.arange(shape[0])
    out = a.data[rows, index]

    def vjp(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------- distributions


def softmax(logits) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    logits = _as_tensor(logits)
    x = logits.data
    if x.size == 0 or x.shape[-1] == 0:
        raise NumericError("softmax of an empty tensor")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), vjp)


def cross_entropy(probs, label) -> Tensor:
    """``-log probs[label]`` per row, floored at :data:`PROB_FLOOR`.

    1-D ``probs`` with an integer label gives a scalar; 2-D ``probs`` with
    a label array gives one loss per row.
    """
    probs = _as_tensor(probs)
    label_arr = np.asarray(label, dtype=np.int64)
    n_actions = probs.shape[-1]
    if np.any(label_arr < 0) or np.any(label_arr >= n_actions):
        raise ConfigurationError(f"label out of range for {n_actions} actions")
    return mul(log(take_rows(probs, label_arr)), -1.0)


# ---------------------------------------------------------------- networks


@dataclass
class FeedforwardNet:
    """Fully connected net: hidden layers use ``activation``, the last is affine."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ConfigurationError(f"invalid layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ConfigurationError("one weight and one bias per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ConfigurationError(f"layer {i} has shapes {w.shape}, {b.shape}")

    @classmethod
    def zeros(cls, widths: Sequence[int], activation: str = "relu") -> "FeedforwardNet":
        widths = tuple(widths)
        return cls(
            widths,
            [np.zeros((widths[i], widths[i + 1])) for i in range(len(widths) - 1)],
            [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)],
            activation,
        )

    @classmethod
    def initialise(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        activation: str = "relu",
        output_scale: float = 1.0,
    ) -> "FeedforwardNet":
        """He-style uniform init; the last layer is scaled by ``output_scale``."""
        net = cls.zeros(widths, activation)
        n = len(net.weights)
        for i in range(n):
            fan_in = net.widths[i]
            bound = np.sqrt(6.0 / fan_in) if i < n - 1 else np.sqrt(3.0 / fan_in) * output_scale
            net.weights[i][...] = rng.uniform(-bound, bound, size=net.weights[i].shape)
        return net

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_outputs(self) -> int:
        return self.widths[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "FeedforwardNet":
        return FeedforwardNet(
            self.widths,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def assign(self, other: "FeedforwardNet") -> None:
        for mine, theirs in zip(self.params(), other.params()):
            mine[...] = theirs

    def __call__(self, x, params: Sequence[Tensor] | None = None) -> Tensor:
        x = _as_tensor(x)
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_inputs:
            raise ConfigurationError(f"input shape {x.shape} does not match width {self.n_inputs}")
        if params is None:
            params = [Tensor(p) for p in self.params()]
        h = x
        n = len(self.weights)
        for i in range(n):
            h = add(matmul(h, params[2 * i]), params[2 * i + 1])
            if i < n - 1:
                h = activate(h, self.activation)
        return h

    # serialization

    def to_bytes(self) -> bytes:
        head = struct.pack("<8sII", MAGIC, FORMAT_VERSION, len(self.widths))
        head += struct.pack(f"<{len(self.widths)}I", *self.widths)
        head += struct.pack("<B", ACTIVATIONS.index(self.activation))
        body = b"".join(p.astype("<f8").tobytes() for p in self.params())
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeedforwardNet":
        net, used = _read_net(blob, 0)
        if used != len(blob):
            raise FormatError(f"{len(blob) - used} trailing bytes after network")
        return net

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeedforwardNet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _read_net(blob: bytes, offset: int) -> tuple[FeedforwardNet, int]:
    try:
        magic, version, n = struct.unpack_from("<8sII", blob, offset)
    except struct.error as exc:
        raise FormatError("truncated network header") from exc
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    offset += struct.calcsize("<8sII")
    try:
        widths = struct.unpack_from(f"<{n}I", blob, offset)
        offset += 4 * n
        (act,) = struct.unpack_from("<B", blob, offset)
        offset += 1
    except struct.error as exc:
        raise FormatError("truncated network header") from exc
    if act >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation code {act}")
    net = FeedforwardNet.zeros(widths, ACTIVATIONS[act])
    for p in net.params():
        nbytes = 8 * p.size
        if offset + nbytes > len(blob):
            raise FormatError("truncated parameter block")
        p[...] = np.frombuffer(blob, dtype="<f8", count=p.size, offset=offset).reshape(p.shape)
        offset += nbytes
    return net, offset


def forward(net: FeedforwardNet, input) -> Tensor:
    return net(input)


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g

    def state_dict(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def make_optimizer(kind: str, params: list[np.ndarray], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- gradient checks


@dataclass
class GradcheckResult:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    failures: list[str] = field(default_factory=list)


def compare_gradients(analytic, numeric, rel_tol=1e-4, abs_tol=1e-7, label="") -> GradcheckResult:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel_err = np.divide(abs_err, scale, out=np.zeros_like(abs_err), where=scale > 0)
    bad = (abs_err > abs_tol) & (rel_err > rel_tol)
    failures = [f"{label}[{i}]: analytic={analytic[i]:.6g} numeric={numeric[i]:.6g}" for i in np.flatnonzero(bad)]
    # relative error only means something away from zero
    meaningful = scale > abs_tol
    return GradcheckResult(
        passed=not failures,
        max_rel_error=float(rel_err[meaningful].max()) if meaningful.any() else 0.0,
        max_abs_error=float(abs_err.max()) if abs_err.size else 0.0,
        n_checked=int(analytic.size),
        failures=failures,
    )


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fn()
        flat[i] = old - step
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def _merge(results: Iterable[GradcheckResult]) -> GradcheckResult:
    results = list(results)
    return GradcheckResult(
        passed=all(r.passed for r in results),
        max_rel_error=max((r.max_rel_error for r in results), default=0.0),
        max_abs_error=max((r.max_abs_error for r in results), default=0.0),
        n_checked=sum(r.n_checked for r in results),
        failures=[f for r in results for f in r.failures],
    )


def gradcheck_net(
    net: FeedforwardNet,
    x: np.ndarray,
    label: int,
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-7,
    tamper: Callable[[dict], dict] | None = None,
) -> GradcheckResult:
    """Check d/d(params, input) of cross_entropy(softmax(net(x)), label).

    ``tamper`` lets a caller corrupt the analytic gradients (negative control).
    """
    x = np.array(x, dtype=np.float64)
    tape = GradientTape()
    params = tape.parameters(net)
    xin = tape.input(x)
    loss = cross_entropy(softmax(net(xin, params)), label)
    grads = tape.backward(loss)
    if tamper is not None:
        grads = tamper(grads)

    def value():
        return cross_entropy(softmax(net(x)), label).item()

    results = [
        compare_gradients(grads[leaf], numeric_gradient(value, arr, step), rel_tol, abs_tol, f"param{i}")
        for i, (leaf, arr) in enumerate(zip(params, net.params()))
    ]
    results.append(compare_gradients(grads[xin], numeric_gradient(value, x, step), rel_tol, abs_tol, "input"))
    return _merge(results)


def gradcheck_suite(
    n_cases: int = 100,
    seed: int = 0,
    tamper: Callable[[dict], dict] | None = None,
) -> GradcheckResult:
    """Random small nets and inputs, both activations, through :func:`gradcheck_net`."""
    rng = np.random.default_rng(seed)
    results = []
    for case in range(n_cases):
        n_in = int(rng.integers(2, 7))
        hidden = int(rng.integers(2, 9))
        n_out = int(rng.integers(2, 6))
        act = ACTIVATIONS[case % 2]
        net = FeedforwardNet.initialise((n_in, hidden, n_out), rng, act)
        for b in net.biases:
            b[...] = rng.normal(0.0, 0.3, size=b.shape)
        x = rng.normal(size=n_in)
        results.append(gradcheck_net(net, x, int(rng.integers(n_out)), tamper=tamper))
    return _merge(results)
