"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Tensor` handles.
The recording can be replayed with new leaf values (:func:`forward`) and
differentiated from any scalar node (:func:`backward`).  Only the operations
needed by the MLP losses are provided; broadcasting follows numpy rules and is
summed back out in the backward pass.

Example::

    tape = Tape()
    x = tape.leaf("x", 3.0)
    y = x * x
    backward(tape, y)["x"]   # -> array(6.)
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

LOG_EPS = 1e-12
LOG_FLOOR = float(np.log(LOG_EPS))
LEAKY_SLOPE = 0.1


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# --- op table: name -> (forward(values, attrs), vjp(grad, out, values, attrs)) ---

def _check_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")


def _check_broadcast(vals, attrs):
    try:
        np.broadcast_shapes(vals[0].shape, vals[1].shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {vals[0].shape} with {vals[1].shape}") from None


def _clamped_log_softmax_vjp(g, out, vals, attrs):
    live = out > attrs["floor"]
    gl = np.where(live, g, 0.0)
    return (gl - np.exp(out) * gl.sum(axis=-1, keepdims=True),)


def _log_clamped_vjp(g, out, vals, attrs):
    (a,) = vals
    live = (a > attrs["eps"]) & (a < 1.0)
    return (np.where(live, g / np.where(live, a, 1.0), 0.0),)


def _sum_vjp(g, out, vals, attrs):
    (a,) = vals
    axis = attrs.get("axis")
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _mean_vjp(g, out, vals, attrs):
    (a,) = vals
    return (np.full(a.shape, float(g) / a.size),)


def _softmax_vjp(g, out, vals, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


_OPS: dict[str, tuple[Callable, Callable, Callable | None]] = {
    "add": (lambda v, a: v[0] + v[1],
            lambda g, o, v, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
            _check_broadcast),
    "sub": (lambda v, a: v[0] - v[1],
            lambda g, o, v, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
            _check_broadcast),
    "mul": (lambda v, a: v[0] * v[1],
            lambda g, o, v, a: (_unbroadcast(g * v[1], v[0].shape),
                                _unbroadcast(g * v[0], v[1].shape)),
            _check_broadcast),
    "neg": (lambda v, a: -v[0], lambda g, o, v, a: (-g,), None),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, o, v, a: (g * a["c"],), None),
    "matmul": (lambda v, a: v[0] @ v[1],
               lambda g, o, v, a: (g @ v[1].T, v[0].T @ g),
               _check_matmul),
    "leaky_relu": (lambda v, a: np.where(v[0] > 0, v[0], a["slope"] * v[0]),
                   lambda g, o, v, a: (np.where(v[0] > 0, g, a["slope"] * g),),
                   None),
    "softmax": (lambda v, a: _softmax(v[0]), _softmax_vjp, None),
    "clamped_log_softmax": (lambda v, a: np.maximum(_log_softmax(v[0]), a["floor"]),
                            _clamped_log_softmax_vjp, None),
    "log_clamped": (lambda v, a: np.log(np.clip(v[0], a["eps"], 1.0)), _log_clamped_vjp, None),
    "sum": (lambda v, a: np.asarray(v[0].sum(axis=a.get("axis"))), _sum_vjp, None),
    "mean": (lambda v, a: np.asarray(v[0].mean()), _mean_vjp, None),
    "stop_gradient": (lambda v, a: v[0], lambda g, o, v, a: (np.zeros_like(v[0]),), None),
    "onehot_argmax": (lambda v, a: np.eye(v[0].shape[-1])[np.argmax(v[0], axis=-1)],
                      lambda g, o, v, a: (np.zeros_like(v[0]),), None),
}

# ops whose backward is identically zero; the walk can skip their inputs
_BLOCKING = frozenset({"stop_gradient", "onehot_argmax"})


class Node:
    __slots__ = ("op", "inputs", "attrs", "name", "value", "stop")

    def __init__(self, op, inputs, attrs, name, value, stop=False):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name
        self.value = value
        self.stop = stop

    def __repr__(self):
        label = self.name or f"{self.op}{list(self.inputs)}"
        return f"Node({label}, shape={self.value.shape})"


class Tensor:
    """Handle to a node on a tape; arithmetic records new nodes."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise AutodiffError("tensors belong to different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._wrap(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._wrap(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._wrap(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, self._wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._wrap(other))

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", self._wrap(other), self)

    def sum(self, axis=None):
        return self.tape.apply("sum", self, axis=axis)

    def mean(self):
        return self.tape.apply("mean", self)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"


class Tape:
    """Append-only record of operations.

    Node inputs always refer to earlier nodes, so the node list is already in
    topological order.  With ``check_finite`` every op result is checked and a
    :class:`NonFiniteError` naming the op is raised on NaN/Inf.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, name: str, value, stop_gradient: bool = False) -> Tensor:
        """Named input; replaced on replay and reported by :meth:`backward`."""
        if name in self.leaves:
            raise AutodiffError(f"duplicate leaf name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"leaf {name!r} has non-finite entries")
        t = self._push(Node("leaf", (), {}, name, arr, stop_gradient))
        self.leaves[name] = t.id
        return t

    def constant(self, value) -> Tensor:
        return self._push(Node("const", (), {}, None, np.array(value, dtype=np.float64)))

    def apply(self, op: str, *inputs: Tensor, **attrs) -> Tensor:
        fwd, _, check = _OPS[op]
        vals = [self.nodes[t.id].value for t in inputs]
        if check is not None:
            try:
                check(vals, attrs)
            except ShapeError as exc:
                raise ShapeError(f"node {len(self.nodes)} ({op}): {exc}") from None
        out = fwd(vals, attrs)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite value produced by op {op!r} at node {len(self.nodes)}")
        return self._push(Node(op, tuple(t.id for t in inputs), attrs, None, out))

    def mark_output(self, name: str, tensor: Tensor) -> Tensor:
        self.outputs[name] = tensor.id
        return tensor

    # -- replay and differentiation --

    def forward(self, inputs: dict | None = None, outputs: Iterable[str] | None = None,
                hold_stopped: bool = False) -> dict:
        """Recompute every node with ``inputs`` substituted for named leaves.

        Leaves not named in ``inputs`` keep their recorded values, as do
        constants.  With ``hold_stopped`` the stop-gradient and argmax nodes
        also keep their recorded values, which turns the replay into the
        function whose gradient :meth:`backward` computes.  Recorded values on
        the tape are updated in place.
        """
        inputs = inputs or {}
        unknown = set(inputs) - set(self.leaves)
        if unknown:
            raise AutodiffError(f"unknown inputs {sorted(unknown)}")
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                if node.name in inputs:
                    arr = np.array(inputs[node.name], dtype=np.float64)
                    if arr.shape != node.value.shape:
                        raise ShapeError(
                            f"input {node.name!r} (node {i}) expects shape "
                            f"{node.value.shape}, got {arr.shape}")
                    node.value = arr
                continue
            if node.op == "const" or (hold_stopped and node.op in _BLOCKING):
                continue
            fwd, _, check = _OPS[node.op]
            vals = [self.nodes[j].value for j in node.inputs]
            if check is not None:
                try:
                    check(vals, node.attrs)
                except ShapeError as exc:
                    raise ShapeError(f"node {i} ({node.op}): {exc}") from None
            out = fwd(vals, node.attrs)
            if self.check_finite and not np.all(np.isfinite(out)):
                raise NonFiniteError(f"non-finite value produced by op {node.op!r} at node {i}")
            node.value = out
        names = self.outputs.keys() if outputs is None else outputs
        return {k: self.nodes[self.outputs[k]].value for k in names}

    def backward(self, output: Tensor | int | str) -> dict[str, np.ndarray]:
        """Gradient of a scalar node with respect to every named leaf."""
        if isinstance(output, str):
            out_id = self.outputs[output]
        elif isinstance(output, Tensor):
            out_id = output.id
        else:
            out_id = int(output)
        out_val = self.nodes[out_id].value
        if out_val.size != 1:
            raise AutodiffError(f"backward needs a scalar output, node {out_id} has shape {out_val.shape}")
        grads: dict[int, np.ndarray] = {out_id: np.ones_like(out_val)}
        for i in range(out_id, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if node.op == "leaf":
                grads[i] = g  # parked; collected below
                continue
            if node.op == "const" or node.op in _BLOCKING:
                continue
            vals = [self.nodes[j].value for j in node.inputs]
            parts = _OPS[node.op][1](g, node.value, vals, node.attrs)
            for j, gj in zip(node.inputs, parts):
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        result = {}
        for name, i in self.leaves.items():
            node = self.nodes[i]
            g = grads.get(i)
            if g is None or node.stop:
                result[name] = np.zeros_like(node.value)
            else:
                result[name] = np.array(g, dtype=np.float64).reshape(node.value.shape)
        return result


# --- functional surface -------------------------------------------------------

def forward(tape: Tape, inputs: dict | None = None, outputs: Iterable[str] | None = None) -> dict:
    return tape.forward(inputs, outputs)


def backward(tape: Tape, output) -> dict[str, np.ndarray]:
    return tape.backward(output)


def grad_check(tape: Tape, inputs: dict | None, step: float, leaves: Iterable[str] | None = None,
               output="loss", max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Stop-gradient and argmax nodes are held at their values for the base
    point while differencing, so detached branches count as constants.
    ``max_coords`` caps the number of coordinates probed per leaf (chosen at
    random with ``seed``); ``None`` probes all of them.  ``leaves=None``
    selects every leaf not marked stop-gradient (those have zero gradient by
    contract).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {name: np.array(tape.nodes[i].value) for name, i in tape.leaves.items()}
    if inputs:
        base.update({k: np.array(v, dtype=np.float64) for k, v in inputs.items()})
    out_id = tape.outputs[output] if isinstance(output, str) else (
        output.id if isinstance(output, Tensor) else int(output))
    tmp_name = "__grad_check__"
    tape.outputs[tmp_name] = out_id

    def value_at(point, hold=True):
        return float(tape.forward(point, [tmp_name], hold_stopped=hold)[tmp_name])

    try:
        value_at(base, hold=False)
        analytic = tape.backward(out_id)
        rng = np.random.default_rng(seed)
        worst = 0.0
        if leaves is None:
            leaves = [n for n, i in tape.leaves.items() if not tape.nodes[i].stop]
        for name in leaves:
            flat = base[name].reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            a_flat = analytic[name].reshape(-1)
            for k in idx:
                orig = flat[k]
                flat[k] = orig + step
                f_plus = value_at(base)
                flat[k] = orig - step
                f_minus = value_at(base)
                flat[k] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = a_flat[k]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        value_at(base, hold=False)
    finally:
        del tape.outputs[tmp_name]
    return worst


# --- convenience wrappers used by the model code ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply("matmul", a, a._wrap(b))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return a.tape.apply("leaky_relu", a, slope=slope)


def softmax(a: Tensor) -> Tensor:
    return a.tape.apply("softmax", a)


def log_softmax(a: Tensor) -> Tensor:
    """Row log-softmax, floored at log(1e-12) so probabilities are clamped."""
    return a.tape.apply("clamped_log_softmax", a, floor=LOG_FLOOR)


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log of ``a`` clamped to ``[eps, 1]``; zero gradient where clamped."""
    return a.tape.apply("log_clamped", a, eps=eps)


def stop_gradient(a: Tensor) -> Tensor:
    return a.tape.apply("stop_gradient", a)


def onehot_argmax(a: Tensor) -> Tensor:
    """Row-wise one-hot of the argmax (lowest index on ties); not differentiable."""
    return a.tape.apply("onehot_argmax", a)
