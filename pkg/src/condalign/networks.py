"""Shared encoder, class head and joint (domain x class) head.

Parameters live in a :class:`ParamSet` split into three disjoint groups so the
trainer can update each group from its own subset of losses.  Forward passes
are written against an autodiff :class:`~condalign.autodiff.Tape`; plain numpy
helpers (:func:`encode`, :func:`class_predict`, ...) wrap them for inference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import LEAKY_SLOPE, Tape, Tensor

GROUPS = ("encoder", "class_head", "joint_head")
MAGIC = b"CALN1"


@dataclass(frozen=True)
class Arch:
    d_in: int
    n_classes: int
    widths: tuple[int, ...] = (64, 64)
    bias: bool = True
    activation: str = "lrelu"  # "lrelu" or "none"
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.d_in < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.activation not in ("lrelu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_feat(self) -> int:
        return self.widths[-1]

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        dims = (self.d_in,) + tuple(self.widths)
        return {
            "encoder": list(zip(dims[:-1], dims[1:])),
            "class_head": [(self.d_feat, self.n_classes)],
            "joint_head": [(self.d_feat, 2 * self.n_classes)],
        }


@dataclass
class ParamSet:
    """Weights per group as lists of ``(W, b)`` pairs; ``b`` is None without bias."""

    arch: Arch
    encoder: list = field(default_factory=list)
    class_head: list = field(default_factory=list)
    joint_head: list = field(default_factory=list)

    def group(self, name: str) -> list:
        return getattr(self, name)

    def named(self):
        """Yield ``(name, array)`` for every parameter in group order."""
        for g in GROUPS:
            for i, (W, b) in enumerate(self.group(g)):
                yield f"{g}.{i}.W", W
                if b is not None:
                    yield f"{g}.{i}.b", b

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.named())

    def copy(self) -> "ParamSet":
        dup = lambda layers: [(W.copy(), None if b is None else b.copy()) for W, b in layers]
        return ParamSet(self.arch, dup(self.encoder), dup(self.class_head), dup(self.joint_head))

    def assign(self, name: str, value: np.ndarray) -> None:
        g, i, kind = name.split(".")
        W, b = self.group(g)[int(i)]
        if kind == "W":
            W[...] = value
        else:
            b[...] = value

    def n_params(self) -> int:
        return sum(a.size for _, a in self.named())


def group_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


def init_params(arch: Arch, seed: int = 0) -> ParamSet:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    out = {}
    for g, shapes in arch.layer_shapes().items():
        layers = []
        for fan_in, fan_out in shapes:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-a, a, size=(fan_in, fan_out))
            b = np.zeros(fan_out) if arch.bias else None
            layers.append((W, b))
        out[g] = layers
    return ParamSet(arch, **out)


# --- tape-level model -----------------------------------------------------------

class Graph:
    """Binds a ParamSet onto a tape as named leaves.

    Groups listed in ``frozen`` become stop-gradient leaves (always zero
    gradient).  ``dropout_rng`` draws dropout masks, which are recorded as
    constants so replays see the same masks.
    """

    def __init__(self, params: ParamSet, tape: Tape | None = None, frozen=(), dropout_rng=None):
        self.params = params
        self.tape = tape if tape is not None else Tape()
        self.dropout_rng = dropout_rng
        self.vars: dict[str, list] = {}
        for g in GROUPS:
            layers = []
            for i, (W, b) in enumerate(params.group(g)):
                Wt = self.tape.leaf(f"{g}.{i}.W", W, stop_gradient=g in frozen)
                bt = None if b is None else self.tape.leaf(f"{g}.{i}.b", b, stop_gradient=g in frozen)
                layers.append((Wt, bt))
            self.vars[g] = layers

    def input(self, x, name: str | None = None) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.params.arch.d_in:
            raise ValueError(f"expected input of shape (n, {self.params.arch.d_in}), got {x.shape}")
        return self.tape.leaf(name, x) if name else self.tape.constant(x)

    def encode(self, x: Tensor) -> Tensor:
        arch = self.params.arch
        h = x
        for Wt, bt in self.vars["encoder"]:
            h = h @ Wt
            if bt is not None:
                h = h + bt
            if arch.activation == "lrelu":
                h = ad.leaky_relu(h, LEAKY_SLOPE)
            if arch.dropout > 0 and self.dropout_rng is not None:
                keep = self.dropout_rng.random(h.shape) >= arch.dropout
                h = h * self.tape.constant(keep / (1.0 - arch.dropout))
        return h

    def _head(self, group: str, z: Tensor) -> Tensor:
        (Wt, bt), = self.vars[group]
        out = z @ Wt
        return out + bt if bt is not None else out

    def class_logits(self, z: Tensor) -> Tensor:
        return self._head("class_head", z)

    def joint_logits(self, z: Tensor) -> Tensor:
        return self._head("joint_head", z)


# --- numpy inference ------------------------------------------------------------

@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1)


def _softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_dim(a: np.ndarray, d: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != d:
        raise ValueError(f"{what} must have {d} columns, got shape {a.shape}")
    return a


def encode(params: ParamSet, x) -> np.ndarray:
    arch = params.arch
    h = _check_dim(x, arch.d_in, "input")
    for W, b in params.encoder:
        h = h @ W
        if b is not None:
            h = h + b
        if arch.activation == "lrelu":
            h = np.where(h > 0, h, LEAKY_SLOPE * h)
    return h


def _head(layers, z, d_feat) -> Prediction:
    z = _check_dim(z, d_feat, "features")
    (W, b), = layers
    logits = z @ W + (b if b is not None else 0.0)
    return Prediction(logits, _softmax(logits))


def class_predict(params: ParamSet, z) -> Prediction:
    return _head(params.class_head, z, params.arch.d_feat)


def joint_predict(params: ParamSet, z) -> Prediction:
    return _head(params.joint_head, z, params.arch.d_feat)


def pseudo_label(p) -> np.ndarray:
    """One-hot of the argmax; ties go to the lowest index."""
    p = np.asarray(p, dtype=np.float64)
    return np.eye(p.shape[-1])[np.argmax(p, axis=-1)]


# --- CALN1 parameter files ------------------------------------------------------

_ACT_CODES = {"none": 0, "lrelu": 1}


def save_params(params: ParamSet, path) -> None:
    """Write ``CALN1`` header, arch integers, then float64 LE values.

    Integer block (int64 LE, preceded by its uint32 count):
    ``d_in, n_classes, bias, activation, n_layers, widths...``.
    """
    arch = params.arch
    ints = [arch.d_in, arch.n_classes, int(arch.bias), _ACT_CODES[arch.activation],
            len(arch.widths), *arch.widths]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(ints)))
        fh.write(struct.pack(f"<{len(ints)}q", *ints))
        for _, a in params.named():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path) -> ParamSet:
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise ValueError(f"{path}: not a CALN1 parameter file")
    (n_ints,) = struct.unpack_from("<I", blob, 5)
    ints = struct.unpack_from(f"<{n_ints}q", blob, 9)
    d_in, k, bias, act, n_layers = ints[:5]
    widths = tuple(ints[5:5 + n_layers])
    codes = {v: k_ for k_, v in _ACT_CODES.items()}
    arch = Arch(d_in=d_in, n_classes=k, widths=widths, bias=bool(bias), activation=codes[act])
    params = init_params(arch, seed=0)
    data = np.frombuffer(blob, dtype="<f8", offset=9 + 8 * n_ints)
    expected = params.n_params()
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {data.size}")
    pos = 0
    for name, a in params.named():
        params.assign(name, data[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return params
