"""Experiment configuration: JSON <-> nested dataclasses with strict validation.

Unknown keys, wrong types and invariant violations raise :class:`ConfigError`
carrying a dotted path into the document, e.g. ``loss_weights.lambda_t``.
Every section defaults to the single-task setting used throughout the package
(two moons rotated by 35 degrees, Adam, MNIST->SVHN loss weights).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import dataclass, field

MODES = ("full", "source-only", "target-only", "ablation")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass
class ShiftConfig:
    rotation_deg: float = 35.0
    translation: list[float] = field(default_factory=list)
    scale: list[float] = field(default_factory=list)
    permutation: list[int] = field(default_factory=list)
    noise_std: float = 0.0


@dataclass
class DataConfig:
    generator: str = "moons"  # moons | blobs | csv
    n: int = 1000
    n_test: int = 1000
    noise: float = 0.1
    n_classes: int = 3  # blobs only
    dim: int = 2  # blobs only
    separation: float = 4.0  # blobs only
    source_csv: str = ""
    target_csv: str = ""
    source_test_csv: str = ""
    standardize: bool = False
    shift: ShiftConfig = field(default_factory=ShiftConfig)


@dataclass
class ArchConfig:
    widths: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "lrelu"
    bias: bool = True
    dropout: float = 0.0


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # adam | sgd
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_at: float = 2.0 / 3.0  # fraction of the budget; sgd only
    decay_factor: float = 0.1
    shared_encoder_state: bool = True


@dataclass
class LossConfig:
    lambda_t: float = 0.1
    lambda_svat: float = 0.0
    lambda_tvat: float = 10.0
    lambda_jsc: float = 1.0
    lambda_jtc: float = 10.0
    lambda_jsa: float = 1.0
    lambda_jta: float = 1.0
    lambda_te: float = 1.0
    eps_x: typing.Optional[float] = None  # None: eps_scale x median NN distance
    eps_scale: float = 0.5
    xi: float = 1e-6


@dataclass
class CurriculumConfig:
    mode: str = "auto"  # auto | on | off
    start_ssl: float = 4000.0 / 60000.0
    start_pseudo: float = 8000.0 / 60000.0
    probe_iterations: int = 200


@dataclass
class HdivConfig:
    enabled: bool = True
    steps: int = 500
    width: int = 32
    lr: float = 0.01
    max_samples: int = 1000


@dataclass
class ExperimentConfig:
    name: str = "moons35"
    mode: str = "full"
    seed: int = 0
    iterations: int = 6000
    batch_size: int = 64
    eval_interval: int = 500
    checkpoint_interval: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss_weights: LossConfig = field(default_factory=LossConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    hdiv: HdivConfig = field(default_factory=HdivConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})


# --- parsing --------------------------------------------------------------------

def _convert(value, tp, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp)
        return [_convert(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported type {tp}")


def _build(cls, doc: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {k: _convert(v, hints[k], f"{path}.{k}" if path else k) for k, v in doc.items()}
    return cls(**kwargs)


def _check(cfg: ExperimentConfig) -> None:
    def need(ok, path, msg):
        if not ok:
            raise ConfigError(path, msg)

    need(cfg.mode in MODES, "mode", f"must be one of {MODES}")
    need(cfg.iterations >= 0, "iterations", "must be >= 0")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.eval_interval >= 1, "eval_interval", "must be >= 1")
    need(cfg.checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0")
    d = cfg.data
    need(d.generator in ("moons", "blobs", "csv"), "data.generator", "must be moons, blobs or csv")
    need(d.n >= 2, "data.n", "must be >= 2")
    need(d.n_test >= 2, "data.n_test", "must be >= 2")
    need(d.noise >= 0, "data.noise", "must be >= 0")
    need(d.n_classes >= 2, "data.n_classes", "must be >= 2")
    need(d.separation > 0, "data.separation", "must be > 0")
    if d.generator == "csv":
        need(bool(d.source_csv), "data.source_csv", "required for the csv generator")
        need(bool(d.target_csv), "data.target_csv", "required for the csv generator")
    s = d.shift
    need(all(v != 0 for v in s.scale), "data.shift.scale", "scales must be nonzero")
    need(sorted(s.permutation) == list(range(len(s.permutation))), "data.shift.permutation",
         "must be a permutation of 0..K-1")
    need(s.noise_std >= 0, "data.shift.noise_std", "must be >= 0")
    a = cfg.arch
    need(len(a.widths) >= 1 and min(a.widths) >= 1, "arch.widths", "need at least one positive width")
    need(a.activation in ("lrelu", "none"), "arch.activation", "must be lrelu or none")
    need(0 <= a.dropout < 1, "arch.dropout", "must be in [0, 1)")
    o = cfg.optimizer
    need(o.kind in ("adam", "sgd"), "optimizer.kind", "must be adam or sgd")
    need(o.lr > 0, "optimizer.lr", "must be > 0")
    need(o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0")
    need(0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, "optimizer.beta1", "betas must be in [0, 1)")
    need(0 <= o.momentum < 1, "optimizer.momentum", "must be in [0, 1)")
    need(0 < o.decay_at <= 1, "optimizer.decay_at", "must be in (0, 1]")
    need(o.decay_factor > 0, "optimizer.decay_factor", "must be > 0")
    lw = cfg.loss_weights
    for f in dataclasses.fields(lw):
        if f.name.startswith("lambda"):
            need(getattr(lw, f.name) >= 0, f"loss_weights.{f.name}", "must be >= 0")
    need(lw.eps_x is None or lw.eps_x > 0, "loss_weights.eps_x", "must be > 0")
    need(lw.eps_scale > 0, "loss_weights.eps_scale", "must be > 0")
    need(lw.xi > 0, "loss_weights.xi", "must be > 0")
    c = cfg.curriculum
    need(c.mode in ("auto", "on", "off"), "curriculum.mode", "must be auto, on or off")
    disabled = c.start_ssl == 0 and c.start_pseudo == 0
    need(disabled or 0 < c.start_ssl < c.start_pseudo < 1, "curriculum",
         "need 0 < start_ssl < start_pseudo < 1 (or both 0)")
    need(c.probe_iterations >= 0, "curriculum.probe_iterations", "must be >= 0")
    h = cfg.hdiv
    need(h.steps >= 1 and h.width >= 1 and h.lr > 0 and h.max_samples >= 8, "hdiv", "invalid estimator budget")


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    cfg = _build(ExperimentConfig, doc, "")
    _check(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    return from_dict(doc)


def serialize_config(cfg: ExperimentConfig) -> str:
    return cfg.to_json()
