"""Alternating optimisation of the combined objective and the encoder's
alignment objective.

Each :func:`step` has two phases:

1. the combined objective updates the encoder and class head (classification,
   entropy and VAT terms) and the joint head (joint classification terms);
2. the alignment objective updates the encoder alone.

A parameter group only receives an optimizer update in a phase where at least
one active term routes to it, so switching a term off leaves its groups
bitwise untouched.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .config import ExperimentConfig
from .data import Dataset, batches
from .losses import ADV_TERMS, PHASE1_TERMS, LossWeights, build_adversarial, build_objective
from .networks import GROUPS, Arch, ParamSet, class_predict, encode, init_params, joint_predict, save_params
from .optim import Optimizer, OptimizerSpec
from .theory import h_divergence_proxy

log = logging.getLogger(__name__)

TERM_GROUPS = {
    "sc": ("encoder", "class_head"),
    "svat": ("encoder", "class_head"),
    "te": ("encoder", "class_head"),
    "tvat": ("encoder", "class_head"),
    "jsc": ("joint_head",),
    "jtc": ("joint_head",),
    "jsa": ("encoder",),
    "jta": ("encoder",),
}

HISTORY_FIELDS = (["iteration"] + [f"L_{t}" for t in PHASE1_TERMS] + ["L", "L_jsa", "L_jta", "L_adv",
                  "acc_class", "acc_joint", "hdiv"])


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Curriculum boundaries as fractions of the budget; (0, 0) disables it."""

    start_ssl: float = 4000.0 / 60000.0
    start_pseudo: float = 8000.0 / 60000.0

    def __post_init__(self):
        if self.disabled:
            return
        if not 0 < self.start_ssl < self.start_pseudo < 1:
            raise ValueError("curriculum needs 0 < start_ssl < start_pseudo < 1")

    @property
    def disabled(self) -> bool:
        return self.start_ssl == 0 and self.start_pseudo == 0


OFF = Schedule(0.0, 0.0)


def curriculum_gate(iteration: int, total_iters: int, schedule: Schedule, weights: LossWeights) -> LossWeights:
    """Weights active at ``iteration``.

    Before ``start_ssl``: only the source-labelled terms (L_sc, jsc, jsa).
    Until ``start_pseudo``: the SSL terms (l_t, svat, tvat) join, but the
    pseudo-label terms (jtc, jta) stay off.  Afterwards: everything.
    """
    if not 0 <= iteration < max(total_iters, 1):
        raise ValueError(f"iteration {iteration} outside [0, {total_iters})")
    if schedule.disabled:
        return weights
    frac = iteration / total_iters
    if frac < schedule.start_ssl:
        return weights.replace(lambda_t=0.0, lambda_svat=0.0, lambda_tvat=0.0, lambda_jtc=0.0, lambda_jta=0.0)
    if frac < schedule.start_pseudo:
        return weights.replace(lambda_jtc=0.0, lambda_jta=0.0)
    return weights


@dataclass
class TrainState:
    params: ParamSet
    optimizer: Optimizer
    weights: LossWeights
    total_iters: int
    schedule: Schedule = OFF
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    shared_encoder_state: bool = True
    last: dict = field(default_factory=dict)

    def lr(self) -> float:
        return self.optimizer.spec.lr_at(self.iteration, self.total_iters)


def _participating(terms: dict, weights: LossWeights) -> set[str]:
    tw = weights.term_weights()
    return {g for t in terms if tw[t] > 0 for g in TERM_GROUPS[t]}


def _snapshot(params: ParamSet) -> dict[str, np.ndarray]:
    return {n: a.copy() for n, a in params.named()}


def _culprit(build, terms_all, *args) -> str:
    """Rebuild term by term to name the first one that goes non-finite."""
    for t in terms_all:
        try:
            _, terms, _ = build(*args, only={t})
        except FloatingPointError:
            return f"L_{t}"
        if t in terms and not math.isfinite(float(terms[t].value)):
            return f"L_{t}"
    return "an unidentified term"


def _check_terms(terms: dict, phase: str) -> None:
    for name, t in terms.items():
        v = float(t.value)
        if not math.isfinite(v):
            raise TrainingError(f"{phase}: loss term L_{name} is not finite ({v})")


def step(state: TrainState, src_batch: Dataset, tgt_batch: Dataset, only=None,
         observer: Callable | None = None) -> TrainState:
    """One alternating update; mutates and returns ``state``.

    ``only`` restricts the active terms (instrumentation).  ``observer`` is
    called as ``observer(phase, before, after, groups)`` with parameter
    snapshots around each phase.
    """
    params = state.params
    weights = curriculum_gate(state.iteration, state.total_iters, state.schedule, state.weights)
    tgt_x = tgt_batch.unlabeled()
    lr = state.lr()
    record: dict[str, float] = {}

    try:
        g, terms, total = build_objective(params, src_batch, tgt_x, weights, rng=state.rng, only=only)
    except FloatingPointError as exc:
        name = _culprit(lambda *a, only: build_objective(*a, rng=0, only=only), PHASE1_TERMS,
                        params, src_batch, tgt_x, weights)
        raise TrainingError(f"phase 1: loss term {name} is not finite ({exc})") from exc
    _check_terms(terms, "phase 1")
    groups = _participating(terms, weights) if only is None else {
        grp for t in terms if t in only and weights.term_weights()[t] > 0 for grp in TERM_GROUPS[t]}
    before = _snapshot(params) if observer else None
    if groups:
        grads = g.tape.backward(total)
        for grp in GROUPS:
            if grp in groups:
                arrays = {n: a for n, a in params.named() if n.startswith(grp + ".")}
                state.optimizer.update(grp, arrays, grads, lr)
    if observer:
        observer("phase1", before, _snapshot(params), groups)
    record.update({f"L_{t}": float(v.value) for t, v in terms.items()})
    record["L"] = float(total.value)

    adv_only = None if only is None else set(only) & set(ADV_TERMS)
    tw = weights.term_weights()
    if any(tw[t] > 0 for t in ADV_TERMS) and (adv_only is None or adv_only):
        try:
            g2, terms2, total2 = build_adversarial(params, src_batch, tgt_x, weights, only=adv_only)
        except FloatingPointError as exc:
            name = _culprit(build_adversarial, ADV_TERMS, params, src_batch, tgt_x, weights)
            raise TrainingError(f"phase 2: loss term {name} is not finite ({exc})") from exc
        _check_terms(terms2, "phase 2")
        before = _snapshot(params) if observer else None
        if terms2:
            grads = g2.tape.backward(total2)
            arrays = {n: a for n, a in params.named() if n.startswith("encoder.")}
            key = "encoder" if state.shared_encoder_state else "encoder:adv"
            state.optimizer.update(key, arrays, grads, lr)
        if observer:
            observer("phase2", before, _snapshot(params), {"encoder"} if terms2 else set())
        record.update({f"L_{t}": float(v.value) for t, v in terms2.items()})
        record["L_adv"] = float(total2.value)
    state.iteration += 1
    state.last = record
    return state


# --- evaluation ------------------------------------------------------------------

def predict_classes(params: ParamSet, x, which: str = "class_predictor") -> np.ndarray:
    z = encode(params, x)
    if which == "class_predictor":
        return class_predict(params, z).argmax()
    if which == "joint_predictor":
        return joint_predict(params, z).argmax() % params.arch.n_classes
    raise ValueError(f"unknown predictor {which!r}")


def evaluate(params: ParamSet, dataset: Dataset, which: str = "class_predictor") -> float:
    """Fraction of argmax-correct predictions; the joint head folds 2K -> K by index mod K."""
    if dataset.labels is None:
        raise ValueError(f"dataset {dataset.name!r} has no labels")
    pred = predict_classes(params, dataset.features, which)
    return float(np.mean(pred == dataset.class_index))


def accuracy_of(pred, labels) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


# --- defaults derived from data ---------------------------------------------------

def median_nn_distance(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    dist, _ = cKDTree(x).query(x, k=2)
    return float(np.median(dist[:, 1]))


def resolve_weights(config: ExperimentConfig, src: Dataset) -> LossWeights:
    lw = config.loss_weights
    eps = lw.eps_x if lw.eps_x is not None else lw.eps_scale * median_nn_distance(src.features)
    if eps <= 0:
        raise TrainingError("data-relative eps_x is zero (duplicate source points?)")
    return LossWeights(lambda_t=lw.lambda_t, lambda_svat=lw.lambda_svat, lambda_tvat=lw.lambda_tvat,
                       lambda_jsc=lw.lambda_jsc, lambda_jtc=lw.lambda_jtc, lambda_jsa=lw.lambda_jsa,
                       lambda_jta=lw.lambda_jta, lambda_te=lw.lambda_te, eps_x=eps, xi=lw.xi)


def optimizer_spec(config: ExperimentConfig) -> OptimizerSpec:
    o = config.optimizer
    return OptimizerSpec(kind=o.kind, lr=o.lr, beta1=o.beta1, beta2=o.beta2, adam_eps=o.adam_eps,
                         momentum=o.momentum, weight_decay=o.weight_decay,
                         decay_at=o.decay_at if o.kind == "sgd" else None, decay_factor=o.decay_factor)


def arch_for(config: ExperimentConfig, src: Dataset) -> Arch:
    a = config.arch
    return Arch(d_in=src.features.shape[1], n_classes=src.n_classes, widths=tuple(a.widths),
                bias=a.bias, activation=a.activation, dropout=a.dropout)


def _seeds(seed: int) -> dict[str, int]:
    names = ("init", "batches", "vat", "hdiv", "probe", "dropout")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


def schedule_for(config: ExperimentConfig, src: Dataset, tgt: Dataset) -> tuple[Schedule, dict]:
    """Resolve curriculum mode; ``auto`` probes a short source-only run.

    The probe's target accuracy (labels read through the evaluation path
    only) is compared with 3/K; below it the curriculum is switched on.
    """
    c = config.curriculum
    sched = Schedule(c.start_ssl, c.start_pseudo)
    if c.mode == "off" or sched.disabled:
        return OFF, {"curriculum": "off"}
    if c.mode == "on":
        return sched, {"curriculum": "on"}
    k = src.n_classes
    threshold = 3.0 / k
    if threshold >= 1.0 or tgt.labels is None or c.probe_iterations == 0:
        return sched, {"curriculum": "on", "probe_threshold": threshold}
    probe_cfg = config.replace(iterations=c.probe_iterations, mode="source-only")
    probe_cfg = probe_cfg.replace(curriculum={**probe_cfg.to_dict()["curriculum"], "mode": "off"},
                                  hdiv={**probe_cfg.to_dict()["hdiv"], "enabled": False})
    weights = source_only_weights(resolve_weights(probe_cfg, src))
    params, _ = _train(probe_cfg, src, tgt, weights, OFF, seed_key="probe")
    acc = evaluate(params, tgt)
    on = acc < threshold
    return (sched if on else OFF), {"curriculum": "on" if on else "off", "probe_accuracy": acc,
                                     "probe_threshold": threshold}


def source_only_weights(w: LossWeights) -> LossWeights:
    return w.replace(lambda_t=0.0, lambda_te=0.0, lambda_tvat=0.0, lambda_jtc=0.0,
                     lambda_jsa=0.0, lambda_jta=0.0)


# --- main loop ---------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([_fmt(row.get(k)) for k in HISTORY_FIELDS])
    return buf.getvalue()


def _train(config: ExperimentConfig, src: Dataset, tgt: Dataset, weights: LossWeights, schedule: Schedule,
           seed_key: str = "init", eval_target: Dataset | None = None, history_path=None,
           checkpoint_dir=None, observer=None):
    seeds = _seeds(config.seed)
    arch = arch_for(config, src)
    params = init_params(arch, seeds["init" if seed_key == "init" else seed_key])
    state = TrainState(params=params, optimizer=Optimizer(optimizer_spec(config)), weights=weights,
                       total_iters=config.iterations, schedule=schedule,
                       rng=np.random.default_rng(seeds["vat"]),
                       shared_encoder_state=config.optimizer.shared_encoder_state)
    history: list[dict] = []
    hd = config.hdiv
    hdiv_seed = seeds["hdiv"]

    def record(it):
        row = {"iteration": it, **state.last}
        if eval_target is not None and eval_target.labels is not None:
            row["acc_class"] = evaluate(params, eval_target, "class_predictor")
            row["acc_joint"] = evaluate(params, eval_target, "joint_predictor")
        if hd.enabled and eval_target is not None:
            row["hdiv"] = h_divergence_proxy(encode(params, src.features), encode(params, eval_target.features),
                                             seed=hdiv_seed, steps=hd.steps, width=hd.width, lr=hd.lr,
                                             max_samples=hd.max_samples)
        history.append(row)
        if history_path is not None:
            Path(history_path).write_text(history_csv(history))

    record(0)
    stream = batches(src, tgt.unlabeled(), config.batch_size, seed=seeds["batches"])
    for it in range(config.iterations):
        sb, tb = next(stream)
        step(state, sb, tb, observer=observer)
        done = it + 1
        if done % config.eval_interval == 0 or done == config.iterations:
            record(done)
            log.info("iter %d %s", done, {k: round(v, 4) for k, v in history[-1].items()
                                           if isinstance(v, float)})
        if checkpoint_dir is not None and config.checkpoint_interval and done % config.checkpoint_interval == 0:
            save_params(params, Path(checkpoint_dir) / f"params_{done:07d}.caln")
    return params, history


def run(config: ExperimentConfig, src: Dataset, tgt: Dataset, weights: LossWeights | None = None,
        history_path=None, checkpoint_dir=None, observer=None) -> tuple[ParamSet, list[dict]]:
    """Train from scratch; returns final parameters and the metrics history.

    ``tgt`` may carry labels: training only ever sees ``tgt.unlabeled()``,
    labels feed the per-interval target accuracies.  ``weights`` overrides
    the config's loss weights (used by the experiment modes).
    """
    if src.labels is None:
        raise ValueError("source dataset needs labels")
    if weights is None:
        weights = resolve_weights(config, src)
    schedule, _ = schedule_for(config, src, tgt) if config.iterations else (OFF, {})
    return _train(config, src, tgt, weights, schedule, eval_target=tgt, history_path=history_path,
                  checkpoint_dir=checkpoint_dir, observer=observer)
