"""Classification, joint-label, entropy and VAT objectives.

Two layers live here.  Plain numpy helpers (:func:`cross_entropy`,
:func:`entropy`, :func:`joint_label`) evaluate single vectors.  The
``build_*`` functions record batch-mean losses on an autodiff tape with the
gradient routing the trainer relies on:

* classification, entropy and VAT terms reach the encoder and the class head;
* joint classification terms see detached features, so only the joint head
  receives their gradient;
* alignment terms are built with the heads frozen, so only the encoder moves;
* pseudo-labels and the clean VAT branch never carry gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_EPS, Tape, Tensor
from .networks import Graph, ParamSet

SOURCE, TARGET = "source", "target"

PHASE1_TERMS = ("sc", "svat", "jsc", "te", "tvat", "jtc")
ADV_TERMS = ("jsa", "jta")


@dataclass(frozen=True)
class LossWeights:
    """Loss weights and VAT radii.

    Defaults follow the MNIST->SVHN column of the published hyperparameter
    table, except ``eps_x`` (data-relative, set by the trainer) and ``xi``.
    ``lambda_te`` scales the target entropy term inside the target group; it
    stays 1 except when ablating entropy minimisation.
    """

    lambda_t: float = 0.1
    lambda_svat: float = 0.0
    lambda_tvat: float = 10.0
    lambda_jsc: float = 1.0
    lambda_jtc: float = 10.0
    lambda_jsa: float = 1.0
    lambda_jta: float = 1.0
    lambda_te: float = 1.0
    eps_x: float = 1.0
    xi: float = 1e-6

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not np.isfinite(v):
                raise ValueError(f"{f.name} must be a finite number")
            if f.name.startswith("lambda") and v < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.eps_x <= 0:
            raise ValueError("eps_x must be positive")
        if self.xi <= 0:
            raise ValueError("xi must be positive")

    def replace(self, **changes) -> "LossWeights":
        return LossWeights(**{**asdict(self), **changes})

    def term_weights(self) -> dict[str, float]:
        """Effective multiplier of every term in the two objectives."""
        return {
            "sc": 1.0,
            "svat": self.lambda_svat,
            "jsc": self.lambda_jsc,
            "te": self.lambda_t * self.lambda_te,
            "tvat": self.lambda_t * self.lambda_tvat,
            "jtc": self.lambda_t * self.lambda_jtc,
            "jsa": self.lambda_jsa,
            "jta": self.lambda_jta,
        }


# --- vector helpers -----------------------------------------------------------

def _as_vec(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _is_onehot(y: np.ndarray) -> bool:
    return bool(np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1))


def cross_entropy(p, y) -> float:
    """-<y, log p> with p clamped to [1e-12, 1]."""
    p, y = _as_vec(p), _as_vec(y)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    return float(-(y * np.log(np.clip(p, LOG_EPS, 1.0))).sum())


def entropy(p) -> float:
    p = _as_vec(p)
    return float(-(p * np.log(np.clip(p, LOG_EPS, 1.0))).sum())


def joint_label(y, domain: str, flipped: bool = False) -> np.ndarray:
    """Place a K-way one-hot into the source (first K) or target (last K) half.

    Source samples go to the first half and target samples to the second;
    ``flipped`` swaps the halves, which is what the encoder is trained toward.
    Works row-wise on a batch of labels too.
    """
    y = _as_vec(y)
    if not _is_onehot(y):
        raise ValueError("label must be one-hot")
    if domain not in (SOURCE, TARGET):
        raise ValueError(f"unknown domain {domain!r}")
    zeros = np.zeros_like(y)
    first = (domain == SOURCE) != bool(flipped)
    return np.concatenate([y, zeros] if first else [zeros, y], axis=-1)


def _joint_half(y: Tensor, first: bool) -> Tensor:
    """Tape version of joint_label: y @ [I, 0] or y @ [0, I]."""
    k = y.shape[-1]
    eye, zero = np.eye(k), np.zeros((k, k))
    return y @ y.tape.constant(np.hstack([eye, zero] if first else [zero, eye]))


# --- tape-level terms -----------------------------------------------------------

def ce_mean(logits: Tensor, target: Tensor) -> Tensor:
    """Batch mean of -<target, log softmax(logits)>."""
    return (-(target * ad.log_softmax(logits)).sum(axis=1)).mean()


def entropy_mean(logits: Tensor) -> Tensor:
    p = ad.softmax(logits)
    return (-(p * ad.log_softmax(logits)).sum(axis=1)).mean()


def _batch(batch):
    if hasattr(batch, "features"):
        return np.asarray(batch.features, dtype=np.float64), batch.labels
    if isinstance(batch, tuple):
        x, y = batch
        return np.asarray(x, dtype=np.float64), y
    return np.asarray(batch, dtype=np.float64), None


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def vat_perturbation(params: ParamSet, x, eps_x: float, xi: float = 1e-6, seed=0,
                     head: str = "class") -> np.ndarray:
    """Adversarial direction from one power-iteration step, scaled to ``eps_x``.

    ``r`` is the gradient of CE(f(x), f(x + xi*d)) with respect to the probe at
    ``xi*d``, ``d`` a per-sample unit Gaussian direction, clean prediction held
    constant.  Rows whose ``||r||`` falls below 1e-30 fall back to ``d``.
    """
    if eps_x <= 0 or xi <= 0:
        raise ValueError("eps_x and xi must be positive")
    x, _ = _batch(x)
    rng = _rng(seed)
    d = rng.standard_normal(x.shape)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)

    g = Graph(params, frozen=("encoder", "class_head", "joint_head"))
    logits_fn = g.class_logits if head == "class" else g.joint_logits
    clean = logits_fn(g.encode(g.input(x)))
    p_clean = ad.stop_gradient(ad.softmax(clean))
    probe = g.tape.leaf("probe", xi * d)
    pert = logits_fn(g.encode(g.tape.constant(x) + probe))
    # summed, not averaged: each row's gradient is its own sample's
    loss = (-(p_clean * ad.log_softmax(pert)).sum(axis=1)).sum()
    r = g.tape.backward(loss)["probe"]

    norms = np.linalg.norm(r, axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-30
    direction = np.where(degenerate[:, None], d, r / np.where(norms > 0, norms, 1.0))
    # renormalise so the row norm is eps_x to rounding
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return eps_x * direction


def vat_term(graph: Graph, clean_logits: Tensor, x: np.ndarray, delta: np.ndarray,
             head: str = "class") -> Tensor:
    """CE(f(x), f(x + delta)) on the tape; only the perturbed branch has gradient."""
    logits_fn = graph.class_logits if head == "class" else graph.joint_logits
    p_clean = ad.stop_gradient(ad.softmax(clean_logits))
    pert = logits_fn(graph.encode(graph.tape.constant(x + delta)))
    return ce_mean(pert, p_clean)


def vat_loss(params: ParamSet, x, eps_x: float, xi: float = 1e-6, seed=0) -> float:
    """Batch-mean VAT loss; ``eps_x == 0`` gives the entropy of f(x)."""
    x, _ = _batch(x)
    if eps_x < 0:
        raise ValueError("eps_x must be nonnegative")
    delta = np.zeros_like(x) if eps_x == 0 else vat_perturbation(params, x, eps_x, xi, seed)
    g = Graph(params)
    clean = g.class_logits(g.encode(g.input(x)))
    return float(vat_term(g, clean, x, delta).value)


def _onehot_labels(y, k: int) -> np.ndarray:
    if y is None:
        raise ValueError("batch has no labels")
    y = np.asarray(y)
    if y.ndim == 1:
        y = np.eye(k)[y.astype(int)]
    return y.astype(np.float64)


def build_objective(params: ParamSet, src, tgt, weights: LossWeights, rng=None,
                    only=None, graph: Graph | None = None):
    """Record the combined source + target objective.

    Returns ``(graph, terms, total)`` where ``terms`` maps term keys
    (``sc, svat, jsc, te, tvat, jtc``) to scalar tensors.  ``only`` restricts
    which terms enter ``total`` (instrumentation); terms with zero effective
    weight are skipped entirely.  Either batch may be None to skip its terms.
    """
    rng = _rng(rng)
    tw = weights.term_weights()
    active = {t for t in PHASE1_TERMS if tw[t] > 0}
    if only is not None:
        active &= set(only)
    if src is None:
        active -= {"sc", "svat", "jsc"}
    if tgt is None:
        active -= {"te", "tvat", "jtc"}
    g = graph if graph is not None else Graph(params)
    k = params.arch.n_classes
    terms: dict[str, Tensor] = {}

    if src is not None:
        xs, ys = _batch(src)
        ys = _onehot_labels(ys, k)
        zs = g.encode(g.input(xs))
        src_logits = g.class_logits(zs)
        terms["sc"] = ce_mean(src_logits, g.tape.constant(ys))
        if "svat" in active:
            delta = vat_perturbation(params, xs, weights.eps_x, weights.xi, rng)
            terms["svat"] = vat_term(g, src_logits, xs, delta)
        if "jsc" in active:
            jl = g.joint_logits(ad.stop_gradient(zs))
            terms["jsc"] = ce_mean(jl, g.tape.constant(joint_label(ys, SOURCE)))

    if active & {"te", "tvat", "jtc"}:
        xt, _ = _batch(tgt)
        zt = g.encode(g.input(xt))
        tgt_logits = g.class_logits(zt)
        if "te" in active:
            terms["te"] = entropy_mean(tgt_logits)
        if "tvat" in active:
            delta = vat_perturbation(params, xt, weights.eps_x, weights.xi, rng)
            terms["tvat"] = vat_term(g, tgt_logits, xt, delta)
        if "jtc" in active:
            yhat = ad.onehot_argmax(tgt_logits)
            jl = g.joint_logits(ad.stop_gradient(zt))
            terms["jtc"] = ce_mean(jl, _joint_half(yhat, first=False))

    total = None
    for t in PHASE1_TERMS:
        if t in terms and t in active:
            part = terms[t] * tw[t] if tw[t] != 1.0 else terms[t]
            total = part if total is None else total + part
    if total is None:
        total = g.tape.constant(0.0)
    g.tape.mark_output("loss", total)
    return g, terms, total


def build_adversarial(params: ParamSet, src, tgt, weights: LossWeights, only=None,
                      graph: Graph | None = None):
    """Record the encoder's alignment objective with both heads frozen.

    Source samples are pushed toward ``[0, y]`` and target samples toward
    ``[yhat, 0]``, ``yhat`` the class head's detached argmax.
    """
    tw = weights.term_weights()
    active = {t for t in ADV_TERMS if tw[t] > 0}
    if only is not None:
        active &= set(only)
    g = graph if graph is not None else Graph(params, frozen=("class_head", "joint_head"))
    k = params.arch.n_classes
    terms: dict[str, Tensor] = {}
    if "jsa" in active:
        xs, ys = _batch(src)
        ys = _onehot_labels(ys, k)
        zs = g.encode(g.input(xs))
        terms["jsa"] = ce_mean(g.joint_logits(zs), g.tape.constant(joint_label(ys, SOURCE, flipped=True)))
    if "jta" in active and tgt is not None:
        xt, _ = _batch(tgt)
        zt = g.encode(g.input(xt))
        yhat = ad.onehot_argmax(g.class_logits(zt))
        terms["jta"] = ce_mean(g.joint_logits(zt), _joint_half(yhat, first=True))
    total = None
    for t in ADV_TERMS:
        if t in terms:
            part = terms[t] * tw[t] if tw[t] != 1.0 else terms[t]
            total = part if total is None else total + part
    if total is None:
        total = g.tape.constant(0.0)
    g.tape.mark_output("loss", total)
    return g, terms, total


# --- value-level API ------------------------------------------------------------

def _values(terms) -> dict[str, float]:
    return {f"L_{k}": float(v.value) for k, v in terms.items()}


def source_losses(params: ParamSet, src_batch, weights: LossWeights, seed=0) -> dict[str, float]:
    """L_sc, L_svat, L_jsc and L_s = L_sc + l_svat L_svat + l_jsc L_jsc."""
    xs, ys = _batch(src_batch)
    if ys is None:
        raise ValueError("source batch needs labels")
    terms_wanted = {"sc", "svat", "jsc"}
    # evaluate every term regardless of weight so the dict is complete
    probe = weights.replace(lambda_svat=max(weights.lambda_svat, 1.0), lambda_jsc=max(weights.lambda_jsc, 1.0))
    _, terms, _ = build_objective(params, (xs, ys), None, probe, rng=seed, only=terms_wanted)
    out = _values(terms)
    out["L_s"] = out["L_sc"] + weights.lambda_svat * out["L_svat"] + weights.lambda_jsc * out["L_jsc"]
    return out


def target_losses(params: ParamSet, tgt_batch, weights: LossWeights, seed=0) -> dict[str, float]:
    """L_te, L_tvat, L_jtc and L_t = l_te L_te + l_tvat L_tvat + l_jtc L_jtc."""
    xt, _ = _batch(tgt_batch)
    probe = weights.replace(lambda_t=1.0, lambda_te=1.0, lambda_tvat=1.0, lambda_jtc=1.0)
    _, terms, _ = build_objective(params, None, xt, probe, rng=seed)
    out = _values(terms)
    out["L_t"] = (weights.lambda_te * out["L_te"] + weights.lambda_tvat * out["L_tvat"]
                  + weights.lambda_jtc * out["L_jtc"])
    return out


def adversarial_loss(params: ParamSet, src_batch, tgt_batch, weights: LossWeights) -> float:
    """L_adv = l_jsa L_jsa + l_jta L_jta."""
    _, ys = _batch(src_batch)
    if ys is None:
        raise ValueError("source batch needs labels")
    _, _, total = build_adversarial(params, src_batch, tgt_batch, weights)
    return float(total.value)


def total_loss(params: ParamSet, src_batch, tgt_batch, weights: LossWeights, seed=0) -> float:
    """L = L_s + l_t L_t."""
    s = source_losses(params, src_batch, weights, seed)
    t = target_losses(params, tgt_batch, weights, seed)
    return s["L_s"] + weights.lambda_t * t["L_t"]
