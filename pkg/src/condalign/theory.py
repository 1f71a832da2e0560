"""Closed-form optimality results for the joint predictor, with numeric oracles.

The measure-theoretic statements are made executable on finite "bin" spaces:
a :class:`DiscreteJoint` holds source and target mass over (feature bin, class).
On such tables the optimal joint head, the encoder's alignment objective and
the alignment / disjointness conditions can all be evaluated exactly, and
checked against brute-force or gradient-descent answers.

Also here: the empirical H-divergence proxy (a trained domain discriminator's
balanced holdout error mapped to [0, 2]) and k-means binning of encoder
features.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_EPS
from .losses import SOURCE, TARGET, ce_mean, joint_label
from .networks import Arch, Graph, class_predict, encode, init_params
from .optim import Optimizer, OptimizerSpec


@dataclass(frozen=True)
class DiscreteJoint:
    """``mass[b, k, d]``: probability of (bin b, class k) in domain d (0 source, 1 target)."""

    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        if m.ndim != 3 or m.shape[2] != 2 or m.shape[1] < 2:
            raise ValueError("mass must have shape (bins, K>=2, 2)")
        if np.any(m < 0):
            raise ValueError("masses must be nonnegative")
        sums = m.sum(axis=(0, 1))
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValueError(f"per-domain masses must sum to 1, got {sums}")
        object.__setattr__(self, "mass", m)

    @property
    def n_bins(self) -> int:
        return self.mass.shape[0]

    @property
    def n_classes(self) -> int:
        return self.mass.shape[1]

    @property
    def source(self) -> np.ndarray:
        return self.mass[:, :, 0]

    @property
    def target(self) -> np.ndarray:
        return self.mass[:, :, 1]

    @classmethod
    def from_tables(cls, source, target) -> "DiscreteJoint":
        return cls(np.stack([np.asarray(source, float), np.asarray(target, float)], axis=2))


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return h.hexdigest()[:16]


# --- simplex minimiser ------------------------------------------------------------

def lemma1_minimizer(alpha) -> np.ndarray:
    """argmin over the simplex of sum(-alpha * log theta): theta = alpha / sum(alpha)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0 or np.any(alpha <= 0):
        raise ValueError("alpha must be a non-empty vector of positive reals")
    return alpha / alpha.sum()


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = ind[u - css / ind > 0][-1]
    return np.maximum(v - css[rho - 1] / rho, 0.0)


def weighted_neg_log(alpha, theta) -> float:
    return float(-(np.asarray(alpha) * np.log(np.clip(theta, LOG_EPS, None))).sum())


def lemma1_numeric(alpha, seed: int = 0, tol: float = 1e-13, max_iter: int = 200000) -> np.ndarray:
    """Projected gradient descent on the simplex from a random interior start.

    Backtracking keeps iterates strictly inside (the objective is +inf on the
    boundary); stops when an accepted step moves less than ``tol``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    rng = np.random.default_rng(seed)
    theta = rng.dirichlet(np.ones(alpha.size))
    theta = project_simplex(0.5 * theta + 0.5 / alpha.size)
    step = 1.0 / alpha.sum()
    f = weighted_neg_log(alpha, theta)
    for _ in range(max_iter):
        grad = -alpha / theta
        for _ in range(80):
            cand = project_simplex(theta - step * grad)
            if np.all(cand > 0):
                fc = weighted_neg_log(alpha, cand)
                if fc <= f - 1e-4 * np.dot(grad, theta - cand):
                    break
            step *= 0.5
        else:
            break  # no decrease representable in float64
        moved = np.max(np.abs(cand - theta))
        theta, f = cand, fc
        step *= 2.0
        if moved < tol:
            break
    return theta


# --- two-distribution objective ------------------------------------------------------

def _lemma2_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    s = p + q
    live = s > 0
    ratio_q = np.where(live, q / np.where(live, s, 1.0), 1.0)
    ratio_p = np.where(live, p / np.where(live, s, 1.0), 1.0)
    return (-(p * np.log(np.clip(ratio_q, LOG_EPS, 1.0))).sum(-1)
            - (q * np.log(np.clip(ratio_p, LOG_EPS, 1.0))).sum(-1))


def lemma2_objective(p, q) -> float:
    """E_P[-log Q/(P+Q)] + E_Q[-log P/(P+Q)] on a finite support (ratios clamped at 1e-12)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(_lemma2_rows(p, q))


def simplex_grid(n: int, step: float) -> np.ndarray:
    """All points of the n-simplex whose coordinates are multiples of ``step``."""
    m = int(round(1.0 / step))
    head = np.indices((m + 1,) * (n - 1)).reshape(n - 1, -1).T
    head = head[head.sum(1) <= m]
    return np.column_stack([head, m - head.sum(1)]).astype(np.float64) / m


def lemma2_grid_search(p, step: float = 0.005) -> tuple[np.ndarray, float]:
    """Brute-force minimiser of Q -> lemma2_objective(P, Q) over a simplex grid."""
    p = np.asarray(p, dtype=np.float64)
    grid = simplex_grid(p.size, step)
    vals = _lemma2_rows(p, grid)
    i = int(np.argmin(vals))
    return grid[i], float(vals[i])


# --- optimal joint predictor ----------------------------------------------------------

def prop1_optimal_predictor(dj: DiscreteJoint) -> np.ndarray:
    """Per bin: [source mass by class, target mass by class] / total bin mass."""
    src, tgt = dj.source, dj.target
    z = src.sum(axis=1) + tgt.sum(axis=1)
    if np.any(z <= 0):
        raise ValueError(f"bins {np.flatnonzero(z <= 0).tolist()} carry no mass")
    return np.hstack([src, tgt]) / z[:, None]


def joint_classification_tape(dj: DiscreteJoint, logits0: np.ndarray):
    """Tape for L_jsc + L_jtc of a tabular joint head (one logit row per bin).

    Every (bin, class, domain) cell becomes one weighted sample whose target is
    the joint label of its class in its domain, so the objective is exactly the
    expected joint classification loss under the table.
    """
    b, k = dj.n_bins, dj.n_classes
    rows, targets, weights = [], [], []
    for dom, domain in enumerate((SOURCE, TARGET)):
        for bi in range(b):
            for ci in range(k):
                if dj.mass[bi, ci, dom] > 0:
                    rows.append(bi)
                    targets.append(joint_label(np.eye(k)[ci], domain))
                    weights.append(dj.mass[bi, ci, dom])
    tape = ad.Tape()
    table = tape.leaf("table", logits0)
    select = tape.constant(np.eye(b)[rows])
    logits = select @ table
    w = np.asarray(weights)
    # ce_mean averages rows; rescale so the sum is mass-weighted
    per_row = tape.constant(w[:, None] * len(w) * np.asarray(targets))
    loss = ce_mean(logits, per_row)
    tape.mark_output("loss", loss)
    return tape


def prop1_gradient_fit(dj: DiscreteJoint, seed: int = 0, lr: float | None = None,
                       max_iter: int = 200000, tol: float = 1e-12) -> np.ndarray:
    """Fit a tabular softmax joint head by gradient descent to convergence.

    Uses the loss construction from :mod:`condalign.losses` (joint labels,
    clamped log-softmax) so agreement with the closed form checks both.
    Per-bin step sizes scale with the inverse bin mass; the table rows are
    independent, so this is plain gradient descent on each bin's objective.
    """
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 0.1, (dj.n_bins, 2 * dj.n_classes))
    tape = joint_classification_tape(dj, logits)
    bin_mass = dj.mass.sum(axis=(1, 2))
    step = (1.0 if lr is None else lr) / np.maximum(bin_mass, 1e-300)[:, None]
    for _ in range(max_iter):
        tape.forward({"table": logits})
        g = tape.backward("loss")["table"]
        logits = logits - step * g
        if np.max(np.abs(step * g)) < tol:
            break
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --- encoder objective and alignment conditions -------------------------------------

def encoder_objective(dj: DiscreteJoint, predictor: np.ndarray | None = None) -> float:
    """L_jsa + L_jta under the table, with the joint head at its optimum by default.

    Source mass of class k is scored on slot K+k, target mass on slot k.
    """
    k = dj.n_classes
    h = prop1_optimal_predictor(dj) if predictor is None else np.asarray(predictor)
    log_h = np.log(np.clip(h, LOG_EPS, 1.0))
    return float(-(dj.source * log_h[:, k:]).sum() - (dj.target * log_h[:, :k]).sum())


def theorem1_check(dj: DiscreteJoint, tol: float = 1e-9) -> dict:
    """Alignment and disjointness of the table plus the encoder objective.

    aligned: for every class, the source and target conditional bin
    distributions agree within ``tol``.  disjoint: no bin carries more than
    ``tol`` mass (either domain) for two distinct classes.
    """
    src, tgt = dj.source, dj.target
    cs, ct = src.sum(axis=0), tgt.sum(axis=0)
    aligned = True
    for c in range(dj.n_classes):
        if cs[c] <= tol and ct[c] <= tol:
            continue
        if cs[c] <= tol or ct[c] <= tol:
            aligned = False
            break
        if np.max(np.abs(src[:, c] / cs[c] - tgt[:, c] / ct[c])) > tol:
            aligned = False
            break
    occupied = (src + tgt) > tol
    disjoint = bool(np.all(occupied.sum(axis=1) <= 1))
    return {"aligned": bool(aligned), "disjoint": disjoint,
            "encoder_objective": encoder_objective(dj)}


def aligned_disjoint_instance(n_bins: int, n_classes: int, seed: int = 0,
                              shared_prior: bool = True) -> DiscreteJoint:
    """Random table meeting both conditions: each bin owned by one class and
    identical class-conditionals across domains.  Class priors are random; with
    ``shared_prior`` both domains use the same one."""
    if n_bins < n_classes:
        raise ValueError("need at least one bin per class")
    rng = np.random.default_rng(seed)
    owner = np.r_[np.arange(n_classes), rng.integers(0, n_classes, n_bins - n_classes)]
    rng.shuffle(owner)
    cond = np.zeros((n_bins, n_classes))
    for c in range(n_classes):
        bins = np.flatnonzero(owner == c)
        cond[bins, c] = rng.dirichlet(np.ones(bins.size))
    prior_s = rng.dirichlet(2 * np.ones(n_classes))
    prior_t = prior_s if shared_prior else rng.dirichlet(2 * np.ones(n_classes))
    return DiscreteJoint.from_tables(cond * prior_s, cond * prior_t)


def mass_perturbations(dj: DiscreteJoint, fractions=None):
    """Yield (description, perturbed table) moving a fraction of one class's
    mass, in one domain, from an occupied bin to a different bin.

    Fractions default to the 0.01 grid up to 0.10 of the class's mass in
    that domain (capped by what the source bin holds).
    """
    if fractions is None:
        fractions = np.round(np.arange(1, 11) * 0.01, 2)
    b, k = dj.n_bins, dj.n_classes
    for dom in (0, 1):
        class_mass = dj.mass[:, :, dom].sum(axis=0)
        for c in range(k):
            for src_bin in range(b):
                held = dj.mass[src_bin, c, dom]
                if held <= 0:
                    continue
                for dst_bin in range(b):
                    if dst_bin == src_bin:
                        continue
                    for frac in fractions:
                        amount = min(frac * class_mass[c], held)
                        m = dj.mass.copy()
                        m[src_bin, c, dom] -= amount
                        m[dst_bin, c, dom] += amount
                        # renormalise against rounding drift
                        m[:, :, dom] /= m[:, :, dom].sum()
                        yield ((dom, c, src_bin, dst_bin, float(frac)), DiscreteJoint(m))


# --- H-divergence proxy ----------------------------------------------------------------

def h_divergence_proxy(src_feats, tgt_feats, seed: int = 0, steps: int = 500, width: int = 32,
                       lr: float = 0.01, max_samples: int | None = None) -> float:
    """2 * (1 - 2 * balanced holdout error) of a small MLP domain classifier, clamped to [0, 2].

    Each domain is split 50/50 into train and holdout.  Features are
    standardised with the pooled training mean and std.  The classifier has
    two leaky-ReLU layers of ``width`` units and is trained full-batch with
    ``steps`` Adam updates.
    """
    xs = np.asarray(src_feats, dtype=np.float64)
    xt = np.asarray(tgt_feats, dtype=np.float64)
    if xs.ndim == 1:
        xs, xt = xs[:, None], xt[:, None]
    if len(xs) < 4 or len(xt) < 4:
        raise ValueError("need at least 4 samples per domain")
    rng = np.random.default_rng(seed)
    if max_samples is not None:
        if len(xs) > max_samples:
            xs = xs[rng.choice(len(xs), max_samples, replace=False)]
        if len(xt) > max_samples:
            xt = xt[rng.choice(len(xt), max_samples, replace=False)]

    def split(x):
        idx = rng.permutation(len(x))
        half = len(x) // 2
        return x[idx[:half]], x[idx[half:]]

    s_tr, s_ho = split(xs)
    t_tr, t_ho = split(xt)
    x_tr = np.vstack([s_tr, t_tr])
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    norm = lambda x: (x - mu) / sd
    x_tr = norm(x_tr)
    y_tr = np.vstack([np.tile([1.0, 0.0], (len(s_tr), 1)), np.tile([0.0, 1.0], (len(t_tr), 1))])
    # weight rows so both domains count equally
    w = np.r_[np.full(len(s_tr), 0.5 / len(s_tr)), np.full(len(t_tr), 0.5 / len(t_tr))] * len(x_tr)

    arch = Arch(d_in=x_tr.shape[1], n_classes=2, widths=(width, width))
    params = init_params(arch, seed=int(rng.integers(2**31)))
    g = Graph(params, frozen=("joint_head",))
    logits = g.class_logits(g.encode(g.input(x_tr)))
    loss = ce_mean(logits, g.tape.constant(y_tr * w[:, None]))
    g.tape.mark_output("loss", loss)
    opt = Optimizer(OptimizerSpec(kind="adam", lr=lr, beta1=0.9, beta2=0.999, weight_decay=0.0))
    names = [n for n, _ in params.named() if not n.startswith("joint_head")]
    arrays = params.arrays()
    for _ in range(steps):
        grads = g.tape.backward(loss)
        opt.update("disc", {n: arrays[n] for n in names}, grads)
        g.tape.forward({n: arrays[n] for n in names})

    pred_s = class_predict(params, encode(params, norm(s_ho))).argmax()
    pred_t = class_predict(params, encode(params, norm(t_ho))).argmax()
    err = 0.5 * (np.mean(pred_s != 0) + np.mean(pred_t != 1))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


def threshold_scan_divergence(xs, xt, resolution: float = 0.001) -> float:
    """2 * (1 - 2 * err*) with err* the best balanced error of 1-D threshold rules."""
    xs, xt = np.ravel(xs), np.ravel(xt)
    lo, hi = min(xs.min(), xt.min()), max(xs.max(), xt.max())
    ts = np.arange(lo, hi + resolution, resolution)
    # fraction of each sample at or below every threshold
    fs = np.searchsorted(np.sort(xs), ts, side="right") / len(xs)
    ft = np.searchsorted(np.sort(xt), ts, side="right") / len(xt)
    # rule "source if x <= t": errors (1 - fs) on source, ft on target; and the mirror
    err = np.minimum(0.5 * ((1 - fs) + ft), 0.5 * (fs + (1 - ft)))
    return float(np.clip(2.0 * (1.0 - 2.0 * err.min()), 0.0, 2.0))


# --- binning of encoder features ------------------------------------------------------

def kmeans(points, m: int = 32, seed: int = 0, iters: int = 25) -> np.ndarray:
    """Lloyd iterations from a seeded random subset; returns the centroids."""
    x = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    m = min(m, len(x))
    centroids = x[rng.choice(len(x), m, replace=False)].copy()
    for _ in range(iters):
        assign = nearest(x, centroids)
        for j in range(m):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids


def nearest(x, centroids) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def discretize(z_src, y_src, z_tgt, y_tgt, m: int = 32, seed: int = 0) -> DiscreteJoint:
    """Empirical DiscreteJoint from features binned by pooled k-means centroids.

    ``y_*`` are integer class indices (true target labels: the analysis
    assumes labels are revealed).
    """
    z_src, z_tgt = np.asarray(z_src, float), np.asarray(z_tgt, float)
    y_src, y_tgt = np.asarray(y_src, int), np.asarray(y_tgt, int)
    k = int(max(y_src.max(), y_tgt.max())) + 1
    cents = kmeans(np.vstack([z_src, z_tgt]), m, seed)
    mass = np.zeros((len(cents), k, 2))
    np.add.at(mass[:, :, 0], (nearest(z_src, cents), y_src), 1.0 / len(z_src))
    np.add.at(mass[:, :, 1], (nearest(z_tgt, cents), y_tgt), 1.0 / len(z_tgt))
    occupied = mass.sum(axis=(1, 2)) > 0
    mass = mass[occupied]
    mass /= mass.sum(axis=(0, 1), keepdims=True)
    return DiscreteJoint(mass)


# --- oracle records -------------------------------------------------------------------

@dataclass
class OracleRecord:
    check: str
    inputs_digest: str
    value: float
    passed: bool
    tolerance: float

    def to_json(self) -> str:
        return json.dumps({"check": self.check, "inputs_digest": self.inputs_digest,
                           "value": self.value, "pass": self.passed,
                           "tolerance": self.tolerance}, sort_keys=True)


def run_oracle_suite(seed: int = 0, instances: int = 5) -> list[OracleRecord]:
    """Small randomized run of every closed-form check; one record per instance."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(instances):
        alpha = rng.uniform(0.05, 5.0, int(rng.integers(2, 9)))
        gap = float(np.max(np.abs(lemma1_minimizer(alpha) - lemma1_numeric(alpha, seed=i))))
        out.append(OracleRecord("lemma1_minimizer", _digest(alpha), gap, gap <= 1e-6, 1e-6))
    for i in range(instances):
        p = rng.dirichlet(np.ones(3))
        q_best, v = lemma2_grid_search(p, step=0.005)
        err = abs(v - np.log(4.0))
        ok = err <= 5e-3 and np.max(np.abs(q_best - p)) <= 0.005 + 1e-12
        out.append(OracleRecord("lemma2_objective", _digest(p), err, bool(ok), 5e-3))
    for i in range(instances):
        b, k = int(rng.integers(2, 6)), 2
        m = rng.dirichlet(np.ones(b * k), size=2).T.reshape(b, k, 2)
        dj = DiscreteJoint(m / m.sum(axis=(0, 1), keepdims=True))
        gap = float(np.max(np.abs(prop1_gradient_fit(dj, seed=i) - prop1_optimal_predictor(dj))))
        out.append(OracleRecord("prop1_optimal_predictor", _digest(dj.mass), gap, gap <= 1e-4, 1e-4))
    for i in range(instances):
        dj = aligned_disjoint_instance(int(rng.integers(2, 6)), 2, seed=int(rng.integers(2**31)))
        base = encoder_objective(dj)
        worst = min(encoder_objective(p) - base for _, p in mass_perturbations(dj))
        out.append(OracleRecord("theorem1_local_minimum", _digest(dj.mass), worst, worst > 0, 0.0))
    return out
