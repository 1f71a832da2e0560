"""Experiment orchestration: dataset construction, modes, ablations, exports.

Every run writes into a fresh directory under the output root
(``$CONDALIGN_OUT`` or ``./runs``); existing reports are never overwritten.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import trainer
from .config import ExperimentConfig
from .data import Dataset, ShiftSpec, apply_shift, gen_blobs, gen_moons, load_csv, standardize
from .losses import LossWeights
from .networks import ParamSet, encode, init_params, save_params
from .theory import h_divergence_proxy

OUT_ENV = "CONDALIGN_OUT"

ABLATIONS = (
    ("without VAT", {"lambda_svat": 0.0, "lambda_tvat": 0.0}),
    ("without EntMin and VAT", {"lambda_te": 0.0, "lambda_svat": 0.0, "lambda_tvat": 0.0}),
    ("without source alignment", {"lambda_jsa": 0.0}),
    ("without target alignment", {"lambda_jta": 0.0}),
    ("without source and target alignment", {"lambda_jsa": 0.0, "lambda_jta": 0.0}),
)
SOURCE_ONLY = "source-only"
FULL = "full"
ABLATION_FIELDS = ("row", "acc_class", "acc_joint", "acc_class_test", "hdiv", "zeroed", "report_dir")


def output_root(out=None) -> Path:
    return Path(out or os.environ.get(OUT_ENV) or "runs")


def fresh_dir(root, stem: str) -> Path:
    """Create ``root/<timestamp>-<stem>[-n]`` that did not exist before."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    base = f"{time.strftime('%Y%m%d-%H%M%S')}-{stem}"
    for n in range(10000):
        path = root / (base if n == 0 else f"{base}-{n}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a report directory under {root}")


# --- data -------------------------------------------------------------------------

@dataclass(frozen=True)
class Splits:
    source: Dataset
    target: Dataset
    target_test: Dataset
    source_test: Dataset | None = None


def _shift(config: ExperimentConfig) -> ShiftSpec:
    s = config.data.shift
    return ShiftSpec(rotation=float(np.deg2rad(s.rotation_deg)), translation=tuple(s.translation),
                     scale=tuple(s.scale), permutation=tuple(s.permutation), noise_std=s.noise_std)


def build_datasets(config: ExperimentConfig) -> Splits:
    """Source/target train sets plus held-out target (and source) test sets."""
    d = config.data
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([config.seed, 7]).spawn(6)]
    if d.generator == "csv":
        src = load_csv(d.source_csv, has_labels=True, domain="source", name="source")
        k = src.n_classes
        tgt = load_csv(d.target_csv, has_labels=True, k=k, domain="target", name="target")
        src_test = (load_csv(d.source_test_csv, has_labels=True, k=k, domain="source", name="source_test")
                    if d.source_test_csv else None)
        tgt_test = tgt
    else:
        def gen(n, seed):
            if d.generator == "moons":
                return gen_moons(n, d.noise, seed=seed)
            return gen_blobs(n, d.n_classes, d.dim, d.separation, seed=seed, noise_std=d.noise)
        shift = _shift(config)
        src = gen(d.n, seeds[0])
        tgt = apply_shift(gen(d.n, seeds[1]), shift, seed=seeds[3])
        tgt_test = apply_shift(gen(d.n_test, seeds[2]), shift, seed=seeds[4])
        src_test = gen(d.n_test, seeds[5])
    if d.standardize:
        src, tgt, tgt_test = standardize(src), standardize(tgt), standardize(tgt_test)
        src_test = standardize(src_test) if src_test is not None else None
    return Splits(src, tgt, tgt_test, src_test)


# --- metrics ------------------------------------------------------------------------

def centroid_distances(z_src, y_src, z_tgt, y_tgt, n_classes: int) -> list[float | None]:
    """Per-class ``||mean z_src,k - mean z_tgt,k||``; None where a class is absent."""
    out: list[float | None] = []
    for k in range(n_classes):
        a, b = y_src == k, y_tgt == k
        if not a.any() or not b.any():
            out.append(None)
        else:
            out.append(float(np.linalg.norm(z_src[a].mean(0) - z_tgt[b].mean(0))))
    return out


def alignment_metrics(params: ParamSet, src: Dataset, tgt: Dataset, seed: int = 0, hdiv=True, **hdiv_kw) -> dict:
    if src.labels is None or tgt.labels is None:
        raise ValueError("alignment metrics need labels in both domains")
    zs, zt = encode(params, src.features), encode(params, tgt.features)
    dist = centroid_distances(zs, src.class_index, zt, tgt.class_index, params.arch.n_classes)
    present = [d for d in dist if d is not None]
    out = {"centroid_distances": dist, "mean_centroid_distance": float(np.mean(present)) if present else None}
    if hdiv:
        out["hdiv"] = h_divergence_proxy(zs, zt, seed=seed, **hdiv_kw)
    return out


def pca_2d(features) -> np.ndarray:
    """Project onto the top two principal axes of ``features`` (centered).

    Signs are fixed so the largest-magnitude loading of each axis is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], x.shape[1]))])
    for i in range(axes.shape[0]):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return xc @ axes.T


def export_features(params: ParamSet, datasets, path) -> tuple[Path, Path]:
    """Write ``<path>`` (features) and ``<path stem>_pca.csv`` for offline plotting."""
    path = Path(path)
    rows, feats = [], []
    for ds in datasets:
        z = encode(params, ds.features)
        pred = trainer.predict_classes(params, ds.features)
        true = ds.class_index if ds.labels is not None else np.full(len(z), -1)
        for i in range(len(z)):
            rows.append((ds.domain, int(true[i]), int(pred[i])))
        feats.append(z)
    z = np.vstack(feats)
    proj = pca_2d(z)
    path.parent.mkdir(parents=True, exist_ok=True)
    pca_path = path.with_name(path.stem + "_pca.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "true", "pred"] + [f"z{j}" for j in range(z.shape[1])] + ["pc1", "pc2"])
        for (dom, t, p), zi, pi in zip(rows, z, proj):
            w.writerow([dom, t, p] + [format(v, ".17g") for v in zi] + [format(v, ".17g") for v in pi])
    with open(pca_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "true", "pred", "pc1", "pc2"])
        for (dom, t, p), pi in zip(rows, proj):
            w.writerow([dom, t, p, format(pi[0], ".17g"), format(pi[1], ".17g")])
    return path, pca_path


# --- experiments --------------------------------------------------------------------

@dataclass
class Report:
    name: str
    mode: str
    config_digest: str
    seed: int
    acc_class: float
    acc_joint: float
    acc_class_test: float
    acc_joint_test: float
    hdiv_before: float | None
    hdiv_after: float | None
    centroids_before: list
    centroids_after: list
    curriculum: dict
    history_path: str
    wall_clock: float
    weights: dict = field(default_factory=dict)
    report_dir: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def mode_weights(config: ExperimentConfig, src: Dataset, mode: str | None = None) -> LossWeights:
    w = trainer.resolve_weights(config, src)
    mode = mode or config.mode
    if mode in (SOURCE_ONLY, "target-only"):
        w = trainer.source_only_weights(w)
    return w


def run_experiment(config: ExperimentConfig, out=None, splits: Splits | None = None,
                   weights: LossWeights | None = None, label: str | None = None):
    """Train one configuration and write ``report.json`` + ``history.csv``.

    Returns ``(report, params)``.  ``mode=ablation`` is handled by
    :func:`run_ablations`.
    """
    if config.mode == "ablation":
        raise ValueError("use run_ablations for mode 'ablation'")
    t0 = time.perf_counter()
    splits = splits or build_datasets(config)
    src, tgt = splits.source, splits.target
    if config.mode == "target-only":
        # target labels revealed: the labelled domain is the target itself
        src = Dataset(tgt.features, tgt.labels, "source", "target_labelled")
    if weights is None:
        weights = mode_weights(config, src)
    stem = f"{label or config.name}-{config.mode}-{config.digest()[:8]}".replace(" ", "_")
    rdir = fresh_dir(output_root(out), stem)
    history_path = rdir / "history.csv"
    ckpt = rdir / "checkpoints" if config.checkpoint_interval else None
    if ckpt is not None:
        ckpt.mkdir()
    seeds = trainer._seeds(config.seed)
    hd = config.hdiv
    hkw = dict(steps=hd.steps, width=hd.width, lr=hd.lr, max_samples=hd.max_samples)
    before = alignment_metrics(init_params(trainer.arch_for(config, src), seeds["init"]), splits.source, tgt,
                               seed=seeds["hdiv"], hdiv=hd.enabled, **hkw)
    schedule, info = trainer.schedule_for(config, src, tgt) if config.iterations else (trainer.OFF, {})
    params, history = trainer._train(config, src, tgt, weights, schedule, eval_target=tgt,
                                     history_path=history_path, checkpoint_dir=ckpt)
    after = alignment_metrics(params, splits.source, tgt, seed=seeds["hdiv"], hdiv=hd.enabled, **hkw)
    rep = Report(
        name=config.name, mode=config.mode, config_digest=config.digest(), seed=config.seed,
        acc_class=trainer.evaluate(params, tgt, "class_predictor"),
        acc_joint=trainer.evaluate(params, tgt, "joint_predictor"),
        acc_class_test=trainer.evaluate(params, splits.target_test, "class_predictor"),
        acc_joint_test=trainer.evaluate(params, splits.target_test, "joint_predictor"),
        hdiv_before=before.get("hdiv"), hdiv_after=after.get("hdiv"),
        centroids_before=before["centroid_distances"], centroids_after=after["centroid_distances"],
        curriculum=info, history_path=str(history_path), wall_clock=time.perf_counter() - t0,
        weights=asdict(weights), report_dir=str(rdir))
    (rdir / "config.json").write_text(config.to_json())
    (rdir / "report.json").write_text(rep.to_json())
    save_params(params, rdir / "params.caln")
    return rep, params


def ablation_weights(base: LossWeights) -> list[tuple[str, LossWeights, dict]]:
    """The seven comparison rows in table order: five ablations, source-only, full."""
    rows = [(name, base.replace(**zero), zero) for name, zero in ABLATIONS]
    so = trainer.source_only_weights(base)
    rows.append((SOURCE_ONLY, so, {k: 0.0 for k, v in asdict(so).items() if v != asdict(base)[k]}))
    rows.append((FULL, base, {}))
    return rows


def run_ablations(config: ExperimentConfig, out=None) -> tuple[list[dict], Path]:
    """Run the comparison table for one seed; returns rows and the CSV path."""
    base_cfg = config.replace(mode="full") if config.mode == "ablation" else config
    splits = build_datasets(base_cfg)
    base = trainer.resolve_weights(base_cfg, splits.source)
    root = fresh_dir(output_root(out), f"{config.name}-ablation-seed{config.seed}")
    rows = []
    for name, w, zeroed in ablation_weights(base):
        cfg = base_cfg.replace(mode=SOURCE_ONLY) if name == SOURCE_ONLY else base_cfg
        rep, _ = run_experiment(cfg, out=root, splits=splits, weights=w, label=name)
        rows.append({"row": name, "acc_class": rep.acc_class, "acc_joint": rep.acc_joint,
                     "acc_class_test": rep.acc_class_test, "hdiv": rep.hdiv_after,
                     "zeroed": " ".join(sorted(zeroed)), "report_dir": rep.report_dir})
    path = root / "ablations.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})
    return rows, path


def between(rows: list[dict], key: str = "acc_class") -> list[bool]:
    """For each ablation row, whether it lies between source-only and full."""
    by = {r["row"]: r[key] for r in rows}
    lo, hi = sorted((by[SOURCE_ONLY], by[FULL]))
    return [lo <= by[name] <= hi for name, _ in ABLATIONS]
