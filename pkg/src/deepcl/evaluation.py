"""Confusion-matrix metrics, threshold selection and the experiment drivers."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import hsac_gradient_weight
from .synthdata import ChangeSample
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

DEFAULT_GRID = np.round(np.arange(0, 201) * 0.01, 2)
DEFAULT_TAUS = (0.05, 0.1, 0.2, 0.5, 1.0, 10.0)
AGGREGATION = "pooled-pixels"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    iou: float
    precision: float
    recall: float
    f1: float
    tp: int
    tn: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def confusion(pred, gt) -> ConfusionMatrix:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
    for name, a in (("prediction", p), ("ground truth", g)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    p, g = p.astype(bool), g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionMatrix(tp, p.size - tp - fp - fn, fp, fn)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """IoU, precision, recall and F1 of the changed class.

    Zero denominators give 0, except an empty scene with an empty prediction
    (tp = fp = fn = 0), which scores 1 on every metric.
    """
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    if min(cm.tp, cm.tn, cm.fp, cm.fn) < 0:
        raise ValueError(f"negative count in {cm}")
    if tp == fp == fn == 0:
        return MetricsReport(1.0, 1.0, 1.0, 1.0, cm.tp, cm.tn, cm.fp, cm.fn)

    def div(a, b):
        return a / b if b else 0.0

    iou = div(tp, tp + fn + fp)
    precision = div(tp, tp + fp)
    recall = div(tp, tp + fn)
    f1 = div(2 * precision * recall, precision + recall)
    return MetricsReport(iou, precision, recall, f1, cm.tp, cm.tn, cm.fp, cm.fn)


def threshold_sweep(dist_maps, gts, grid: Sequence[float] | None = None):
    """Pick the distance threshold with the best pooled F1 (changed where D > t).

    Ties go to the smaller threshold. If the ground truth has no changed pixel
    at all, the grid maximum (predict nothing) is returned.
    Returns ``(best_threshold, [MetricsReport per grid point])``.
    """
    grid = np.asarray(DEFAULT_GRID if grid is None else grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty threshold grid")
    if isinstance(dist_maps, (list, tuple)):
        if not dist_maps:
            raise ValueError("no distance maps given")
        d = np.concatenate([_arr(x).reshape(-1) for x in dist_maps])
        y = np.concatenate([_arr(x).reshape(-1) for x in gts])
    else:
        d, y = _arr(dist_maps).reshape(-1), _arr(gts).reshape(-1)
    if d.shape != y.shape:
        raise DimensionError(f"{d.size} distances vs {y.size} labels")
    y = y.astype(bool)
    pos = np.sort(d[y])
    neg = np.sort(d[~y])
    tp = pos.size - np.searchsorted(pos, grid, side="right")
    fp = neg.size - np.searchsorted(neg, grid, side="right")
    fn = pos.size - tp
    tn = neg.size - fp
    reports = [metrics(ConfusionMatrix(int(a), int(b), int(c), int(e)))
               for a, b, c, e in zip(tp, tn, fp, fn)]
    if pos.size == 0:
        return float(grid.max()), reports
    f1 = np.array([r.f1 for r in reports])
    return float(grid[int(np.argmax(f1))]), reports


def false_positive_rate(pred, gt) -> float:
    cm = confusion(pred, gt)
    return cm.fp / (cm.fp + cm.tn) if cm.fp + cm.tn else 0.0


def gradient_weight_curve(taus: Sequence[float], grid: Sequence[float] | None = None) -> list[dict]:
    """Rows (tau, y, d_cos, weight) of the hard-sample gradient weight."""
    grid = np.linspace(-1, 1, 201) if grid is None else np.asarray(grid, dtype=float)
    return [{"tau": float(t), "y": y, "d_cos": float(c), "weight": hsac_gradient_weight(float(c), y, t)}
            for t in taus for y in (0, 1) for c in grid]


# ---------------------------------------------------------------------------
# experiment cells


def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run_cell(cfg, train_data: Sequence[ChangeSample], test_data: Sequence[ChangeSample],
             pseudo_data: Sequence[ChangeSample] | None = None, out_dir: str | Path | None = None) -> dict:
    """Train one configuration and score both inference paths on ``test_data``.

    The metric-path threshold is chosen by :func:`threshold_sweep` on the
    training data; the segmentation path thresholds logits at 0.
    """
    from . import network as N
    from .training import predict, train

    t0 = time.perf_counter()
    res = train(cfg, train_data, out_dir=out_dir)
    params = res.params
    train_pred = predict(params, train_data)
    thre, _ = threshold_sweep(train_pred.distance, np.stack([s.mask for s in train_data]))
    cell = {"config": cfg.to_dict(), "seed": cfg.seed, "threshold": thre,
            "train_log": res.log, "aggregation": AGGREGATION}
    gts = np.stack([s.mask for s in test_data])
    pred = predict(params, test_data)
    cell["metric"] = metrics(confusion((pred.distance > thre).astype(np.uint8), gts)).to_dict()
    cell["seg"] = None
    if pred.logits is not None:
        cell["seg"] = metrics(confusion(N.predict_seg(pred.logits), gts)).to_dict()
    if pseudo_data:
        pgt = np.stack([s.mask for s in pseudo_data])
        pp = predict(params, pseudo_data)
        cell["pseudo_fpr_metric"] = false_positive_rate((pp.distance > thre).astype(np.uint8), pgt)
        cell["pseudo_fpr_seg"] = (false_positive_rate(N.predict_seg(pp.logits), pgt)
                                  if pp.logits is not None else None)
    cell["train_seconds"] = res.seconds
    cell["cell_seconds"] = time.perf_counter() - t0
    return cell


def _cell_job(args):
    from .training import TrainingError

    name, cfg, train_data, test_data, pseudo_data, path, key = args
    try:
        cell = run_cell(cfg, train_data, test_data, pseudo_data,
                        out_dir=None if path is None else path.with_suffix(""))
    except TrainingError as exc:
        log.error("cell %s failed: %s", name, exc)
        cell = {"failed": str(exc), "config": cfg.to_dict()}
    cell["name"], cell["key"] = name, key
    text = json.dumps(cell, indent=1, sort_keys=True)
    if path is not None:
        path.write_text(text)
    # same shape whether fresh or reloaded from disk
    return json.loads(text)


def run_cells(cells: list[tuple[str, object]], train_data, test_data, pseudo_data=None,
              out_dir: str | Path | None = None, jobs: int = 1, salt: str = "") -> dict[str, dict]:
    """Run named configurations, skipping cells whose result file already matches.

    A cell result is reused only when its key (config, data fingerprint,
    ``salt``) matches, so edited configs or datasets are recomputed.
    """
    data_key = _fingerprint([s.meta.get("seed", i) if s.meta else i for i, s in enumerate(train_data)]
                            + [len(test_data), len(pseudo_data or [])])
    results: dict[str, dict] = {}
    todo = []
    cell_dir = None
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)
    for name, cfg in cells:
        key = _fingerprint([cfg.to_dict(), data_key, salt])
        path = None if cell_dir is None else cell_dir / f"{name}.json"
        if path is not None and path.exists():
            old = json.loads(path.read_text())
            if old.get("key") == key:
                log.info("cell %s: reusing %s", name, path)
                results[name] = old
                continue
        todo.append((name, cfg, train_data, test_data, pseudo_data, path, key))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            for cell in ex.map(_cell_job, todo):
                results[cell["name"]] = cell
    else:
        for job in todo:
            log.info("cell %s: training", job[0])
            cell = _cell_job(job)
            results[cell["name"]] = cell
    return {name: results[name] for name, _ in cells}


def _mean_std(xs: list[float]) -> tuple[float, float]:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def temperature_sweep(base_cfg, taus: Sequence[float], seeds: Sequence[int], train_data, test_data,
                      out_dir=None, jobs: int = 1, salt: str = "") -> list[dict]:
    """Train/evaluate every (tau, seed); rows of mean/stdev P, R, F1 per tau.

    Metric-only configurations are scored on the metric path, others on the
    segmentation path. A failed cell (non-finite training) is reported in the
    row's ``failed`` list and excluded from the statistics.
    """
    if not seeds:
        raise ValueError("empty seed list")
    cells = []
    for tau in taus:
        for seed in seeds:
            cfg = replace(base_cfg, seed=seed, loss=replace(base_cfg.loss, tau=float(tau)))
            cells.append((f"tau{tau:g}_seed{seed}", cfg))
    results = run_cells(cells, train_data, test_data, None, out_dir, jobs, salt)
    rows = []
    for tau in taus:
        per = [results[f"tau{tau:g}_seed{s}"] for s in seeds]
        ok = [c for c in per if "failed" not in c]
        path = "seg" if base_cfg.use_seg else "metric"
        row = {"tau": float(tau), "n": len(ok),
               "failed": [s for s, c in zip(seeds, per) if "failed" in c]}
        for m in ("precision", "recall", "f1", "iou"):
            vals = [c[path][m] for c in ok]
            row[f"{m}_mean"], row[f"{m}_std"] = _mean_std(vals) if vals else (float("nan"),) * 2
            row[f"{m}_per_seed"] = vals
        rows.append(row)
    return rows


def ablation_cells(base_cfg, seeds: Sequence[int]):
    from .training import ABLATIONS, TrainConfig

    base = {k: v for k, v in base_cfg.to_dict().items()
            if k not in ("use_hsac", "use_con", "use_seg", "use_metric_induction", "seed")}
    return [(f"ablation{row}_seed{seed}", TrainConfig.for_ablation(row, seed=seed, **base))
            for row in ABLATIONS for seed in seeds]


def ablation_grid(base_cfg, train_data, test_data, seeds: Sequence[int], pseudo_data=None,
                  out_dir=None, jobs: int = 1, salt: str = "") -> list[dict]:
    """Every ablation configuration per seed, one row per cell."""
    from .training import ABLATIONS

    if not seeds:
        raise ValueError("empty seed list")
    results = run_cells(ablation_cells(base_cfg, seeds), train_data, test_data, pseudo_data,
                        out_dir, jobs, salt)
    rows = []
    for row in ABLATIONS:
        metric, decoder = ABLATIONS[row]
        for seed in seeds:
            c = results[f"ablation{row}_seed{seed}"]
            if "failed" in c:
                rows.append({"row": row, "metric_loss": metric or "", "decoder": decoder,
                             "seed": seed, "failed": c["failed"]})
                continue
            scored = c["seg"] if c["seg"] is not None else c["metric"]
            rows.append({"row": row, "metric_loss": metric or "", "decoder": decoder, "seed": seed,
                         "iou": scored["iou"], "f1": scored["f1"],
                         "metric_path_f1": c["metric"]["f1"],
                         "seg_path_f1": c["seg"]["f1"] if c["seg"] else None,
                         "threshold": c["threshold"],
                         "pseudo_fpr_metric": c.get("pseudo_fpr_metric"),
                         "pseudo_fpr_seg": c.get("pseudo_fpr_seg")})
    return rows


def write_table(rows: list[dict], path_stem: str | Path, meta: dict | None = None) -> None:
    """CSV and JSON mirrors of ``rows`` at ``<stem>.csv`` / ``<stem>.json``."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0]) if rows else []
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, list) else v) for k, v in r.items()})
    doc = {"meta": {"aggregation": AGGREGATION, **(meta or {})}, "rows": rows}
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
