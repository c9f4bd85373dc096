"""Benchmark metrics: success/AUC, precision, normalized precision, AO/SR.

Threshold conventions vary silently across toolkits, so they are pinned
here and tested exactly:

- success_auc: 21 thresholds {0, 0.05, ..., 1.0}, success is strict
  ``iou > tau`` (so perfect tracking scores 20/21, not 1.0).
- precision: ``err <= tau`` with tau in pixels (default 20).
- norm_precision: center error normalized per-axis by the ground-truth box
  size, 21 thresholds {0, 0.025, ..., 0.5}; success is strict ``<`` at
  tau = 0 and inclusive ``<=`` at positive taus. Frames with a zero-size
  ground-truth box are skipped and counted.
- got10k: ao = mean iou, sr_tau = fraction(iou > tau).
- aggregation over sequences = unweighted mean of per-sequence values.
"""

from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError
from .geometry import BoundingBox, iou

SUCCESS_TAUS = np.arange(21) / 20.0
NORM_PREC_TAUS = np.arange(21) / 40.0
PRECISION_PX = 20.0
AGGREGATE_KEYS = ("auc", "precision", "norm_precision", "ao", "sr50", "sr75", "mean_iou")


def _check_pair(pred: list, gt: list):
    if not pred or not gt:
        raise UndefinedMetricError("metrics undefined on empty box lists")
    if len(pred) != len(gt):
        raise UndefinedMetricError(f"length mismatch: {len(pred)} predictions "
                                   f"vs {len(gt)} ground-truth boxes")


def iou_series(pred: list[BoundingBox], gt: list[BoundingBox]) -> np.ndarray:
    _check_pair(pred, gt)
    return np.array([iou(p, g) for p, g in zip(pred, gt)])


def center_errors_px(pred: list[BoundingBox], gt: list[BoundingBox]) -> np.ndarray:
    _check_pair(pred, gt)
    out = []
    for p, g in zip(pred, gt):
        (px, py), (gx, gy) = p.center, g.center
        out.append(float(np.hypot(px - gx, py - gy)))
    return np.array(out)


def norm_center_errors(pred: list[BoundingBox],
                       gt: list[BoundingBox]) -> tuple[np.ndarray, int]:
    """Per-axis gt-size-normalized center distances; zero-size gt frames are
    skipped, their count returned."""
    _check_pair(pred, gt)
    errs, skipped = [], 0
    for p, g in zip(pred, gt):
        if g.width <= 0 or g.height <= 0:
            skipped += 1
            continue
        (px, py), (gx, gy) = p.center, g.center
        errs.append(float(np.hypot((px - gx) / g.width, (py - gy) / g.height)))
    return np.array(errs), skipped


def success_auc(ious: np.ndarray) -> float:
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        raise UndefinedMetricError("success_auc undefined on empty input")
    rates = [(ious > tau).mean() for tau in SUCCESS_TAUS]
    return float(np.mean(rates))


def success_curve(ious: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        raise UndefinedMetricError("success curve undefined on empty input")
    return SUCCESS_TAUS, np.array([(ious > tau).mean() for tau in SUCCESS_TAUS])


def precision(errors_px: np.ndarray, tau: float = PRECISION_PX) -> float:
    errors_px = np.asarray(errors_px, dtype=float)
    if errors_px.size == 0:
        raise UndefinedMetricError("precision undefined on empty input")
    return float((errors_px <= tau).mean())


def precision_curve(errors_px: np.ndarray, max_px: float = 50.0,
                    points: int = 51) -> tuple[np.ndarray, np.ndarray]:
    errors_px = np.asarray(errors_px, dtype=float)
    if errors_px.size == 0:
        raise UndefinedMetricError("precision curve undefined on empty input")
    taus = np.linspace(0.0, max_px, points)
    return taus, np.array([(errors_px <= tau).mean() for tau in taus])


def _norm_success(err: float, tau: float) -> bool:
    # Strict at the zero threshold (a perfect frame still fails tau=0,
    # matching the success_auc convention at its top end); inclusive above.
    return err < tau if tau == 0.0 else err <= tau


def norm_precision(norm_errors: np.ndarray) -> float:
    norm_errors = np.asarray(norm_errors, dtype=float)
    if norm_errors.size == 0:
        raise UndefinedMetricError("norm_precision undefined on empty input")
    rates = [np.mean([_norm_success(e, tau) for e in norm_errors])
             for tau in NORM_PREC_TAUS]
    return float(np.mean(rates))


def got10k_metrics(ious: np.ndarray) -> dict[str, float]:
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        raise UndefinedMetricError("got10k metrics undefined on empty input")
    return {
        "ao": float(ious.mean()),
        "sr50": float((ious > 0.5).mean()),
        "sr75": float((ious > 0.75).mean()),
    }


def evaluate_sequence(pred: list[BoundingBox], gt: list[BoundingBox],
                      precision_px: float = PRECISION_PX) -> dict[str, float]:
    ious = iou_series(pred, gt)
    errs = center_errors_px(pred, gt)
    nerrs, skipped = norm_center_errors(pred, gt)
    got = got10k_metrics(ious)
    return {
        "auc": success_auc(ious),
        "precision": precision(errs, precision_px),
        "norm_precision": norm_precision(nerrs) if nerrs.size else 0.0,
        "ao": got["ao"],
        "sr50": got["sr50"],
        "sr75": got["sr75"],
        "mean_iou": float(ious.mean()),
        "n_frames": len(pred),
        "skipped_norm_frames": skipped,
    }


def aggregate(per_sequence: list[dict[str, float]]) -> dict[str, float]:
    """Unweighted mean over sequences for every rate metric; frame counts sum."""
    if not per_sequence:
        raise UndefinedMetricError("aggregate undefined on zero sequences")
    out = {k: float(np.mean([row[k] for row in per_sequence])) for k in AGGREGATE_KEYS}
    out["n_frames"] = int(sum(row["n_frames"] for row in per_sequence))
    out["n_sequences"] = len(per_sequence)
    return out


def format_report(rows: list[tuple[str, dict[str, float]]],
                  aggregate_row: dict[str, float]) -> str:
    """Tab-separated table: header, one row per sequence, aggregate last."""
    cols = list(AGGREGATE_KEYS)
    lines = ["\t".join(["sequence"] + cols)]
    for name, row in rows:
        lines.append("\t".join([name] + [f"{row[c]:.4f}" for c in cols]))
    lines.append("\t".join(["AGGREGATE"] + [f"{aggregate_row[c]:.4f}" for c in cols]))
    return "\n".join(lines) + "\n"
