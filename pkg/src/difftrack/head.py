"""Center-point prediction head and its supervision.

The head maps fused search tokens back onto the crop grid and predicts a
classification map plus per-cell offset and size regressions, all sigmoid
bounded. Boxes decode from the score peak; at inference the score map is
blended with a Hanning window to damp jumps away from the previous target
position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DegenerateInputError, ShapeError
from .geometry import BoundingBox, BoxFormat, BoxUnit, localization_loss_terms

DEFAULT_HANN_WEIGHT = 0.49
SIGMA_SCALE = 1.0 / 6.0
SIGMA_MIN = 0.5


def _branch(dim: int, out_ch: int, layers: int) -> nn.Sequential:
    mods: list[nn.Module] = []
    for _ in range(layers):
        mods += [nn.Conv2d(dim, dim, 3, padding=1), nn.BatchNorm2d(dim), nn.ReLU(inplace=True)]
    mods += [nn.Conv2d(dim, out_ch, 1), nn.Sigmoid()]
    return nn.Sequential(*mods)


class CenterHead(nn.Module):
    """Fused search tokens (B, G*G, C) -> cls/offset/size maps on the grid."""

    def __init__(self, dim: int, layers: int = 3):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"head layers must be >= 1, got {layers}")
        self.cls_branch = _branch(dim, 1, layers)
        self.offset_branch = _branch(dim, 2, layers)
        self.size_branch = _branch(dim, 2, layers)

    def forward(self, tokens: torch.Tensor) -> dict[str, torch.Tensor]:
        b, n, c = tokens.shape
        g = int(math.isqrt(n))
        if g * g != n:
            raise ShapeError(f"search token count {n} is not a square grid")
        x = tokens.transpose(1, 2).reshape(b, c, g, g)
        return {
            "cls": self.cls_branch(x),      # (B, 1, G, G)
            "offset": self.offset_branch(x),  # (B, 2, G, G), (x, y) in-cell
            "size": self.size_branch(x),    # (B, 2, G, G), (w, h) normalized
        }


def hanning_window(grid: int) -> torch.Tensor:
    """2D Hanning window on the score grid, scaled so its peak is 1."""
    if grid < 1:
        raise ConfigError(f"grid must be positive, got {grid}")
    w = np.outer(np.hanning(grid), np.hanning(grid))
    peak = w.max()
    if peak > 0:
        w = w / peak
    else:  # all-zero degenerate windows (grid <= 2) blend as flat zeros
        w = np.zeros_like(w)
    return torch.from_numpy(w).float()


def blend_scores(cls_map: torch.Tensor, window: torch.Tensor,
                 weight: float = DEFAULT_HANN_WEIGHT) -> torch.Tensor:
    """(1 - weight) * scores + weight * window, elementwise on (G, G)."""
    if not 0.0 <= weight <= 1.0:
        raise ConfigError(f"hann weight must be in [0, 1], got {weight}")
    if cls_map.shape != window.shape:
        raise ShapeError(f"score/window shapes differ: {tuple(cls_map.shape)} "
                         f"vs {tuple(window.shape)}")
    return (1.0 - weight) * cls_map + weight * window


def decode_box(maps: dict[str, torch.Tensor], window: torch.Tensor | None = None,
               hann_weight: float = DEFAULT_HANN_WEIGHT) -> tuple[BoundingBox, float]:
    """Pick the score peak and assemble a crop-normalized CXCYWH box.

    Single-sample decode: maps are (1, C, G, G). Ties resolve to the first
    peak in row-major order. Returns the box and the peak score actually
    used for selection (blended when a window is given).
    """
    cls_map = maps["cls"][0, 0]
    g = cls_map.shape[-1]
    score_map = cls_map if window is None else blend_scores(cls_map, window, hann_weight)
    flat_idx = int(torch.argmax(score_map.reshape(-1)))
    row, col = divmod(flat_idx, g)

    off = maps["offset"][0, :, row, col]
    size = maps["size"][0, :, row, col]
    cx = (col + float(off[0])) / g
    cy = (row + float(off[1])) / g
    box = BoundingBox(cx, cy, float(size[0]), float(size[1]),
                      format=BoxFormat.CXCYWH, unit=BoxUnit.NORMALIZED)
    return box, float(score_map[row, col])


@dataclass(frozen=True)
class HeadTargets:
    heatmap: torch.Tensor        # (G, G), peak exactly 1 at the center cell
    center: tuple[int, int]      # (row, col)
    offset: torch.Tensor         # (2,) fractional (x, y) within the cell
    size: torch.Tensor           # (2,) normalized (w, h)


def encode_targets(box: BoundingBox, grid: int) -> HeadTargets:
    """Ground-truth maps for a crop-normalized box.

    The heatmap is a separable Gaussian with per-axis spread proportional
    to the box size (floored), and is exactly 1 at the integer center cell
    so the focal positive term is well defined.
    """
    if box.unit is not BoxUnit.NORMALIZED:
        raise ShapeError("encode_targets expects a NORMALIZED box")
    cx, cy, w, h = box.as_cxcywh()
    if w <= 0.0 or h <= 0.0:
        raise DegenerateInputError(f"target box has non-positive size ({w}, {h})")
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        raise ShapeError(f"box center ({cx:.3f}, {cy:.3f}) lies outside the crop")
    col = min(int(cx * grid), grid - 1)
    row = min(int(cy * grid), grid - 1)

    sigma_x = max(SIGMA_SCALE * w * grid, SIGMA_MIN)
    sigma_y = max(SIGMA_SCALE * h * grid, SIGMA_MIN)
    ys = torch.arange(grid, dtype=torch.float32)
    dx2 = (ys - col) ** 2 / (2 * sigma_x ** 2)
    dy2 = (ys - row) ** 2 / (2 * sigma_y ** 2)
    heat = torch.exp(-(dy2[:, None] + dx2[None, :]))
    heat[row, col] = 1.0  # exact peak regardless of float rounding

    offset = torch.tensor([cx * grid - col, cy * grid - row], dtype=torch.float32)
    size = torch.tensor([w, h], dtype=torch.float32)
    return HeadTargets(heat, (row, col), offset, size)


def focal_loss(pred: torch.Tensor, heatmap: torch.Tensor,
               alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced focal loss on a sigmoid classification map.

    Cells with target exactly 1 are positives; everywhere else the negative
    term is down-weighted by (1 - target)^beta. Normalized by the positive
    count.
    """
    pred = pred.clamp(1e-6, 1.0 - 1e-6)
    pos = (heatmap == 1.0).float()
    neg_weight = (1.0 - heatmap).pow(beta)
    pos_term = pos * (1.0 - pred).pow(alpha) * pred.log()
    neg_term = (1.0 - pos) * neg_weight * pred.pow(alpha) * (1.0 - pred).log()
    n_pos = pos.sum().clamp(min=1.0)
    return -(pos_term + neg_term).sum() / n_pos


def head_loss(maps: dict[str, torch.Tensor], targets: list[HeadTargets],
              l1_weight: float = 5.0, giou_weight: float = 2.0,
              focal_weight: float = 1.0) -> dict[str, torch.Tensor]:
    """Composite supervision: focal on the cls map plus L1/GIoU on the box
    decoded at the ground-truth center cell.

    Reading the regressed offset and size at the true cell keeps the box
    terms well-defined even while the score map is still diffuse.
    """
    b = maps["cls"].shape[0]
    if len(targets) != b:
        raise ShapeError(f"got {len(targets)} targets for batch of {b}")
    g = maps["cls"].shape[-1]

    heat = torch.stack([t.heatmap for t in targets]).unsqueeze(1)
    cls_loss = focal_loss(maps["cls"], heat)

    pred_boxes, gt_boxes = [], []
    for i, t in enumerate(targets):
        row, col = t.center
        off = maps["offset"][i, :, row, col]
        size = maps["size"][i, :, row, col]
        cx = (col + off[0]) / g
        cy = (row + off[1]) / g
        pred_boxes.append(torch.stack([cx, cy, size[0], size[1]]))
        gcx = (col + t.offset[0]) / g
        gcy = (row + t.offset[1]) / g
        gt_boxes.append(torch.stack([gcx, gcy, t.size[0], t.size[1]]))
    l1, giou_term = localization_loss_terms(torch.stack(pred_boxes), torch.stack(gt_boxes))
    l1 = l1.mean()
    giou_term = giou_term.mean()

    total = l1_weight * l1 + giou_weight * giou_term + focal_weight * cls_loss
    return {"total": total, "l1": l1, "giou": giou_term, "focal": cls_loss}
