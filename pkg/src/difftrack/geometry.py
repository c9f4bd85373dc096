"""Box representations, overlap measures, crop mappings and box-level losses.

Everything here is pure: no weights, no state. The tensor kernels
(``box_iou_giou``, ``localization_loss_terms``) are differentiable and shared
by the training loss; the :class:`BoundingBox` wrappers are the scalar
convenience surface used by the tracker, metrics and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import cv2
import numpy as np
import torch

from .errors import DegenerateInputError, InputError, UnitError


class BoxFormat(Enum):
    XYWH_TOPLEFT = "xywh"
    CXCYWH = "cxcywh"
    XYXY = "xyxy"


class BoxUnit(Enum):
    PIXEL = "pixel"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with an explicit format tag.

    Fields (x, y, w, h) are read according to ``format``: for XYWH_TOPLEFT
    and CXCYWH they are (anchor_x, anchor_y, width, height); for XYXY the
    four fields hold (x1, y1, x2, y2).
    """

    x: float
    y: float
    w: float
    h: float
    format: BoxFormat = BoxFormat.XYWH_TOPLEFT
    unit: BoxUnit = BoxUnit.PIXEL

    def as_xyxy(self) -> tuple[float, float, float, float]:
        if self.format is BoxFormat.XYXY:
            return (self.x, self.y, self.w, self.h)
        if self.format is BoxFormat.XYWH_TOPLEFT:
            return (self.x, self.y, self.x + self.w, self.y + self.h)
        # CXCYWH
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.x - hw, self.y - hh, self.x + hw, self.y + hh)

    def as_xywh(self) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = self.as_xyxy()
        return (x1, y1, x2 - x1, y2 - y1)

    def as_cxcywh(self) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = self.as_xyxy()
        return ((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def to(self, fmt: BoxFormat) -> "BoundingBox":
        """Convert to another format; converting back returns the original."""
        if fmt is self.format:
            return self
        if fmt is BoxFormat.XYXY:
            vals = self.as_xyxy()
        elif fmt is BoxFormat.XYWH_TOPLEFT:
            vals = self.as_xywh()
        else:
            vals = self.as_cxcywh()
        return BoundingBox(*vals, format=fmt, unit=self.unit)

    @property
    def width(self) -> float:
        x1, _, x2, _ = self.as_xyxy()
        return x2 - x1

    @property
    def height(self) -> float:
        _, y1, _, y2 = self.as_xyxy()
        return y2 - y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        cx, cy, _, _ = self.as_cxcywh()
        return (cx, cy)

    def normalized(self, frame_w: float, frame_h: float) -> "BoundingBox":
        """PIXEL -> NORMALIZED; coordinates are clipped into [0, 1]."""
        if self.unit is BoxUnit.NORMALIZED:
            return self
        x1, y1, x2, y2 = self.as_xyxy()
        x1 = min(max(x1 / frame_w, 0.0), 1.0)
        y1 = min(max(y1 / frame_h, 0.0), 1.0)
        x2 = min(max(x2 / frame_w, 0.0), 1.0)
        y2 = min(max(y2 / frame_h, 0.0), 1.0)
        box = BoundingBox(x1, y1, x2, y2, format=BoxFormat.XYXY, unit=BoxUnit.NORMALIZED)
        return box.to(self.format)

    def to_pixels(self, frame_w: float, frame_h: float) -> "BoundingBox":
        if self.unit is BoxUnit.PIXEL:
            return self
        x1, y1, x2, y2 = self.as_xyxy()
        box = BoundingBox(x1 * frame_w, y1 * frame_h, x2 * frame_w, y2 * frame_h,
                          format=BoxFormat.XYXY, unit=BoxUnit.PIXEL)
        return box.to(self.format)

    def clipped(self, frame_w: float, frame_h: float) -> "BoundingBox":
        """Clip to [0, frame_w] x [0, frame_h] (or [0,1] when normalized)."""
        if self.unit is BoxUnit.NORMALIZED:
            frame_w = frame_h = 1.0
        x1, y1, x2, y2 = self.as_xyxy()
        x1 = min(max(x1, 0.0), frame_w)
        x2 = min(max(x2, 0.0), frame_w)
        y1 = min(max(y1, 0.0), frame_h)
        y2 = min(max(y2, 0.0), frame_h)
        return BoundingBox(x1, y1, x2, y2, format=BoxFormat.XYXY, unit=self.unit).to(self.format)


def _check_same_unit(a: BoundingBox, b: BoundingBox):
    if a.unit is not b.unit:
        raise UnitError(f"box units differ: {a.unit.value} vs {b.unit.value}")


def box_iou_giou(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise IoU and GIoU for boxes in XYXY layout, shape (..., 4).

    Differentiable; zero-denominator cases yield 0 (IoU) and are guarded by
    a small epsilon on the hull area.
    """
    ax1, ay1, ax2, ay2 = a.unbind(-1)
    bx1, by1, bx2, by2 = b.unbind(-1)
    area_a = (ax2 - ax1).clamp(min=0) * (ay2 - ay1).clamp(min=0)
    area_b = (bx2 - bx1).clamp(min=0) * (by2 - by1).clamp(min=0)

    ix1 = torch.max(ax1, bx1)
    iy1 = torch.max(ay1, by1)
    ix2 = torch.min(ax2, bx2)
    iy2 = torch.min(ay2, by2)
    inter = (ix2 - ix1).clamp(min=0) * (iy2 - iy1).clamp(min=0)
    union = area_a + area_b - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))

    hx1 = torch.min(ax1, bx1)
    hy1 = torch.min(ay1, by1)
    hx2 = torch.max(ax2, bx2)
    hy2 = torch.max(ay2, by2)
    hull = (hx2 - hx1).clamp(min=0) * (hy2 - hy1).clamp(min=0)
    giou = iou - (hull - union) / hull.clamp(min=1e-12)
    return iou, giou


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in [0, 1]. Both boxes must share a unit."""
    _check_same_unit(a, b)
    ta = torch.tensor(a.as_xyxy(), dtype=torch.float64)
    tb = torch.tensor(b.as_xyxy(), dtype=torch.float64)
    v, _ = box_iou_giou(ta, tb)
    return float(v)


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU in [-1, 1]; errors if the enclosing box is degenerate."""
    _check_same_unit(a, b)
    if a.area == 0.0 and b.area == 0.0:
        raise DegenerateInputError("giou undefined: both boxes have zero area")
    ta = torch.tensor(a.as_xyxy(), dtype=torch.float64)
    tb = torch.tensor(b.as_xyxy(), dtype=torch.float64)
    _, v = box_iou_giou(ta, tb)
    return float(v)


# Loss weights from the training recipe.
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
_SIZE_EPS = 1e-6


def localization_loss_terms(pred_cxcywh: torch.Tensor,
                            gt_cxcywh: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean-L1, 1 - GIoU) for normalized CXCYWH tensors of shape (..., 4).

    Widths/heights are clamped to a small epsilon before the GIoU so that
    collapsed predictions keep finite gradients.
    """
    l1 = (pred_cxcywh - gt_cxcywh).abs().mean(dim=-1)

    def _to_xyxy(box):
        cx, cy, w, h = box.unbind(-1)
        w = w.clamp(min=_SIZE_EPS)
        h = h.clamp(min=_SIZE_EPS)
        return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)

    _, g = box_iou_giou(_to_xyxy(pred_cxcywh), _to_xyxy(gt_cxcywh))
    return l1, 1.0 - g


def localization_loss(pred: BoundingBox, gt: BoundingBox,
                      l1_weight: float = L1_WEIGHT,
                      giou_weight: float = GIOU_WEIGHT) -> float:
    """Weighted L1 + GIoU localization loss on NORMALIZED boxes."""
    if pred.unit is not BoxUnit.NORMALIZED or gt.unit is not BoxUnit.NORMALIZED:
        raise UnitError("localization_loss requires NORMALIZED boxes; normalize explicitly")
    tp = torch.tensor(pred.as_cxcywh(), dtype=torch.float64)
    tg = torch.tensor(gt.as_cxcywh(), dtype=torch.float64)
    l1, gterm = localization_loss_terms(tp, tg)
    return float(l1_weight * l1 + giou_weight * gterm)


@dataclass(frozen=True)
class CropMapping:
    """Affine map between a square crop and its source frame.

    crop coords * scale + (source corner) = frame coords. ``frame_w/frame_h``
    are kept so boxes mapped back can be clipped to the frame.
    """

    source_center: tuple[float, float]
    scale: float            # source pixels per crop pixel
    crop_size: int
    frame_w: int = 0
    frame_h: int = 0

    @property
    def source_side(self) -> float:
        return self.scale * self.crop_size

    def crop_to_frame(self, x: float, y: float) -> tuple[float, float]:
        cx, cy = self.source_center
        return (cx + (x - self.crop_size / 2.0) * self.scale,
                cy + (y - self.crop_size / 2.0) * self.scale)

    def frame_to_crop(self, x: float, y: float) -> tuple[float, float]:
        cx, cy = self.source_center
        return ((x - cx) / self.scale + self.crop_size / 2.0,
                (y - cy) / self.scale + self.crop_size / 2.0)


def crop_region(frame: np.ndarray, anchor: BoundingBox, area_factor: float,
                out_size: int) -> tuple[np.ndarray, CropMapping]:
    """Square crop centered on the anchor box, resampled to ``out_size``.

    The crop side is ``area_factor * sqrt(w * h)`` of the anchor; pixels
    falling outside the frame are filled with the frame mean color.
    """
    if anchor.unit is not BoxUnit.PIXEL:
        raise UnitError("crop anchor must be in PIXEL units")
    if area_factor <= 0:
        raise InputError(f"area_factor must be positive, got {area_factor}")
    w, h = anchor.width, anchor.height
    if w <= 0 or h <= 0:
        raise DegenerateInputError("cannot crop around a zero-area anchor box")

    cx, cy = anchor.center
    side = area_factor * math.sqrt(w * h)
    scale = side / out_size
    fh, fw = frame.shape[:2]

    mean = frame.reshape(-1, frame.shape[2]).mean(axis=0) if frame.ndim == 3 else frame.mean()
    # Affine crop: frame -> crop, linear resampling, mean-fill borders.
    m = np.array([[1.0 / scale, 0.0, (side / 2.0 - cx) / scale],
                  [0.0, 1.0 / scale, (side / 2.0 - cy) / scale]], dtype=np.float64)
    border = tuple(float(v) for v in np.atleast_1d(mean))
    crop = cv2.warpAffine(frame, m, (out_size, out_size), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=border)
    mapping = CropMapping(source_center=(cx, cy), scale=scale, crop_size=out_size,
                          frame_w=fw, frame_h=fh)
    return crop, mapping


def map_box_to_frame(box: BoundingBox, m: CropMapping, clip: bool = True) -> BoundingBox:
    """Un-map a crop-coordinate PIXEL box back to frame coordinates."""
    if box.unit is not BoxUnit.PIXEL:
        raise UnitError("map_box_to_frame expects crop PIXEL coordinates")
    x1, y1, x2, y2 = box.as_xyxy()
    fx1, fy1 = m.crop_to_frame(x1, y1)
    fx2, fy2 = m.crop_to_frame(x2, y2)
    out = BoundingBox(fx1, fy1, fx2, fy2, format=BoxFormat.XYXY, unit=BoxUnit.PIXEL)
    if clip and m.frame_w > 0 and m.frame_h > 0:
        out = out.clipped(m.frame_w, m.frame_h)
    return out.to(box.format)


def map_box_to_crop(box: BoundingBox, m: CropMapping) -> BoundingBox:
    """Map a frame-coordinate PIXEL box into crop coordinates (no clipping)."""
    if box.unit is not BoxUnit.PIXEL:
        raise UnitError("map_box_to_crop expects frame PIXEL coordinates")
    x1, y1, x2, y2 = box.as_xyxy()
    cx1, cy1 = m.frame_to_crop(x1, y1)
    cx2, cy2 = m.frame_to_crop(x2, y2)
    return BoundingBox(cx1, cy1, cx2, cy2, format=BoxFormat.XYXY,
                       unit=BoxUnit.PIXEL).to(box.format)
