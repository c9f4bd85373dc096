"""Short-term tracking protocol around a trained model.

init() fixes the template, encodes the caption and runs the generative
branch exactly once; every update() crops the search region around the
previous prediction, scores it, and maps the decoded box back to frame
coordinates. The expensive language/generative work never re-runs after
the first frame.
"""

from __future__ import annotations

import time

import numpy as np
import torch

from .encoders import image_to_tensor
from .errors import InputError
from .geometry import (BoundingBox, BoxFormat, BoxUnit, crop_region, iou,
                       map_box_to_frame)
from .head import decode_box, hanning_window
from .model import TrackerModel

MIN_BOX_SIDE = 2.0  # px; below this the previous box size is kept (drift guard)


class Tracker:
    def __init__(self, model: TrackerModel, hann_weight: float | None = None):
        self.model = model
        self.model.eval()
        self.hann_weight = model.cfg["head.hann_weight"] if hann_weight is None else hann_weight
        self.window = hanning_window(model.grid)
        self._template: torch.Tensor | None = None
        self._text = None
        self._text_mask = None
        self._taps = None
        self._last_box: BoundingBox | None = None

    @torch.no_grad()
    def init(self, frame: np.ndarray, box: BoundingBox, caption: str = ""):
        """Set the target from the first frame. Runs the caption encoder and
        the generative branch once; their outputs are cached for the whole
        sequence."""
        if box.unit is not BoxUnit.PIXEL:
            raise InputError("initial box must be in PIXEL units")
        if box.width <= 0 or box.height <= 0:
            raise InputError("initial box must have positive size")
        fh, fw = frame.shape[:2]
        frame_box = BoundingBox(0, 0, fw, fh)
        if iou(box, frame_box) == 0.0:
            raise InputError(f"initial box {box.as_xywh()} lies outside the "
                             f"{fw}x{fh} frame")
        cfg = self.model.cfg
        crop, _ = crop_region(frame, box, cfg["image.template_factor"],
                              cfg["image.template_size"])
        self._template = image_to_tensor(crop).unsqueeze(0)
        self._text, self._text_mask = self.model.encode_text([caption])
        self._taps = self.model.compute_taps(self._template, self._text, self._text_mask)
        self._last_box = box

    @torch.no_grad()
    def update(self, frame: np.ndarray) -> tuple[BoundingBox, float]:
        """Track into the next frame; returns the frame-space box and score."""
        if self._last_box is None:
            raise InputError("tracker not initialized; call init() first")
        cfg = self.model.cfg
        crop, mapping = crop_region(frame, self._last_box, cfg["image.search_factor"],
                                    cfg["image.search_size"])
        search = image_to_tensor(crop).unsqueeze(0)
        maps = self.model(self._template, search, self._text, self._text_mask,
                          taps=self._taps)
        norm_box, score = decode_box(maps, window=self.window, hann_weight=self.hann_weight)

        crop_box = norm_box.to_pixels(mapping.crop_size, mapping.crop_size)
        frame_box = map_box_to_frame(crop_box, mapping).to(BoxFormat.XYWH_TOPLEFT)
        if frame_box.width < MIN_BOX_SIDE or frame_box.height < MIN_BOX_SIDE:
            cx, cy = frame_box.center
            held = BoundingBox(cx, cy, self._last_box.width, self._last_box.height,
                               format=BoxFormat.CXCYWH, unit=BoxUnit.PIXEL)
            fh, fw = frame.shape[:2]
            frame_box = held.clipped(fw, fh).to(BoxFormat.XYWH_TOPLEFT)
        self._last_box = frame_box
        return frame_box, score


def run_sequence(model: TrackerModel, seq, hann_weight: float | None = None,
                 ) -> tuple[list[BoundingBox], float]:
    """One-pass protocol over a sequence record: init on frame 0 with its
    ground-truth box, track every later frame.

    Returns (boxes, fps) where fps is wall-clock over the track calls only
    (0.0 for a single-frame sequence, where no tracking happens).
    """
    n = len(seq)
    if n < 1:
        raise InputError("empty sequence")
    if not seq.boxes:
        raise InputError(f"sequence {seq.name!r} has no ground-truth box for init")
    tracker = Tracker(model, hann_weight=hann_weight)
    tracker.init(seq.frame(0), seq.boxes[0], seq.caption)
    out = [seq.boxes[0].to(BoxFormat.XYWH_TOPLEFT)]

    elapsed = 0.0
    for i in range(1, n):
        frame = seq.frame(i)
        t0 = time.perf_counter()
        box, _ = tracker.update(frame)
        elapsed += time.perf_counter() - t0
        out.append(box)
    fps = (n - 1) / elapsed if n > 1 and elapsed > 0 else 0.0
    return out, fps
