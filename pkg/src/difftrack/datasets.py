"""Synthetic tracking sequences plus the on-disk sequence/result formats.

A sequence directory holds ``img/`` with zero-padded numeric frame images,
``groundtruth.txt`` with one ``x,y,w,h`` line per annotated frame, and an
optional one-line ``nlp.txt`` caption. Results files reuse the same box
line format with integer coordinates.

The generator renders a captioned target shape moving over a dark noisy
canvas among distractor shapes. Distractors never share both color and
shape with the target, so the caption always disambiguates. Everything is
driven by a single seed and fully reproducible.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, InputError, ParseError
from .geometry import BoundingBox, BoxFormat, BoxUnit

COLOR_RGB = {
    "red": (220, 40, 40), "green": (40, 200, 60), "blue": (50, 80, 230),
    "yellow": (230, 220, 50), "magenta": (220, 60, 220), "cyan": (60, 210, 210),
    "orange": (240, 150, 40), "white": (240, 240, 240),
}
SHAPE_NAMES = ("square", "circle", "triangle")
BG_LEVEL = 22


@dataclass
class Sequence:
    """In-memory or lazily loaded sequence record."""

    name: str
    boxes: list[BoundingBox]                  # ground truth, XYWH pixels
    caption: str = ""
    frames: list[np.ndarray] | None = None    # HWC uint8 RGB when in memory
    frame_paths: list[Path] | None = None     # lazy alternative
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        if self.frames is not None:
            return len(self.frames)
        return len(self.frame_paths or [])

    def frame(self, i: int) -> np.ndarray:
        if self.frames is not None:
            return self.frames[i]
        path = self.frame_paths[i]
        img = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if img is None:
            raise DataError(f"unreadable frame image {path}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def _draw_shape(img: np.ndarray, shape: str, cx: float, cy: float, half: float,
                color: tuple[int, int, int]) -> tuple[float, float, float, float]:
    """Render one filled shape; returns its tight xywh box."""
    if shape == "square":
        x1, y1 = int(round(cx - half)), int(round(cy - half))
        x2, y2 = int(round(cx + half)), int(round(cy + half))
        cv2.rectangle(img, (x1, y1), (x2, y2), color, thickness=-1)
        return (x1, y1, x2 - x1, y2 - y1)
    if shape == "circle":
        r = int(round(half))
        cv2.circle(img, (int(round(cx)), int(round(cy))), r, color, thickness=-1)
        return (round(cx) - r, round(cy) - r, 2 * r, 2 * r)
    # triangle: isoceles, apex up, inscribed in the half-size box
    pts = np.array([[cx, cy - half], [cx - half, cy + half], [cx + half, cy + half]])
    cv2.fillPoly(img, [np.round(pts).astype(np.int32)], color)
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    return (round(x1), round(y1), round(x2 - x1), round(y2 - y1))


def _caption_for(color: str, shape: str) -> str:
    # phrased entirely from the closed vocabulary so no caption word
    # degrades to the OOV token
    return f"the {color} {shape} moving on a dark background"


def generate_sequence(seed: int, canvas: int = 256, n_frames: int = 24,
                      n_distractors: int = 3, template_clarity: float = 1.0) -> Sequence:
    """Render one sequence. ``template_clarity`` in (0, 1] pulls the
    target's first-frame color toward the background, weakening the
    appearance-only cue on the template without touching later frames."""
    if n_frames < 1:
        raise InputError(f"n_frames must be >= 1, got {n_frames}")
    if not 0.0 < template_clarity <= 1.0:
        raise InputError(f"template_clarity must be in (0, 1], got {template_clarity}")
    rng = np.random.default_rng(seed)
    colors = list(COLOR_RGB)
    t_color = colors[rng.integers(len(colors))]
    t_shape = SHAPE_NAMES[rng.integers(len(SHAPE_NAMES))]

    def spawn(avoid: tuple[str, str]):
        while True:
            c = colors[rng.integers(len(colors))]
            s = SHAPE_NAMES[rng.integers(len(SHAPE_NAMES))]
            if (c, s) != avoid:
                return c, s

    actors = [{"color": t_color, "shape": t_shape}]
    for _ in range(n_distractors):
        c, s = spawn((t_color, t_shape))
        actors.append({"color": c, "shape": s})

    margin = canvas // 6
    for a in actors:
        a["half"] = float(rng.uniform(canvas * 0.05, canvas * 0.09))
        a["pos"] = rng.uniform(margin, canvas - margin, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(canvas * 0.01, canvas * 0.03)
        a["vel"] = np.array([math.cos(angle), math.sin(angle)]) * speed

    frames, boxes = [], []
    for f in range(n_frames):
        img = np.full((canvas, canvas, 3), BG_LEVEL, dtype=np.uint8)
        noise = np.random.default_rng(seed * 100003 + f).integers(0, 18, img.shape)
        img = (img.astype(np.int16) + noise).clip(0, 255).astype(np.uint8)

        target_box = None
        # distractors first so the target stays on top when overlapping
        for idx in range(len(actors) - 1, -1, -1):
            a = actors[idx]
            color = COLOR_RGB[a["color"]]
            if idx == 0 and f == 0 and template_clarity < 1.0:
                bg = np.full(3, BG_LEVEL, dtype=np.float64)
                color = tuple(int(round(v)) for v in
                              bg + (np.array(color) - bg) * template_clarity)
            xywh = _draw_shape(img, a["shape"], a["pos"][0], a["pos"][1], a["half"], color)
            if idx == 0:
                target_box = xywh

        frames.append(img)
        boxes.append(BoundingBox(*target_box, format=BoxFormat.XYWH_TOPLEFT,
                                 unit=BoxUnit.PIXEL))

        for a in actors:  # advance with wall bounces
            a["pos"] = a["pos"] + a["vel"]
            for d in range(2):
                lo, hi = a["half"], canvas - a["half"]
                if a["pos"][d] < lo:
                    a["pos"][d] = 2 * lo - a["pos"][d]
                    a["vel"][d] *= -1
                elif a["pos"][d] > hi:
                    a["pos"][d] = 2 * hi - a["pos"][d]
                    a["vel"][d] *= -1

    return Sequence(name=f"synthetic-{seed:04d}", frames=frames, boxes=boxes,
                    caption=_caption_for(t_color, t_shape),
                    meta={"color": t_color, "shape": t_shape, "seed": seed})


# ---------------------------------------------------------------------------
# Disk formats.


def _format_box_line(box: BoundingBox) -> str:
    x, y, w, h = box.to(BoxFormat.XYWH_TOPLEFT).as_xywh()
    return f"{round(x)},{round(y)},{round(w)},{round(h)}"


def _parse_box_line(line: str, path: str, lineno: int) -> BoundingBox:
    parts = line.replace("\t", ",").split(",")
    if len(parts) != 4:
        raise ParseError(f"expected 4 comma-separated values, got {len(parts)}",
                         path=path, line=lineno)
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise ParseError(f"non-numeric box entry in {line!r}", path=path, line=lineno)
    return BoundingBox(x, y, w, h, format=BoxFormat.XYWH_TOPLEFT, unit=BoxUnit.PIXEL)


def write_results(path: str | Path, boxes: list[BoundingBox]):
    """Integer `x,y,w,h` lines. Values are written as-is (no clipping here;
    keeping predictions in-frame is the tracker's contract, not I/O's)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text("".join(_format_box_line(b) + "\n" for b in boxes))
    except OSError as e:
        raise DataError(f"cannot write results {path}: {e}")


def read_results(path: str | Path) -> list[BoundingBox]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read results {path}: {e}")
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if line:
            boxes.append(_parse_box_line(line, str(path), lineno))
    return boxes


def _numeric_key(path: Path):
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.stem)


def write_sequence(seq: Sequence, out_dir: str | Path):
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        ok = cv2.imwrite(str(out / "img" / f"{i:08d}.png"),
                         cv2.cvtColor(seq.frame(i), cv2.COLOR_RGB2BGR))
        if not ok:
            raise DataError(f"failed to write frame {i} under {out}")
    write_results(out / "groundtruth.txt", seq.boxes)
    (out / "nlp.txt").write_text(seq.caption + "\n")


def load_sequence(seq_dir: str | Path) -> Sequence:
    """Read a sequence directory; frames stay on disk and load on demand.

    Missing nlp.txt degrades to an empty caption; a missing groundtruth
    file or empty frame folder is an error.
    """
    d = Path(seq_dir)
    if not d.is_dir():
        raise DataError(f"sequence directory {d} does not exist")
    img_dir = d / "img" if (d / "img").is_dir() else d
    paths = sorted((p for p in img_dir.iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")),
                   key=_numeric_key)
    if not paths:
        raise DataError(f"no image frames found under {d}")

    gt_path = d / "groundtruth.txt"
    if not gt_path.exists():
        raise DataError(f"missing groundtruth.txt under {d}")
    boxes = read_results(gt_path)
    if not boxes:
        raise DataError(f"groundtruth.txt under {d} has no boxes")
    if boxes[0].width <= 0 or boxes[0].height <= 0:
        raise DataError(f"first ground-truth box in {d} has non-positive size")

    caption = ""
    cap_path = d / "nlp.txt"
    if cap_path.exists():
        caption = cap_path.read_text().strip()
    return Sequence(name=d.name, boxes=boxes, caption=caption, frame_paths=paths)


def list_sequences(root: str | Path) -> list[Path]:
    """Child directories that look like sequences, name-sorted."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    dirs = sorted(p for p in root.iterdir()
                  if p.is_dir() and (p / "groundtruth.txt").exists())
    if not dirs:
        raise DataError(f"no sequence directories (with groundtruth.txt) under {root}")
    return dirs
