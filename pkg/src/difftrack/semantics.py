"""Template-semantics analysis: image/text similarity scores, per-video
classification, dataset aggregation, and template degradations.

The similarity backend is pluggable. The stub backend used in tests maps
any input to a deterministic unit vector derived from a content hash; it
has no semantics but makes every downstream number exactly reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import cv2
import numpy as np

from .datasets import Sequence
from .errors import ConfigError, DegenerateInputError, InputError, UndefinedMetricError
from .geometry import BoundingBox, crop_region

LOGIT_SCALE = 100.0
STRIDE = 20
OCCLUSION_FRACTION = 0.3
BLUR_SIGMA = 3.0
DARKEN_FACTOR = 0.4
JITTER_RANGE = 0.2


class EmbeddingBackend(Protocol):
    logit_scale: float

    def embed_image(self, img: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class StubEmbeddingBackend:
    """Hash-seeded unit vectors; deterministic across processes."""

    def __init__(self, dim: int = 32, logit_scale: float = LOGIT_SCALE):
        self.dim = dim
        self.logit_scale = logit_scale

    def _vector(self, payload: bytes) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(img)
        return self._vector(arr.tobytes() + str(arr.shape).encode())

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector(b"text:" + text.encode())


def clip_score(img_emb: np.ndarray, txt_emb: np.ndarray,
               logit_scale: float = LOGIT_SCALE) -> float:
    """logit_scale times the cosine similarity of the two embeddings."""
    img_emb = np.asarray(img_emb, dtype=float)
    txt_emb = np.asarray(txt_emb, dtype=float)
    ni, nt = np.linalg.norm(img_emb), np.linalg.norm(txt_emb)
    if ni == 0.0 or nt == 0.0:
        raise DegenerateInputError("similarity undefined for a zero embedding")
    return float(logit_scale * np.dot(img_emb, txt_emb) / (ni * nt))


def score_video(seq: Sequence, backend: EmbeddingBackend, stride: int = STRIDE,
                template_crop: bool = False) -> list[float]:
    """[S_0, S_stride, S_2*stride, ...] against the sequence caption.

    S_0 scores the template frame: the full first frame by default, or the
    annotated template region with ``template_crop``. The text embedding is
    computed once and shared.
    """
    if not seq.caption.strip():
        raise InputError(f"sequence {seq.name!r} has no caption to score against")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    txt = backend.embed_text(seq.caption)

    frame0 = seq.frame(0)
    if template_crop:
        if not seq.boxes:
            raise InputError("template_crop scoring needs a first-frame box")
        frame0, _ = crop_region(frame0, seq.boxes[0], 2.0, 128)
    scores = [clip_score(backend.embed_image(frame0), txt, backend.logit_scale)]
    i = stride
    while i < len(seq):
        scores.append(clip_score(backend.embed_image(seq.frame(i)), txt,
                                 backend.logit_scale))
        i += stride
    return scores


def classify(scores: list[float]) -> tuple[list[bool], bool]:
    """Frame and video labels relative to the template score S_0.

    A sampled frame is high-semantic iff its score strictly exceeds S_0;
    the video is high-semantic iff the mean of the sampled frame scores
    strictly exceeds S_0. Ties are low.
    """
    if len(scores) < 2:
        raise UndefinedMetricError("video label undefined with no sampled frames")
    s0 = scores[0]
    frame_labels = [s > s0 for s in scores[1:]]
    video_high = float(np.mean(scores[1:])) > s0
    return frame_labels, video_high


@dataclass(frozen=True)
class VideoReport:
    name: str
    scores: list[float]
    frame_labels: list[bool]
    video_high: bool

    @property
    def template_score(self) -> float:
        return self.scores[0]


def analyze_video(seq: Sequence, backend: EmbeddingBackend, stride: int = STRIDE,
                  template_crop: bool = False) -> VideoReport:
    scores = score_video(seq, backend, stride=stride, template_crop=template_crop)
    frame_labels, video_high = classify(scores)
    return VideoReport(seq.name, scores, frame_labels, video_high)


def aggregate(reports: list[VideoReport]) -> dict[str, float]:
    """Dataset-level counts, complementary ratios (4 decimals), and the
    average template semantics (mean S_0)."""
    if not reports:
        raise UndefinedMetricError("aggregate undefined on zero videos")
    n_frames = sum(len(r.frame_labels) for r in reports)
    hi_frames = sum(sum(r.frame_labels) for r in reports)
    hi_videos = sum(r.video_high for r in reports)
    n_videos = len(reports)

    hi_frame_ratio = round(hi_frames / n_frames, 4) if n_frames else 0.0
    hi_video_ratio = round(hi_videos / n_videos, 4)
    return {
        "n_videos": n_videos,
        "n_frames": n_frames,
        "high_frames": hi_frames,
        "low_frames": n_frames - hi_frames,
        "high_frame_ratio": hi_frame_ratio,
        "low_frame_ratio": round(1.0 - hi_frame_ratio, 4),
        "high_videos": hi_videos,
        "low_videos": n_videos - hi_videos,
        "high_video_ratio": hi_video_ratio,
        "low_video_ratio": round(1.0 - hi_video_ratio, 4),
        "avg_template_semantics": float(np.mean([r.template_score for r in reports])),
    }


class DegradeKind(Enum):
    BLUR = "blur"
    OCCLUSION = "occlusion"
    DARKEN = "darken"
    JITTER = "jitter"

    @classmethod
    def parse(cls, name: str) -> "DegradeKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown degradation {name!r}; expected one of: {valid}")


def occlusion_rect(region_w: int, region_h: int,
                   fraction: float = OCCLUSION_FRACTION) -> tuple[int, int]:
    """Integer rectangle (w, h) whose area approximates fraction of the
    region; the constructive rule is shared with the tests."""
    w = max(1, round(region_w * fraction ** 0.5))
    h = max(1, min(region_h, round(fraction * region_w * region_h / w)))
    return min(w, region_w), h


def degrade(img: np.ndarray, kind: DegradeKind | str, seed: int = 0,
            box: BoundingBox | None = None, sigma: float = BLUR_SIGMA,
            fraction: float = OCCLUSION_FRACTION, factor: float = DARKEN_FACTOR,
            jitter: float = JITTER_RANGE) -> np.ndarray:
    """Return a degraded copy of the image; the input is never modified.

    OCCLUSION draws a gray rectangle covering about ``fraction`` of the
    target box (the whole image when no box is given) at a seeded position
    inside it. JITTER shifts hue and scales saturation by seeded amounts
    within +-jitter.
    """
    if isinstance(kind, str):
        kind = DegradeKind.parse(kind)
    out = img.copy()

    if kind is DegradeKind.BLUR:
        if sigma == 0:
            return out
        return cv2.GaussianBlur(out, (0, 0), sigma)

    if kind is DegradeKind.OCCLUSION:
        if box is not None:
            x0, y0, bw, bh = (int(round(v)) for v in box.as_xywh())
        else:
            x0, y0, bh, bw = 0, 0, img.shape[0], img.shape[1]
        rw, rh = occlusion_rect(bw, bh, fraction)
        rng = np.random.default_rng(seed)
        rx = x0 + int(rng.integers(0, max(bw - rw, 0) + 1))
        ry = y0 + int(rng.integers(0, max(bh - rh, 0) + 1))
        out[ry:ry + rh, rx:rx + rw] = 128
        return out

    if kind is DegradeKind.DARKEN:
        return np.clip(out.astype(np.float64) * factor, 0, 255).astype(img.dtype)

    # JITTER
    rng = np.random.default_rng(seed)
    hsv = cv2.cvtColor(out, cv2.COLOR_RGB2HSV).astype(np.float64)
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-jitter, jitter) * 179.0) % 180.0
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + rng.uniform(-jitter, jitter)), 0, 255)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)


def degradation_study(sequences: list[Sequence], backend: EmbeddingBackend,
                      seed: int = 0) -> dict[str, float]:
    """Average template score per degradation kind (plus the raw baseline)."""
    if not sequences:
        raise UndefinedMetricError("degradation study needs at least one sequence")
    table: dict[str, list[float]] = {"raw": []}
    for kind in DegradeKind:
        table[kind.value] = []
    for seq in sequences:
        if not seq.caption.strip():
            raise InputError(f"sequence {seq.name!r} has no caption to score against")
        txt = backend.embed_text(seq.caption)
        frame0 = seq.frame(0)
        box = seq.boxes[0] if seq.boxes else None
        table["raw"].append(clip_score(backend.embed_image(frame0), txt,
                                       backend.logit_scale))
        for kind in DegradeKind:
            img = degrade(frame0, kind, seed=seed, box=box)
            table[kind.value].append(clip_score(backend.embed_image(img), txt,
                                                backend.logit_scale))
    return {k: float(np.mean(v)) for k, v in table.items()}
