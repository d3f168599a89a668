"""Class-agnostic candidate boxes: peak-anchored anchor grids (a stand-in for
a learned proposal network), external proposal files, and purification of
candidates against the similarity density map."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box, DensityMap, box_pixel_count, box_sum, integral_build
from .sdm import Peak


@dataclass(frozen=True)
class ProposalConfig:
    anchor_scales: tuple[float, ...] = (0.5, 0.71, 1.0, 1.41, 2.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    max_proposals: int = 300

    def __post_init__(self):
        if any(s <= 0.0 for s in self.anchor_scales) or any(a <= 0.0 for a in self.aspect_ratios):
            raise ValueError("anchor scales and aspect ratios must be positive")
        if self.max_proposals < 1:
            raise ValueError("max_proposals must be >= 1")


@dataclass(frozen=True)
class PurifyConfig:
    """Keep a candidate only when its mean map intensity reaches h.

    h = 0 disables the intensity test; boxes without member pixels are
    dropped regardless.
    """

    h: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.h < 1.0:
            raise ValueError(f"h must be in [0, 1), got {self.h}")


class ProposalParseError(ValueError):
    """A proposal file line failed to parse; message carries the line number."""


def anchor_proposals(peaks: list[Peak], support_box: Box, width: int, height: int,
                     cfg: ProposalConfig) -> list[Box]:
    """One box per (scale, aspect) centered at each peak, sized off the support box.

    Boxes are clipped to image bounds. Peaks are visited in descending score
    order and the output is truncated to max_proposals.
    """
    ordered = sorted(peaks, key=lambda p: -p.score)
    boxes: list[Box] = []
    for peak in ordered:
        for scale in cfg.anchor_scales:
            for aspect in cfg.aspect_ratios:
                w = scale * math.sqrt(aspect) * support_box.w
                h = scale / math.sqrt(aspect) * support_box.h
                clipped = Box(peak.x, peak.y, w, h).clip(width, height)
                if clipped is None:
                    continue
                boxes.append(clipped)
                if len(boxes) >= cfg.max_proposals:
                    return boxes
    return boxes


def save_proposals(path: str | Path, boxes: list[Box]) -> None:
    """One "cx cy w h" line per box; floats written with full round-trip precision."""
    lines = [f"{b.cx!r} {b.cy!r} {b.w!r} {b.h!r}\n" for b in boxes]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_external_proposals(path: str | Path) -> list[Box]:
    """Parse a proposal file: UTF-8 text, "cx cy w h" per line, '#' comments."""
    boxes: list[Box] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 4:
            raise ProposalParseError(f"{path}:{lineno}: expected 4 numbers, got {len(parts)}")
        try:
            cx, cy, w, h = (float(p) for p in parts)
            boxes.append(Box(cx, cy, w, h))
        except ValueError as exc:
            raise ProposalParseError(f"{path}:{lineno}: {exc}") from exc
    return boxes


def purify_scores(dmap: DensityMap, boxes: list[Box]) -> np.ndarray:
    """Mean map intensity over each box's member pixels; 0 when a box has none."""
    ii = integral_build(dmap)
    scores = np.zeros(len(boxes))
    for i, b in enumerate(boxes):
        count = box_pixel_count(b, dmap.width, dmap.height)
        if count > 0:
            scores[i] = box_sum(ii, b) / count
    return scores


def purify(dmap: DensityMap, boxes: list[Box], cfg: PurifyConfig) -> list[Box]:
    """Keep boxes whose intensity-mass ratio reaches the threshold, preserving order.

    Boxes with zero member pixels are always dropped.
    """
    ii = integral_build(dmap)
    kept = []
    for b in boxes:
        count = box_pixel_count(b, dmap.width, dmap.height)
        if count > 0 and box_sum(ii, b) / count >= cfg.h:
            kept.append(b)
    return kept
