"""End-to-end detection: similarity map -> peaks -> proposals -> purification
-> alignment -> NMS, with per-stage toggles and wall-clock timings."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ran as ran_mod
from .geometry import Box, Detection, Image, box_pixel_count, nms
from .mlp import MlpHead
from .proposals import ProposalConfig, PurifyConfig, anchor_proposals, purify_scores
from .ran import RanConfig, RanTarget, decode
from .sdm import Exemplar, SdmConfig, compute_sdm, extract_peaks


@dataclass(frozen=True)
class SupportSet:
    """1..K exemplars of one category."""

    category: str | int
    exemplars: tuple[Exemplar, ...]

    def __post_init__(self):
        if not self.exemplars:
            raise ValueError("a support set needs at least one exemplar")
        if any(e.category != self.category for e in self.exemplars):
            raise ValueError("support set categories are inconsistent")


@dataclass(frozen=True)
class PipelineConfig:
    sdm: SdmConfig = field(default_factory=SdmConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    purify: PurifyConfig = field(default_factory=PurifyConfig)
    ran: RanConfig = field(default_factory=RanConfig)
    nms_iou: float = 0.5
    purify_on: bool = True
    ran_on: bool = True

    def __post_init__(self):
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")


@dataclass
class StageTimings:
    """Wall-clock seconds per stage."""

    sdm: float = 0.0
    peaks: float = 0.0
    proposals: float = 0.0
    purify: float = 0.0
    align: float = 0.0
    nms: float = 0.0
    total: float = 0.0

    def as_millis(self) -> dict[str, float]:
        return {name: round(getattr(self, name) * 1000.0, 3)
                for name in ("sdm", "peaks", "proposals", "purify", "align", "nms", "total")}


def _anchor_base(support: SupportSet) -> Box:
    # Anchor sizes come from the mean exemplar box; centers come from peaks.
    ws = [e.source_box.w for e in support.exemplars]
    hs = [e.source_box.h for e in support.exemplars]
    return Box(0.0, 0.0, float(np.mean(ws)), float(np.mean(hs)))


def detect(query: Image, support: SupportSet, head: MlpHead | None, cfg: PipelineConfig,
           proposals: list[Box] | None = None,
           collect: dict | None = None) -> tuple[list[Detection], StageTimings]:
    """Detect the support category in one query image.

    `proposals` replaces the peak-anchored anchor stage with externally
    supplied boxes. With ran_on disabled, purified candidates pass through
    undecoded, scored by their purification ratio; `head` may then be None.
    `collect`, when given, receives intermediates ("sdm", "peaks",
    "candidates") for rendering and dumps.
    """
    if cfg.ran_on and head is None:
        raise ValueError("a trained head is required unless ran_on is false")
    timings = StageTimings()
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    dmap = compute_sdm(query, list(support.exemplars), cfg.sdm)
    timings.sdm = time.perf_counter() - t0

    t0 = time.perf_counter()
    peaks = extract_peaks(dmap, cfg.sdm)
    timings.peaks = time.perf_counter() - t0

    t0 = time.perf_counter()
    if proposals is None:
        boxes = anchor_proposals(peaks, _anchor_base(support), query.width, query.height,
                                 cfg.proposals)
    else:
        boxes = list(proposals)
    timings.proposals = time.perf_counter() - t0

    t0 = time.perf_counter()
    ratios = purify_scores(dmap, boxes)
    counts = [box_pixel_count(b, dmap.width, dmap.height) for b in boxes]
    if cfg.purify_on:
        keep_idx = [i for i, (r, c) in enumerate(zip(ratios, counts))
                    if c > 0 and r >= cfg.purify.h]
    else:
        keep_idx = list(range(len(boxes)))
    candidates = [boxes[i] for i in keep_idx]
    timings.purify = time.perf_counter() - t0

    if collect is not None:
        collect["sdm"] = dmap
        collect["peaks"] = peaks
        collect["candidates"] = candidates

    t0 = time.perf_counter()
    if cfg.ran_on and candidates:
        preds = ran_mod.predict_pairs(candidates, query, list(support.exemplars), head, cfg.ran)
        scores = preds[:, :, 0].mean(axis=0)
        best = preds[:, :, 0].argmax(axis=0)
        dets = []
        for i, box in enumerate(candidates):
            if scores[i] < cfg.ran.classify_threshold:
                continue
            target = RanTarget.from_array(preds[best[i], i])
            dets.append(Detection(decode(box, target, cfg.ran), support.category,
                                  float(scores[i])))
    elif cfg.ran_on:
        dets = []
    else:
        dets = [Detection(boxes[i], support.category, float(ratios[i])) for i in keep_idx]
    timings.align = time.perf_counter() - t0

    t0 = time.perf_counter()
    dets = nms(dets, cfg.nms_iou)
    timings.nms = time.perf_counter() - t0
    timings.total = time.perf_counter() - t_start
    return dets, timings


def detect_batch(queries: list[Image], support: SupportSet, head: MlpHead | None,
                 cfg: PipelineConfig, proposals: list[list[Box]] | None = None,
                 threads: int = 1) -> list[tuple[list[Detection], StageTimings]]:
    """detect() applied independently per image; output order follows input order."""
    if proposals is not None and len(proposals) != len(queries):
        raise ValueError("per-image proposals must match the query count")

    def run(i: int):
        per_image = None if proposals is None else proposals[i]
        return detect(queries[i], support, head, cfg, proposals=per_image)

    if threads <= 1 or len(queries) <= 1:
        return [run(i) for i in range(len(queries))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, range(len(queries))))
