"""Deterministic synthetic data: scenes of planted procedural textures with
exact ground truth, jittered training pairs for the alignment head, and
Gaussian dot-annotation density maps.

Every instance of a category renders the same pixel pattern at the same
size, so planted patches correlate with themselves at ZNCC 1 across scenes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry import Box, DensityMap, GtObject, Image, crop_resize, iou
from .ran import PairSample, RanConfig, RanTarget, encode_pair
from .sdm import ONE_MINUS_EPS

#: Root seed of per-category texture parameters.
_TEXTURE_SEED = 7741

#: Geometry target stored on negatives (loss-masked; identity alignment).
NEGATIVE_GEOMETRY = (0.5, 0.5, 1.0 / 3.0, 1.0 / 3.0)

_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SynthConfig:
    width: int = 128
    height: int = 128
    n_categories: int = 5
    instances_per_scene: int = 3
    noise_amplitude: float = 0.05
    obj_min_size: int = 24
    obj_max_size: int = 48
    first_category: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.obj_min_size < 8 or self.obj_max_size < self.obj_min_size:
            raise ValueError("object size range must satisfy 8 <= min <= max")
        if self.obj_max_size >= min(self.width, self.height):
            raise ValueError("objects must fit inside the image")
        if self.n_categories < 1 or self.instances_per_scene < 0:
            raise ValueError("need >= 1 category and >= 0 instances")
        if not 0.0 <= self.noise_amplitude < 0.5:
            raise ValueError("noise amplitude must be in [0, 0.5)")


@dataclass(frozen=True)
class JitterConfig:
    """Jitter for positive pairs plus the negative-sampling rules.

    Translation offsets are uniform in +-translation_frac of the jittered
    candidate's size per axis, which keeps every positive encodable whenever
    translation_frac <= 0.5 and scale_margin > 0.
    """

    translation_frac: float = 0.25
    scale_margin: float = 0.05
    negative_fraction: float = 0.4
    negative_iou_ceiling: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.translation_frac <= 0.5:
            raise ValueError("translation_frac must be in [0, 0.5]")
        if not 0.0 < self.scale_margin < 1.0:
            raise ValueError("scale_margin must be in (0, 1)")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ValueError("negative_fraction must be in [0, 1]")
        if not 0.0 < self.negative_iou_ceiling < 1.0:
            raise ValueError("negative_iou_ceiling must be in (0, 1)")


def category_size(category: int, min_size: int, max_size: int) -> tuple[int, int]:
    """Fixed (w, h) of a category's instances within the configured range."""
    rng = np.random.default_rng([_TEXTURE_SEED, 17, category])
    w = int(rng.integers(min_size, max_size + 1))
    h = int(rng.integers(min_size, max_size + 1))
    return w, h


_GOLDEN = 0.6180339887498949


def texture_tile(category: int, w: int, h: int) -> np.ndarray:
    """Deterministic (h, w) float32 pattern in [0.05, 0.95], anchored at the tile origin.

    Category id picks one of three families (stripes, checks, smoothed noise
    blobs); orientation, frequency, and gray-level parameters step through
    disjoint per-category ladders so categories stay visually distinct.
    """
    rng = np.random.default_rng([_TEXTURE_SEED, category])
    family = category % 3
    k = category // 3
    base = 0.30 + 0.08 * ((2 * k + family) % 6)
    amp = 0.25 + 0.05 * ((k + family) % 3)
    amp = min(amp, 0.93 - base, base - 0.07)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if family == 0:
        # Golden-ratio angles never repeat; the (theta, period) pair is unique per k.
        theta = math.pi * ((k * _GOLDEN) % 1.0)
        period = 5.0 + 1.4 * (k % 6)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = np.sin(2.0 * math.pi * (xs * math.cos(theta) + ys * math.sin(theta)) / period + phase)
        tile = base + amp * wave
    elif family == 1:
        px = 4.5 + 1.2 * (k % 6)
        py = 4.5 + 1.2 * ((k // 6 + 2 * k) % 6)
        tile = base + amp * np.sign(np.sin(2.0 * math.pi * xs / px) * np.sin(2.0 * math.pi * ys / py))
    else:
        noise = rng.uniform(-1.0, 1.0, size=(h, w))
        noise = uniform_filter(noise, size=2 + (k % 3), mode="reflect")
        span = max(abs(noise.min()), abs(noise.max()), 1e-9)
        tile = base + amp * 1.3 * noise / span
    return np.clip(tile, 0.05, 0.95).astype(np.float32)


def gen_scene(cfg: SynthConfig, seed: int) -> tuple[Image, list[GtObject]]:
    """One scene: noisy background plus non-overlapping planted instances
    (pairwise IoU < 0.1) with exact ground-truth boxes."""
    rng = np.random.default_rng(seed)
    bg = 0.5 + cfg.noise_amplitude * rng.uniform(-1.0, 1.0, size=(cfg.height, cfg.width))
    canvas = np.clip(bg, 0.0, 1.0).astype(np.float32)
    objects: list[GtObject] = []
    for _ in range(cfg.instances_per_scene):
        category = int(rng.integers(cfg.first_category, cfg.first_category + cfg.n_categories))
        w, h = category_size(category, cfg.obj_min_size, cfg.obj_max_size)
        placed = False
        for _ in range(_PLACEMENT_TRIES):
            x0 = int(rng.integers(0, cfg.width - w + 1))
            y0 = int(rng.integers(0, cfg.height - h + 1))
            box = Box(x0 + w / 2.0, y0 + h / 2.0, float(w), float(h))
            if all(iou(box, o.box) < 0.1 for o in objects):
                canvas[y0:y0 + h, x0:x0 + w] = texture_tile(category, w, h)
                objects.append(GtObject(box, category))
                placed = True
                break
        if not placed:
            raise RuntimeError(f"could not place instance after {_PLACEMENT_TRIES} tries")
    return Image(canvas), objects


def gen_dataset(cfg: SynthConfig, n_scenes: int) -> list[tuple[Image, list[GtObject]]]:
    """Scenes with per-scene seeds derived as cfg.seed ^ index."""
    return [gen_scene(cfg, cfg.seed ^ i) for i in range(n_scenes)]


def _crop_native(img: Image, box: Box) -> Image:
    w = max(1, round(box.w))
    h = max(1, round(box.h))
    return crop_resize(img, box, w, h)


def _sample_negative_box(rng, gt: GtObject, objects: list[GtObject], jitter: JitterConfig,
                         width: int, height: int) -> Box | None:
    # Background crop: gt-sized box (scale-jittered) overlapping no object
    # above the ceiling.
    lo = math.log(0.6)
    hi = math.log(1.6)
    for _ in range(_PLACEMENT_TRIES):
        w = gt.box.w * math.exp(rng.uniform(lo, hi))
        h = gt.box.h * math.exp(rng.uniform(lo, hi))
        w = min(w, width - 1.0)
        h = min(h, height - 1.0)
        cx = rng.uniform(w / 2.0, width - w / 2.0)
        cy = rng.uniform(h / 2.0, height - h / 2.0)
        box = Box(cx, cy, w, h)
        if all(iou(box, o.box) < jitter.negative_iou_ceiling for o in objects):
            return box
    return None


def gen_ran_pairs(scenes: list[tuple[Image, list[GtObject]]], jitter: JitterConfig,
                  ran_cfg: RanConfig, pairs_per_instance: int = 1) -> list[PairSample]:
    """Training pairs from annotated scenes.

    Positives pair a ground-truth patch with a jittered crop and carry the
    exact encoded target; negatives pair it with a background crop or an
    other-category instance (IoU below the ceiling) and carry c = 0 with
    neutral loss-masked geometry. The negative count is an exact quota:
    round(negative_fraction * total).
    """
    rng = np.random.default_rng(jitter.seed)
    slots = [(si, oi) for si, (_, objects) in enumerate(scenes)
             for oi in range(len(objects)) for _ in range(pairs_per_instance)]
    n = len(slots)
    n_neg = round(jitter.negative_fraction * n)
    is_negative = np.zeros(n, dtype=bool)
    is_negative[:n_neg] = True
    rng.shuffle(is_negative)

    log_lo = -(1.0 - jitter.scale_margin) * math.log(ran_cfg.lambda_w)
    log_hi = +(1.0 - jitter.scale_margin) * math.log(ran_cfg.lambda_w)
    log_lo_h = -(1.0 - jitter.scale_margin) * math.log(ran_cfg.lambda_h)
    log_hi_h = +(1.0 - jitter.scale_margin) * math.log(ran_cfg.lambda_h)

    pairs: list[PairSample] = []
    for (si, oi), negative in zip(slots, is_negative):
        img, objects = scenes[si]
        gt = objects[oi]
        gt_patch = _crop_native(img, gt.box)
        if not negative:
            w = gt.box.w * math.exp(rng.uniform(log_lo, log_hi))
            h = gt.box.h * math.exp(rng.uniform(log_lo_h, log_hi_h))
            dx = rng.uniform(-jitter.translation_frac, jitter.translation_frac) * w
            dy = rng.uniform(-jitter.translation_frac, jitter.translation_frac) * h
            cand = Box(gt.box.cx + dx, gt.box.cy + dy, w, h)
            target = encode_pair(gt.box, cand, ran_cfg)
            cand_category: str | int | None = gt.category
        else:
            other = [o for o in objects if o.category != gt.category]
            use_other = bool(other) and rng.uniform() < 0.5
            if use_other:
                pick = other[int(rng.integers(len(other)))]
                cand, cand_category = pick.box, pick.category
            else:
                sampled = _sample_negative_box(rng, gt, objects, jitter, img.width, img.height)
                if sampled is None:
                    raise RuntimeError("could not sample a background crop under the IoU ceiling")
                cand, cand_category = sampled, None
            target = RanTarget(0.0, *NEGATIVE_GEOMETRY)
        pairs.append(PairSample(gt.box, cand, gt_patch, _crop_native(img, cand),
                                target, gt.category, cand_category))
    return pairs


def dot_density(centers: list[tuple[float, float]], sigma: float,
                width: int, height: int) -> np.ndarray:
    """Sum of unit-integral Gaussians sampled at pixel centers (no rescale)."""
    out = np.zeros((height, width))
    if not centers:
        return out
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    norm = 1.0 / (2.0 * math.pi * sigma * sigma)
    for cx, cy in centers:
        gx = np.exp(-((xs - cx) ** 2) / (2.0 * sigma * sigma))
        gy = np.exp(-((ys - cy) ** 2) / (2.0 * sigma * sigma))
        out += norm * gy[:, None] * gx[None, :]
    return out


def gen_density_gt(objects: list[GtObject], sigma: float, width: int, height: int) -> DensityMap:
    """Dot-annotation density map from ground-truth centers, rescaled into [0, 1)."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    raw = dot_density([(o.box.cx, o.box.cy) for o in objects], sigma, width, height)
    peak = float(raw.max())
    if peak > 0.0:
        raw = raw * (ONE_MINUS_EPS / peak)
    return DensityMap(raw.astype(np.float32))
