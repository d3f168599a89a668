"""Similarity density map: multi-scale zero-normalized cross-correlation of
exemplar patches against the query image, plus peak extraction.

Per exemplar and scale the valid-region ZNCC is mapped through (z+1)/2 and
re-centered to query size; scales fuse by max, exemplars by mean, and the
result is rescaled so the maximum lands at 1 - 2**-23, keeping every value
inside the half-open [0, 1) range downstream stages rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import irfft2, next_fast_len, rfft2
from scipy.ndimage import gaussian_filter

from .geometry import Box, DensityMap, Image, resize_image, to_gray

#: Top of the half-open [0, 1) range density maps live in.
ONE_MINUS_EPS = 1.0 - 2.0 ** -23

#: Per-pixel window variance below this is treated as flat (similarity 0).
_VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class Exemplar:
    """Support patch plus the box it was cut from and its category label."""

    patch: Image
    source_box: Box
    category: str | int


@dataclass(frozen=True)
class SdmConfig:
    scales: tuple[float, ...] = (0.8, 1.0, 1.25)
    smoothing_sigma: float = 1.0
    peak_rel_threshold: float = 0.2
    use_fft: bool = True

    def __post_init__(self):
        if not self.scales or any(s <= 0.0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if not 0.0 < self.peak_rel_threshold < 1.0:
            raise ValueError(f"peak_rel_threshold must be in (0, 1), got {self.peak_rel_threshold}")
        if self.smoothing_sigma < 0.0:
            raise ValueError("smoothing_sigma must be >= 0")


@dataclass(frozen=True)
class Peak:
    """Candidate object center, continuous pixel coordinates, score in [0, 1)."""

    x: float
    y: float
    score: float


class _QueryCache:
    """Per-query state shared across template scales: the forward FFT and the
    value / squared-value prefix tables.

    Circular convolution at (>= query)-sized fast lengths leaves the valid
    correlation region untouched by wraparound, so no (query + template - 1)
    padding is needed.
    """

    def __init__(self, gray: np.ndarray):
        self.shape = gray.shape
        self.fast = (next_fast_len(gray.shape[0]), next_fast_len(gray.shape[1]))
        self.spectrum = rfft2(gray, s=self.fast)
        h, w = gray.shape
        self.tables = []
        for src in (gray, gray * gray):
            t = np.zeros((h + 1, w + 1), dtype=np.float64)
            t[1:, 1:] = np.cumsum(np.cumsum(src, axis=0), axis=1)
            self.tables.append(t)

    def correlate_valid(self, t0: np.ndarray) -> np.ndarray:
        th, tw = t0.shape
        kernel = np.zeros(self.fast)
        kernel[:th, :tw] = t0[::-1, ::-1]
        full = irfft2(self.spectrum * rfft2(kernel), s=self.fast)
        return full[th - 1:self.shape[0], tw - 1:self.shape[1]]

    def window_sums(self, th: int, tw: int) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for t in self.tables:
            out.append(t[th:, tw:] - t[:-th, tw:] - t[th:, :-tw] + t[:-th, :-tw])
        return out[0], out[1]


def zncc_valid(gray_query: np.ndarray, gray_tmpl: np.ndarray, use_fft: bool = True,
               with_mask: bool = False, cache: _QueryCache | None = None):
    """Valid-region ZNCC map, indexed by window top-left, values in [-1, 1].

    Windows whose per-pixel variance falls under a fixed floor correlate as 0
    (and are reported False in the optional mask). A flat template raises
    ValueError. The FFT route convolves the zero-mean template in the
    frequency domain (a query cache may be supplied to share transforms
    across scales) and reads window statistics off prefix-sum tables; the
    naive route accumulates shifted slices directly.
    """
    q = np.asarray(gray_query, dtype=np.float64)
    t = np.asarray(gray_tmpl, dtype=np.float64)
    if t.ndim != 2 or q.ndim != 2:
        raise ValueError("correlation inputs must be 2-d grayscale arrays")
    th, tw = t.shape
    if th > q.shape[0] or tw > q.shape[1]:
        raise ValueError(f"template {t.shape} larger than query {q.shape}")
    n = th * tw
    t0 = t - t.mean()
    tss = float((t0 * t0).sum())
    if tss <= n * _VAR_FLOOR:
        raise ValueError("template has (near-)zero variance; correlation undefined")

    vh, vw = q.shape[0] - th + 1, q.shape[1] - tw + 1
    if use_fft:
        if cache is None:
            cache = _QueryCache(q)
        num = cache.correlate_valid(t0)
        s1, s2 = cache.window_sums(th, tw)
        var = s2 - s1 * s1 / n
    else:
        num = np.zeros((vh, vw))
        s1 = np.zeros((vh, vw))
        s2 = np.zeros((vh, vw))
        for dy in range(th):
            for dx in range(tw):
                sl = q[dy:dy + vh, dx:dx + vw]
                num += t0[dy, dx] * sl
                s1 += sl
                s2 += sl * sl
        var = s2 - s1 * s1 / n
    np.clip(var, 0.0, None, out=var)
    mask = var > n * _VAR_FLOOR
    out = np.zeros_like(num)
    np.divide(num, np.sqrt(var * tss), out=out, where=mask)
    np.clip(out, -1.0, 1.0, out=out)
    if with_mask:
        return out, mask
    return out


def _resize_gray(gray: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    if gray.shape == (out_h, out_w):
        return gray
    resized = resize_image(Image(np.clip(gray, 0.0, 1.0)), out_w, out_h)
    return resized.pixels[:, :, 0].astype(np.float64)


def compute_sdm_raw(query: Image, exemplars: list[Exemplar], cfg: SdmConfig) -> np.ndarray:
    """Fused similarity in [0, 1] before the final [0, 1) rescale.

    Flat query windows contribute 0 rather than the shifted (0+1)/2, so a
    constant query yields an all-zero map.
    """
    if not exemplars:
        raise ValueError("at least one exemplar is required")
    qg = to_gray(query)
    qh, qw = qg.shape
    cache = _QueryCache(qg) if cfg.use_fft else None
    acc = np.zeros((qh, qw))
    for ex in exemplars:
        tg = to_gray(ex.patch)
        fused = np.zeros((qh, qw))
        for scale in cfg.scales:
            tw = max(2, round(ex.patch.width * scale))
            th = max(2, round(ex.patch.height * scale))
            if th >= qh or tw >= qw:
                raise ValueError(
                    f"exemplar {ex.patch.width}x{ex.patch.height} at scale {scale} "
                    f"does not fit inside the {qw}x{qh} query")
            corr, mask = zncc_valid(qg, _resize_gray(tg, tw, th), cfg.use_fft,
                                    with_mask=True, cache=cache)
            sim = np.where(mask, (corr + 1.0) / 2.0, 0.0)
            full = np.zeros((qh, qw))
            full[th // 2:th // 2 + sim.shape[0], tw // 2:tw // 2 + sim.shape[1]] = sim
            np.maximum(fused, full, out=fused)
        acc += fused
    return acc / len(exemplars)


def compute_sdm(query: Image, exemplars: list[Exemplar], cfg: SdmConfig) -> DensityMap:
    """Similarity density map over the query, values in [0, 1)."""
    raw = compute_sdm_raw(query, exemplars, cfg)
    peak = float(raw.max())
    if peak > 0.0:
        raw = raw * (ONE_MINUS_EPS / peak)
    return DensityMap(raw.astype(np.float32))


def extract_peaks(dmap: DensityMap, cfg: SdmConfig) -> list[Peak]:
    """Strict 3x3 local maxima of the smoothed map, thresholded relative to
    its global maximum, sorted by descending score."""
    vals = dmap.values.astype(np.float64)
    if cfg.smoothing_sigma > 0.0:
        vals = gaussian_filter(vals, cfg.smoothing_sigma, mode="reflect")
    gmax = float(vals.max())
    if gmax <= 0.0:
        return []
    padded = np.pad(vals, 1, mode="constant", constant_values=-np.inf)
    neighbor_max = np.full_like(vals, -np.inf)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if dy == 1 and dx == 1:
                continue
            np.maximum(neighbor_max, padded[dy:dy + vals.shape[0], dx:dx + vals.shape[1]],
                       out=neighbor_max)
    ys, xs = np.nonzero((vals > neighbor_max) & (vals >= cfg.peak_rel_threshold * gmax))
    peaks = [Peak(float(x) + 0.5, float(y) + 0.5, float(vals[y, x])) for y, x in zip(ys, xs)]
    peaks.sort(key=lambda p: (-p.score, p.y, p.x))
    return peaks
