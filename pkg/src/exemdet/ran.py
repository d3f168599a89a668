"""Region alignment: encode/decode the 5-channel alignment target, embed patch
pairs through a deterministic descriptor, and classify + refine candidate
boxes with the trained head.

Target layout (c, dx, dy, sw, sh), every field stored in [0, 1]:

* c       -- category agreement flag (1 same, 0 different).
* dx, dy  -- half the normalized center offset. Both centers are expressed in
             the candidate patch's frame (x' = (x - cand_left) * W / cand.w,
             so the candidate's own center maps to W/2); the raw offset
             1 + 2*(x'_cand - x'_gt)/W spans [0, 2] and is halved for storage.
* sw, sh  -- bounded scale ratios: sw = (lambda_w * r - 1) / (lambda_w**2 - 1)
             with r = cand.w / gt.w constrained to (1/lambda_w, lambda_w);
             sh likewise with heights.

decode() is the exact inverse of encode_pair() on the geometry channels.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import mlp
from .geometry import Box, Detection, Image, crop_gray_batch, to_gray
from .mlp import MlpHead, TrainConfig
from .sdm import Exemplar

#: Cells per side of the descriptor grid.
DESCRIPTOR_GRID = 8

#: Gradient-orientation bins per cell.
DESCRIPTOR_BINS = 8

#: Fixed seed of the raw-feature random projection (part of the descriptor contract).
_PROJECTION_SEED = 901


class EncodingRangeError(ValueError):
    """Box pair falls outside the encodable offset or scale range."""


@dataclass(frozen=True)
class RanConfig:
    lambda_w: float = 2.0
    lambda_h: float = 2.0
    patch_w: int = 256
    patch_h: int = 256
    embed_len: int = 128
    classify_threshold: float = 0.5

    def __post_init__(self):
        if self.lambda_w <= 1.0 or self.lambda_h <= 1.0:
            raise ValueError("scale bounds must exceed 1")
        if self.patch_w <= 0 or self.patch_h <= 0:
            raise ValueError("patch size must be positive")
        if self.patch_w % DESCRIPTOR_GRID or self.patch_h % DESCRIPTOR_GRID:
            raise ValueError(f"patch size must be a multiple of {DESCRIPTOR_GRID}")
        if self.embed_len < 4 or self.embed_len % 4:
            raise ValueError("embedding length must be a positive multiple of 4")
        if not 0.0 <= self.classify_threshold <= 1.0:
            raise ValueError("classify threshold must be in [0, 1]")


@dataclass(frozen=True)
class RanTarget:
    """Alignment target/prediction; all five channels in [0, 1]."""

    c: float
    dx: float
    dy: float
    sw: float
    sh: float

    def to_array(self) -> np.ndarray:
        return np.array([self.c, self.dx, self.dy, self.sw, self.sh])

    @classmethod
    def from_array(cls, a) -> "RanTarget":
        c, dx, dy, sw, sh = (float(v) for v in a)
        return cls(c, dx, dy, sw, sh)


@dataclass(frozen=True)
class PairSample:
    """One training/evaluation unit: a ground-truth patch, a candidate patch,
    and the geometric truth relating their boxes."""

    gt_box: Box
    cand_box: Box
    gt_patch: Image
    cand_patch: Image
    target: RanTarget
    gt_category: str | int
    cand_category: str | int | None


def encode_pair(gt: Box, cand: Box, cfg: RanConfig, same_category: bool = True) -> RanTarget:
    """Alignment target moving the candidate box onto the ground-truth box.

    Raises EncodingRangeError when the size ratio leaves (1/lambda, lambda)
    or the center offset exceeds half the candidate size on either axis.
    """
    rw = cand.w / gt.w
    rh = cand.h / gt.h
    if not (1.0 / cfg.lambda_w < rw < cfg.lambda_w) or not (1.0 / cfg.lambda_h < rh < cfg.lambda_h):
        raise EncodingRangeError(f"size ratio ({rw:.4f}, {rh:.4f}) outside the bounded scale range")
    sw = (cfg.lambda_w * rw - 1.0) / (cfg.lambda_w ** 2 - 1.0)
    sh = (cfg.lambda_h * rh - 1.0) / (cfg.lambda_h ** 2 - 1.0)

    # Centers in the candidate patch frame; the candidate's own center is W/2.
    xg = (gt.cx - cand.x0) * cfg.patch_w / cand.w
    yg = (gt.cy - cand.y0) * cfg.patch_h / cand.h
    dx = (1.0 + 2.0 * (cfg.patch_w / 2.0 - xg) / cfg.patch_w) / 2.0
    dy = (1.0 + 2.0 * (cfg.patch_h / 2.0 - yg) / cfg.patch_h) / 2.0
    if not (0.0 <= dx <= 1.0 and 0.0 <= dy <= 1.0):
        raise EncodingRangeError(f"center offset ({dx:.4f}, {dy:.4f}) outside the half-patch range")
    return RanTarget(1.0 if same_category else 0.0, dx, dy, sw, sh)


def decode(cand: Box, target: RanTarget, cfg: RanConfig) -> Box:
    """Exact inverse of encode_pair on the geometry channels."""
    rw = (target.sw * (cfg.lambda_w ** 2 - 1.0) + 1.0) / cfg.lambda_w
    rh = (target.sh * (cfg.lambda_h ** 2 - 1.0) + 1.0) / cfg.lambda_h
    xg = cfg.patch_w / 2.0 - (2.0 * target.dx - 1.0) * cfg.patch_w / 2.0
    yg = cfg.patch_h / 2.0 - (2.0 * target.dy - 1.0) * cfg.patch_h / 2.0
    return Box(cand.x0 + xg * cand.w / cfg.patch_w,
               cand.y0 + yg * cand.h / cfg.patch_h,
               cand.w / rw, cand.h / rh)


@functools.lru_cache(maxsize=8)
def _projection(raw_len: int, embed_len: int) -> np.ndarray:
    rng = np.random.default_rng([_PROJECTION_SEED, embed_len])
    return (rng.standard_normal((raw_len, embed_len)) / np.sqrt(raw_len)).astype(np.float32)


@functools.lru_cache(maxsize=8)
def _cell_index(patch_h: int, patch_w: int) -> np.ndarray:
    grid = DESCRIPTOR_GRID
    ys = (np.arange(patch_h) * grid) // patch_h
    xs = (np.arange(patch_w) * grid) // patch_w
    return (ys[:, None] * grid + xs[None, :]).astype(np.intp)


def describe_batch(gray_patches: np.ndarray, cfg: RanConfig) -> np.ndarray:
    """(n, L) float32 unit-norm descriptors of (n, patch_h, patch_w) gray patches.

    Per cell of an 8x8 grid: mean intensity plus an 8-bin magnitude-weighted
    Sobel orientation histogram (normalized by cell area), 576 raw features,
    then a fixed seeded random projection down to L.
    """
    g = np.asarray(gray_patches, dtype=np.float32)
    if g.ndim != 3 or g.shape[1] != cfg.patch_h or g.shape[2] != cfg.patch_w:
        raise ValueError(f"expected (n, {cfg.patch_h}, {cfg.patch_w}) patches, got {g.shape}")
    n = g.shape[0]
    grid = DESCRIPTOR_GRID
    ch, cw = cfg.patch_h // grid, cfg.patch_w // grid
    n_cells = grid * grid

    # Separable Sobel with edge replication: derivative [-1, 0, 1] on one
    # axis, smoothing [1, 2, 1] on the other.
    padded = np.pad(g, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dx = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
    dy = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
    dxp = np.pad(dx, ((0, 0), (1, 1), (0, 0)), mode="edge")
    gx = dxp[:, :-2, :] + 2.0 * dxp[:, 1:-1, :] + dxp[:, 2:, :]
    dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1)), mode="edge")
    gy = dyp[:, :, :-2] + 2.0 * dyp[:, :, 1:-1] + dyp[:, :, 2:]

    mag = np.sqrt(gx * gx + gy * gy)
    angle = np.arctan2(gy, gx)
    bins = np.floor((angle + np.float32(np.pi))
                    * np.float32(DESCRIPTOR_BINS / (2.0 * np.pi))).astype(np.intp)
    bins %= DESCRIPTOR_BINS

    # One bincount pass over (patch, cell, bin) replaces per-bin masked sums.
    cell = _cell_index(cfg.patch_h, cfg.patch_w)
    flat_idx = (np.arange(n, dtype=np.intp)[:, None, None] * n_cells + cell) * DESCRIPTOR_BINS + bins
    hist = np.bincount(flat_idx.ravel(), weights=mag.ravel(),
                       minlength=n * n_cells * DESCRIPTOR_BINS)
    hist = hist.reshape(n, n_cells, DESCRIPTOR_BINS)

    cell_px = ch * cw
    features = np.empty((n, n_cells, 1 + DESCRIPTOR_BINS), dtype=np.float32)
    features[:, :, 0] = g.reshape(n, grid, ch, grid, cw).mean(axis=(2, 4)).reshape(n, n_cells)
    features[:, :, 1:] = hist / cell_px

    raw = features.reshape(n, n_cells * (1 + DESCRIPTOR_BINS))
    vec = raw @ _projection(raw.shape[1], cfg.embed_len)
    norms = np.linalg.norm(vec, axis=1)
    flat = norms < 1e-12
    if flat.any():
        vec[flat] = 0.0
        vec[flat, 0] = 1.0
        norms[flat] = 1.0
    return vec / norms[:, None]


def prepare_patch(img: Image, cfg: RanConfig) -> np.ndarray:
    """Gray (patch_h, patch_w) plane of an image resized to the working size."""
    full = Box(img.width / 2.0, img.height / 2.0, float(img.width), float(img.height))
    return crop_gray_batch(to_gray(img), [full], cfg.patch_w, cfg.patch_h)[0]


def describe(patch: Image, cfg: RanConfig) -> np.ndarray:
    """Unit-norm descriptor of one patch (resized internally if needed)."""
    return describe_batch(prepare_patch(patch, cfg)[None], cfg)[0]


def ran_forward(support: Image, candidate: Image, head: MlpHead, cfg: RanConfig) -> RanTarget:
    """Predicted alignment target for one (support, candidate) patch pair.

    The fused vector concatenates the support descriptor first; swapping the
    two patches is not a symmetry of the head.
    """
    fused = np.concatenate([describe(support, cfg), describe(candidate, cfg)])
    return RanTarget.from_array(mlp.forward(head, fused[None].astype(np.float64))[0])


def pair_features(pairs: list[PairSample], cfg: RanConfig,
                  chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Fused descriptors and target rows for a pair dataset."""
    n = len(pairs)
    x = np.empty((n, 2 * cfg.embed_len), dtype=np.float64)
    t = np.empty((n, 5), dtype=np.float64)
    for start in range(0, n, chunk):
        batch = pairs[start:start + chunk]
        grays = np.stack([prepare_patch(p, cfg)
                          for s in batch for p in (s.gt_patch, s.cand_patch)])
        desc = describe_batch(grays, cfg).astype(np.float64)
        x[start:start + len(batch)] = desc.reshape(len(batch), -1)
        for i, s in enumerate(batch):
            t[start + i] = s.target.to_array()
    return x, t


def train_ran(pairs: list[PairSample], cfg: RanConfig, train_cfg: TrainConfig,
              head: MlpHead | None = None) -> tuple[MlpHead, list[float]]:
    """Train the alignment head on pair samples.

    A fresh head is initialized from the training seed unless one is passed
    in (continued / staged training). Returns the head and per-epoch losses.
    """
    if not pairs:
        raise ValueError("empty pair dataset")
    x, t = pair_features(pairs, cfg)
    if head is None:
        head = mlp.init_head(cfg.embed_len, seed=train_cfg.seed)
    elif head.embed_len != cfg.embed_len:
        raise ValueError(f"head embedding {head.embed_len} does not match config {cfg.embed_len}")
    losses = mlp.train(head, x, t, train_cfg)
    return head, losses


def align(candidates: list[Box], query: Image, support: Exemplar, head: MlpHead,
          cfg: RanConfig) -> list[Detection]:
    """Classify and refine candidate boxes against one support exemplar.

    Candidates predicted below the classify threshold are dropped; survivors
    are decoded into aligned boxes scored by the predicted agreement.
    """
    if not candidates:
        return []
    preds = predict_pairs(candidates, query, [support], head, cfg)[0]
    out = []
    for box, row in zip(candidates, preds):
        target = RanTarget.from_array(row)
        if target.c < cfg.classify_threshold:
            continue
        out.append(Detection(decode(box, target, cfg), support.category, target.c))
    return out


def predict_pairs(candidates: list[Box], query: Image, exemplars: list[Exemplar],
                  head: MlpHead, cfg: RanConfig) -> np.ndarray:
    """(k, n, 5) predictions for every exemplar x candidate pair.

    Candidate crops and descriptors are shared across exemplars.
    """
    gray_stack = crop_gray_batch(to_gray(query), candidates, cfg.patch_w, cfg.patch_h)
    cand_desc = describe_batch(gray_stack, cfg).astype(np.float64)
    n = len(candidates)
    preds = np.empty((len(exemplars), n, 5))
    for k, ex in enumerate(exemplars):
        sup_desc = describe(ex.patch, cfg).astype(np.float64)
        fused = np.concatenate([np.tile(sup_desc, (n, 1)), cand_desc], axis=1)
        preds[k] = mlp.forward(head, fused)
    return preds
