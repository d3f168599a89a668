"""Fixed-topology regression head: dense layers with rectifier hidden units
and a logistic output, hand-rolled backprop, Adam updates, and a central
finite-difference gradient checker.

Tensors are plain numpy arrays. Parameters persist as float32 (the
checkpoint format); all math runs in float64 for reproducible gradients.

The layer width chain is fixed at [2L, L, L/2, L/4, 16, 5]: a fused pair
embedding of length 2L in, the 5-channel alignment target out.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"RAN1"

#: Smooth-L1 transition point for the geometry channels.
HUBER_DELTA = 0.1

_BCE_EPS = 1e-7


class NonFiniteLossError(FloatingPointError):
    """Training produced a non-finite loss."""


def head_widths(embed_len: int) -> list[int]:
    """Layer widths for a fused input of length 2 * embed_len."""
    if embed_len < 4 or embed_len % 4 != 0:
        raise ValueError(f"embedding length must be a positive multiple of 4, got {embed_len}")
    return [2 * embed_len, embed_len, embed_len // 2, embed_len // 4, 16, 5]


@dataclass
class MlpHead:
    """Dense head parameters; weights[i] has shape (widths[i+1], widths[i])."""

    embed_len: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def widths(self) -> list[int]:
        return head_widths(self.embed_len)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def init_head(embed_len: int, seed: int = 0) -> MlpHead:
    """Uniform Glorot weights, zero biases, deterministic in the seed."""
    widths = head_widths(embed_len)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpHead(embed_len, weights, biases)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cached(head: MlpHead, x: np.ndarray):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != head.widths[0]:
        raise ValueError(f"expected input of shape (batch, {head.widths[0]}), got {a.shape}")
    acts = [a]
    last = head.n_layers - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = acts[-1] @ w.astype(np.float64).T + b.astype(np.float64)
        a = _sigmoid(z) if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(head: MlpHead, x: np.ndarray) -> np.ndarray:
    """(batch, 5) predictions, each channel in (0, 1)."""
    return _forward_cached(head, x)[-1]


def loss(pred: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Scalar loss plus its gradient with respect to the predictions.

    Channel 0 pays binary cross-entropy against the agreement flag; channels
    1..4 pay smooth-L1 (delta = HUBER_DELTA), summed over channels and masked
    by the target flag so negatives carry no geometry gradient. Both terms
    average over the batch.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 5:
        raise ValueError(f"pred/target shape mismatch: {p.shape} vs {t.shape}")
    batch = p.shape[0]
    c = t[:, 0]
    pc = np.clip(p[:, 0], _BCE_EPS, 1.0 - _BCE_EPS)
    bce = -(c * np.log(pc) + (1.0 - c) * np.log(1.0 - pc))

    r = p[:, 1:] - t[:, 1:]
    small = np.abs(r) < HUBER_DELTA
    hub = np.where(small, 0.5 * r * r / HUBER_DELTA, np.abs(r) - 0.5 * HUBER_DELTA)
    geo = c * hub.sum(axis=1)

    total = float((bce + geo).mean())

    dpred = np.zeros_like(p)
    in_range = (p[:, 0] > _BCE_EPS) & (p[:, 0] < 1.0 - _BCE_EPS)
    dpred[:, 0] = np.where(in_range, (-c / pc + (1.0 - c) / (1.0 - pc)), 0.0) / batch
    dpred[:, 1:] = (c[:, None] * np.where(small, r / HUBER_DELTA, np.sign(r))) / batch
    return total, dpred


def _backward(head: MlpHead, acts: list[np.ndarray], dout: np.ndarray):
    grads_w = [None] * head.n_layers
    grads_b = [None] * head.n_layers
    last = head.n_layers - 1
    delta = dout
    for i in range(last, -1, -1):
        a_out, a_in = acts[i + 1], acts[i]
        if i == last:
            delta = delta * a_out * (1.0 - a_out)
        else:
            delta = delta * (a_out > 0.0)
        grads_w[i] = delta.T @ a_in
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ head.weights[i].astype(np.float64)
    return grads_w, grads_b


def loss_and_grads(head: MlpHead, x: np.ndarray, targets: np.ndarray):
    """Loss value plus parameter gradients (float64 lists mirroring weights/biases)."""
    acts = _forward_cached(head, x)
    value, dpred = loss(acts[-1], targets)
    grads_w, grads_b = _backward(head, acts, dpred)
    return value, grads_w, grads_b


def grad_check(head: MlpHead, x: np.ndarray, targets: np.ndarray, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Works on a float64 copy of the head so finite differences are limited by
    truncation error only, not float32 storage.
    """
    head64 = MlpHead(head.embed_len,
                     [w.astype(np.float64) for w in head.weights],
                     [b.astype(np.float64) for b in head.biases])
    _, grads_w, grads_b = loss_and_grads(head64, x, targets)

    def eval_loss() -> float:
        value, _ = loss(forward(head64, x), targets)
        return value

    worst = 0.0
    for params, grads in ((head64.weights, grads_w), (head64.biases, grads_b)):
        for arr, g in zip(params, grads):
            flat, gflat = arr.ravel(), np.asarray(g).ravel()
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                up = eval_loss()
                flat[k] = orig - step
                down = eval_loss()
                flat[k] = orig
                numeric = (up - down) / (2.0 * step)
                denom = max(abs(gflat[k]), abs(numeric), 1e-6)
                worst = max(worst, abs(gflat[k] - numeric) / denom)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class Adam:
    """Adaptive-moment optimizer state for one head."""

    def __init__(self, head: MlpHead, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros(w.shape) for w in head.weights] + [np.zeros(b.shape) for b in head.biases]
        self.v = [np.zeros_like(m) for m in self.m]

    def apply(self, head: MlpHead, grads_w: list, grads_b: list) -> None:
        cfg = self.cfg
        self.t += 1
        scale1 = 1.0 - cfg.beta1 ** self.t
        scale2 = 1.0 - cfg.beta2 ** self.t
        params = head.weights + head.biases
        for i, (p, g) in enumerate(zip(params, grads_w + grads_b)):
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g
            update = cfg.learning_rate * (self.m[i] / scale1) / (np.sqrt(self.v[i] / scale2) + cfg.eps)
            p -= update.astype(p.dtype)


def train_step(head: MlpHead, x: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
               opt: Adam | None = None) -> float:
    """One optimizer step on a batch; mutates the head in place and returns the loss."""
    if opt is None:
        opt = Adam(head, cfg)
    value, grads_w, grads_b = loss_and_grads(head, x, targets)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss became non-finite: {value}")
    opt.apply(head, grads_w, grads_b)
    return value


def train(head: MlpHead, x: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> list[float]:
    """Minibatch training loop; returns the mean loss of each epoch.

    Deterministic in (cfg.seed, data order): shuffling derives from the
    config seed alone.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(head, cfg)
    epoch_losses = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        seen = 0
        acc = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            value = train_step(head, x[idx], targets[idx], cfg, opt)
            acc += value * idx.size
            seen += idx.size
        epoch_losses.append(acc / seen)
    return epoch_losses


def save_head(path: str | Path, head: MlpHead, meta: dict | None = None) -> None:
    """RAN1 checkpoint: magic, u32 L, u32 layer count, then per-layer row-major
    little-endian float32 weights followed by the bias. A JSON sidecar at
    <path>.json carries config and training metadata."""
    parts = [struct.pack("<4sII", CHECKPOINT_MAGIC, head.embed_len, head.n_layers)]
    for w, b in zip(head.weights, head.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))
    sidecar = {"embed_len": head.embed_len, "layers": head.n_layers}
    sidecar.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


def load_head(path: str | Path) -> tuple[MlpHead, dict]:
    """Read a RAN1 checkpoint plus its JSON sidecar (empty dict when absent)."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, embed_len, n_layers = struct.unpack("<4sII", blob[:12])
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    widths = head_widths(embed_len)
    if n_layers != len(widths) - 1:
        raise ValueError(f"{path}: expected {len(widths) - 1} layers, header says {n_layers}")
    weights, biases = [], []
    offset = 12
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        wn, bn = fan_out * fan_in, fan_out
        needed = (wn + bn) * 4
        if len(blob) < offset + needed:
            raise ValueError(f"{path}: truncated checkpoint payload")
        w = np.frombuffer(blob, dtype="<f4", count=wn, offset=offset).reshape(fan_out, fan_in)
        offset += wn * 4
        b = np.frombuffer(blob, dtype="<f4", count=bn, offset=offset)
        offset += bn * 4
        weights.append(w.copy())
        biases.append(b.copy())
    sidecar_path = Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.exists() else {}
    return MlpHead(embed_len, weights, biases), meta
