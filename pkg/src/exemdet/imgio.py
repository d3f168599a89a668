"""File formats: PNG and binary PGM/PPM images, plus the SDM1 density dump.

SDM1 layout: 16-byte header (4-byte magic "SDM1", u32 width, u32 height,
u32 reserved zero; little-endian) followed by row-major little-endian
float32 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from .geometry import DensityMap, Image

SDM_MAGIC = b"SDM1"


def write_image(path: str | Path, img: Image) -> None:
    """8-bit PNG or binary PGM/PPM, chosen by file suffix."""
    path = Path(path)
    data = np.round(img.pixels * 255.0).astype(np.uint8)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        _write_pnm(path, data)
        return
    if img.channels == 1:
        PilImage.fromarray(data[:, :, 0], mode="L").save(path, format="PNG")
    else:
        PilImage.fromarray(data, mode="RGB").save(path, format="PNG")


def read_image(path: str | Path) -> Image:
    """Read PNG or binary PGM/PPM into a [0, 1] float image."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm"):
        data = _read_pnm(path)
    else:
        with PilImage.open(path) as pil:
            if pil.mode in ("1", "L", "I", "I;16", "F", "LA"):
                data = np.asarray(pil.convert("L"))[:, :, None]
            else:
                data = np.asarray(pil.convert("RGB"))
    return Image(data.astype(np.float32) / 255.0)


def _write_pnm(path: Path, data: np.ndarray) -> None:
    channels = data.shape[2]
    magic = b"P5" if channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, data.shape[1], data.shape[0])
    body = data[:, :, 0] if channels == 1 else data
    path.write_bytes(header + body.tobytes())


def _read_pnm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    magic, pos = _pnm_token(blob, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r} (binary P5/P6 only)")
    w_tok, pos = _pnm_token(blob, pos)
    h_tok, pos = _pnm_token(blob, pos)
    maxval_tok, pos = _pnm_token(blob, pos)
    w, h, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported PNM maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    count = w * h * channels
    if len(blob) - pos < count:
        raise ValueError(f"{path}: truncated PNM payload")
    raw = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos)
    data = raw.reshape(h, w, channels).astype(np.float32)
    if maxval != 255:
        data = np.round(data * (255.0 / maxval))
    return data.astype(np.uint8)


def _pnm_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and '#' comments, return the next token and the offset of
    # the byte after its single trailing whitespace.
    while pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated PNM header")
    return blob[start:pos], pos + 1


def write_density(path: str | Path, dmap: DensityMap) -> None:
    header = struct.pack("<4sIII", SDM_MAGIC, dmap.width, dmap.height, 0)
    Path(path).write_bytes(header + dmap.values.astype("<f4").tobytes())


def read_density(path: str | Path) -> DensityMap:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ValueError(f"{path}: truncated SDM1 header")
    magic, w, h, _reserved = struct.unpack("<4sIII", blob[:16])
    if magic != SDM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {SDM_MAGIC!r}")
    values = np.frombuffer(blob, dtype="<f4", count=w * h, offset=16)
    if values.size != w * h:
        raise ValueError(f"{path}: truncated SDM1 payload")
    return DensityMap(values.reshape(h, w).copy())


def write_density_pgm(path: str | Path, dmap: DensityMap) -> None:
    """8-bit heatmap rendering of a density map (values scaled by 255)."""
    data = np.round(dmap.values * 255.0).astype(np.uint8)[:, :, None]
    _write_pnm(Path(path), data)
