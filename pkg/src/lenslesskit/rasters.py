"""16-bit raster files (PNG or PGM/PPM) with a JSON sidecar.

Values are stored linearly between ``lo`` and ``hi`` (kept in the sidecar),
so any real-valued image round-trips to within ``(hi - lo) / 65535``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .optics import ApertureMask

MAXVAL = 65535


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def _quantise(values, lo, hi):
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint16)
    q = np.rint((values - lo) / (hi - lo) * MAXVAL)
    return np.clip(q, 0, MAXVAL).astype(np.uint16)


def _write_netpbm(path, pix):
    if pix.ndim == 2:
        magic, (h, w), c = b"P5", pix.shape, 1
    elif pix.ndim == 3 and pix.shape[2] == 3:
        magic, (h, w, c) = b"P6", pix.shape
    else:
        raise ValueError(f"netpbm supports 1 or 3 channels, got shape {pix.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n{MAXVAL}\n".encode())
        fh.write(pix.astype(">u2").tobytes())


def _read_netpbm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != MAXVAL:
        raise ValueError(f"{path}: expected 16-bit netpbm, maxval={maxval}")
    c = 1 if magic == b"P5" else 3
    pix = np.frombuffer(raw, dtype=">u2", count=w * h * c, offset=pos)
    return pix.reshape((h, w) if c == 1 else (h, w, c)).astype(np.uint16)


def save_raster(path, values, meta=None, lo=None, hi=None):
    """Write ``values`` to ``path`` (.png, .pgm or .ppm) plus ``path.json``."""
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if lo is None else float(lo)
    hi = float(values.max()) if hi is None else float(hi)
    pix = _quantise(values, lo, hi)
    suffix = path.suffix.lower()
    if suffix == ".png":
        if pix.ndim != 2:
            raise ValueError("16-bit PNG output is single-channel; use .ppm for colour")
        Image.fromarray(pix.astype(np.uint16)).save(path)
    elif suffix in (".pgm", ".ppm"):
        _write_netpbm(path, pix)
    else:
        raise ValueError(f"unsupported raster extension {suffix!r}")
    side = {"shape": list(values.shape), "lo": lo, "hi": hi, **(meta or {})}
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_raster(path):
    """Return ``(values, meta)``; without a sidecar values are scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm"):
        pix = _read_netpbm(path)
    else:
        with Image.open(path) as im:
            pix = np.array(im)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if pix.dtype == np.uint8 and not meta:
        return pix.astype(np.float64) / 255.0, meta
    lo, hi = meta.get("lo", 0.0), meta.get("hi", 1.0)
    values = lo + pix.astype(np.float64) / MAXVAL * (hi - lo)
    return values, meta


def save_mask(path, mask: ApertureMask):
    meta = {"kind": "aperture_mask", "grid_pitch": mask.grid_pitch,
            "thickness": mask.thickness, **mask.meta}
    return save_raster(path, mask.transmission, meta=meta, lo=0.0, hi=1.0)


def load_mask(path) -> ApertureMask:
    values, meta = load_raster(path)
    if meta.get("kind") != "aperture_mask":
        raise ValueError(f"{path}: sidecar does not describe an aperture mask")
    extra = {k: v for k, v in meta.items() if k not in ("kind", "grid_pitch", "thickness", "shape", "lo", "hi")}
    return ApertureMask(values, float(meta["grid_pitch"]), float(meta["thickness"]), extra)
