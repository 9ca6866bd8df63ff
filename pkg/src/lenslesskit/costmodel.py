"""
Closed-form parameter and multiplication counts for the three encoder
blocks, with time and memory estimates.

The per-block formulas (``#Params`` and ``#Multiplications`` for an input of
shape ``(H, W, C)`` and output feature size ``L``) are evaluated literally.
Multiplications stand in for FLOPs. Estimated time is ``mults / device
throughput`` and memory is ``(params + 2 mults) * precision``.

Multi-stage encoders (``embed_dims`` with several entries) are mapped to
per-stage ``(H, W, C, L, P)`` tuples by :func:`stage_mapping`:

* stage 1 sees the image: ``(H, W, C_image, e1, P)``;
* stage k > 1 sees the stage-1 token grid with unit patches:
  ``(H/P, W/P, e_{k-1}, e_k, 1)``.

With this mapping the stacked gMLP rows of the bundled reference table are
reproduced exactly.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources

__all__ = [
    "ArchInput", "CostEstimate", "stage_mapping", "block_params", "block_mults",
    "count_params", "count_mults", "estimate", "gmlp_quoted_total", "load_table3",
    "table3_report", "table3_csv", "MEMORY_LIMIT_GB", "TIME_LIMIT_S",
]

MEMORY_LIMIT_GB = 15.0
TIME_LIMIT_S = 1.0
KINDS = ("vit_sa", "vit_aa", "gmlp")


@dataclass(frozen=True)
class ArchInput:
    block_kind: str
    H: int
    W: int
    C: int = 3
    L: int = 512
    P: int = 4
    m: int = 6
    embed_dims: tuple = ()
    precision: int = 4
    device_flops: float = 45e12
    batch: int = 1

    def __post_init__(self):
        if self.block_kind not in KINDS:
            raise ValueError(f"unknown block kind {self.block_kind!r}; expected one of {KINDS}")
        for name in ("H", "W", "C", "L", "P", "m", "batch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.precision not in (2, 4):
            raise ValueError(f"precision must be 2 or 4 bytes, got {self.precision}")
        object.__setattr__(self, "embed_dims", tuple(self.embed_dims))

    def with_precision(self, precision):
        return ArchInput(**{**self.__dict__, "precision": precision})


@dataclass(frozen=True)
class CostEstimate:
    params: int
    mults: int
    est_seconds: float
    est_bytes: float

    @property
    def est_gb(self):
        return self.est_bytes / 1e9


def stage_mapping(arch: ArchInput):
    """Per-stage ``(H, W, C, L, P)`` tuples (see module docstring)."""
    if not arch.embed_dims:
        return [(arch.H, arch.W, arch.C, arch.L, arch.P)]
    stages = [(arch.H, arch.W, arch.C, arch.embed_dims[0], arch.P)]
    Hg = arch.H // arch.P if arch.P else 0
    Wg = arch.W // arch.P if arch.P else 0
    for prev, e in zip(arch.embed_dims, arch.embed_dims[1:]):
        stages.append((Hg, Wg, prev, e, 1))
    return stages


def block_params(kind, H, W, C, L, P, m=6):
    if kind == "vit_sa":
        return 2 * C * P**2 * C * P**2 + C * P**2 * L
    if kind == "vit_aa":
        return (H**2 + W**2) * (C * P) ** 2 + 2 * (H + W) * C * P * L
    if kind == "gmlp":
        h = m * C * P**2
        return h * C * P**2 + h * (h + 1) + h * L
    raise ValueError(f"unknown block kind {kind!r}")


def block_mults(kind, H, W, C, L, P, m=6):
    if kind == "vit_sa":
        return 2 * H * W * C**2 + 2 * (H * W) ** 2 * C * L
    if kind == "vit_aa":
        return 2 * (H + W) * C**2 + 2 * (H**2 + W**2) * C * L
    if kind == "gmlp":
        t = m * H * W * C
        return t * C * P**2 + t * (2 * m * C * P**2 + 1) + t * L
    raise ValueError(f"unknown block kind {kind!r}")


def count_params(arch: ArchInput):
    return sum(block_params(arch.block_kind, *s, arch.m) for s in stage_mapping(arch))


def count_mults(arch: ArchInput):
    return arch.batch * sum(block_mults(arch.block_kind, *s, arch.m) for s in stage_mapping(arch))


def gmlp_quoted_total(n, d, h, l):
    """The quoted gMLP total ``n h (d + (h + 1) + h + l)``.

    Note it carries one more ``n h h`` than the sum of the four stage counts
    ``ndh + nhh + nh + nhl``; compare :func:`lenslesskit.blocks.gmlp_block_mults`.
    """
    return n * h * (d + (h + 1) + h + l)


def estimate(arch: ArchInput) -> CostEstimate:
    p = count_params(arch)
    mu = count_mults(arch)
    return CostEstimate(p, mu, mu / arch.device_flops, float((p + 2 * mu) * arch.precision))


# ---------------------------------------------------------------- reporting

def load_table3():
    """The bundled configuration matrix with the published reference values."""
    text = resources.files("lenslesskit").joinpath("data/table3.json").read_text()
    return json.loads(text)


def _arch_from_row(row, device_flops=45e12):
    embed = tuple(row["embed"])
    H, W = row["size"]
    return ArchInput(row["model"], H, W, C=row.get("C", 3), L=embed[-1], P=row.get("P", 4),
                     m=row.get("m", 6), embed_dims=embed if len(embed) > 1 else (),
                     device_flops=device_flops)


def _ratio(a, b):
    return a / b if b else float("nan")


def table3_report(configs=None, device_flops=45e12):
    """One dict per configuration: computed values, published values and ratios.

    ``over_*`` flags mark cells above the 15 GB / 1 s practicality limits.
    """
    rows = []
    for cfg in (load_table3()["rows"] if configs is None else configs):
        arch = _arch_from_row(cfg, device_flops)
        e32 = estimate(arch)
        e16 = estimate(arch.with_precision(2))
        ref_vals = cfg.get("reference", {})
        mapping = "; ".join(f"(H={h},W={w},C={c},L={l},P={p})" for h, w, c, l, p in stage_mapping(arch))
        row = {
            "image": cfg["image"], "H": arch.H, "W": arch.W, "model": cfg["model"],
            "embed": "(" + ",".join(str(e) for e in cfg["embed"]) + ")",
            "params": e32.params, "mults": e32.mults,
            "time_s": e32.est_seconds, "fp32_gb": e32.est_gb, "fp16_gb": e16.est_gb,
            "ref_time_s": ref_vals.get("time_s"), "ref_fp32_gb": ref_vals.get("fp32_gb"),
            "ref_fp16_gb": ref_vals.get("fp16_gb"),
        }
        for k in ("time_s", "fp32_gb", "fp16_gb"):
            ref = row[f"ref_{k}"]
            row[f"ratio_{k}"] = _ratio(row[k], ref) if ref is not None else None
        row["over_time"] = row["time_s"] > TIME_LIMIT_S
        row["over_memory_fp32"] = row["fp32_gb"] > MEMORY_LIMIT_GB
        row["over_memory_fp16"] = row["fp16_gb"] > MEMORY_LIMIT_GB
        row["stage_mapping"] = mapping
        rows.append(row)
    return rows


TABLE3_COLUMNS = [
    "image", "H", "W", "model", "embed", "params", "mults", "time_s", "fp32_gb", "fp16_gb",
    "ref_time_s", "ref_fp32_gb", "ref_fp16_gb", "ratio_time_s", "ratio_fp32_gb",
    "ratio_fp16_gb", "over_time", "over_memory_fp32", "over_memory_fp16", "stage_mapping",
]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def table3_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE3_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in TABLE3_COLUMNS])
    return buf.getvalue()
