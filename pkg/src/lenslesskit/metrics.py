"""PSNR, SSIM and quality reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "PSNR_CAP", "psnr", "ssim", "gaussian_window", "intensity_error_rate",
    "ErrorRate", "QualityReport",
]

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val=1.0):
    """``10 log10(max_val**2 / MSE)``, capped at :data:`PSNR_CAP` for identical images."""
    a, b = _pair(a, b)
    if not max_val > 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range=1.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over all fully-contained Gaussian windows.

    Multi-channel images are scored per channel and averaged.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, win_size, sigma, k1, k2)
                              for c in range(a.shape[2])]))
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise ValueError(f"image {a.shape} is smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (win_size, win_size)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class ErrorRate:
    """Ratio of intensity error rates implied by a PSNR gap.

    ``derived`` follows from PSNR = 10 log10(MAX^2/MSE) with MSE ~ rho^2,
    i.e. ``10**(dp/20)``; ``literal_form`` is the literal ``10**(dp/2)``.
    """

    dp: float
    derived: float
    literal_form: float


def intensity_error_rate(dp):
    return ErrorRate(float(dp), 10.0 ** (dp / 20.0), 10.0 ** (dp / 2.0))


@dataclass
class QualityReport:
    """Per-image scores plus the summary row used in comparison tables."""

    model: str = ""
    in_out: str = ""
    param_size_mb: float = 0.0
    train_size: int = 0
    image_ids: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, image_id, psnr_db, ssim_val):
        self.image_ids.append(str(image_id))
        self.psnr_db.append(float(psnr_db))
        self.ssim.append(float(ssim_val))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_db)) if self.psnr_db else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def table4_cell(self):
        return f"{self.mean_psnr:.2f}/{self.mean_ssim:.4f}"

    def summary(self):
        return {
            "model": self.model, "in_out": self.in_out,
            "param_size_mb": round(self.param_size_mb, 4), "train_size": self.train_size,
            "psnr_db": self.mean_psnr, "ssim": self.mean_ssim,
            "psnr_ssim": self.table4_cell(),
        }

    def to_json(self):
        rows = [{"image_id": i, "psnr_db": p, "ssim": s}
                for i, p, s in zip(self.image_ids, self.psnr_db, self.ssim)]
        return json.dumps({"summary": self.summary(), "images": rows}, indent=2)

    def to_csv(self):
        cols = ["model", "in_out", "param_size_mb", "train_size", "image_id", "psnr_db", "ssim"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        head = [self.model, self.in_out, f"{self.param_size_mb:.4f}", self.train_size]
        for i, p, s in zip(self.image_ids, self.psnr_db, self.ssim):
            w.writerow(head + [i, f"{p:.6f}", f"{s:.6f}"])
        w.writerow(head + ["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()


def table4(reports):
    """Render reports as the model / in-out / param size / train size / PSNR-SSIM table."""
    lines = ["Model\tIn-Out size\tParam size [MB]\tTrain size\tPSNR [dB] /SSIM"]
    for r in reports:
        lines.append(f"{r.model}\t{r.in_out}\t{r.param_size_mb:.2f}\t{r.train_size:,}\t{r.table4_cell()}")
    return "\n".join(lines)
