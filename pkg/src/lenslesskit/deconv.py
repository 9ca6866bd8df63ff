"""Frequency-domain restoration of coded captures (inverse and ridge filters)."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .optics import ImageGrid

__all__ = ["SingularFilterError", "FrequencyFilter", "build_inverse_filter", "deconvolve"]

#: Imaginary residue tolerated (relative to the signal norm) before warning.
IMAG_TOL = 1e-8


class SingularFilterError(ZeroDivisionError):
    """The unregularised inverse hits a zero Fourier bin."""


@dataclass(frozen=True)
class FrequencyFilter:
    """Spectrum ``r = conj(K) / (|K|**2 + eps**2)`` of a restoration filter.

    ``eps`` is the absolute regularisation actually applied; ``eps_rel`` is
    the value it was derived from (``eps = eps_rel * max|K|``).
    """

    spectrum: np.ndarray
    eps: float
    eps_rel: float

    def __post_init__(self):
        self.spectrum.setflags(write=False)

    @property
    def shape(self):
        return self.spectrum.shape


def build_inverse_filter(psf, eps_rel=1e-3, *, relative=True) -> FrequencyFilter:
    """Ridge-regularised inverse of a centred PSF.

    With ``relative`` the regularisation is ``eps_rel * max|K|`` so the same
    setting behaves across PSF brightness; ``eps_rel=0`` gives the plain
    inverse ``1/K`` and requires every bin to be non-zero.
    """
    values = psf.values if isinstance(psf, ImageGrid) else np.asarray(psf, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PSF must be 2D, got shape {values.shape}")
    if not np.any(values):
        raise ValueError("PSF is identically zero")
    if eps_rel < 0:
        raise ValueError("eps must be non-negative")
    K = np.fft.fft2(np.fft.ifftshift(values))
    mag = np.abs(K)
    eps = eps_rel * mag.max() if relative else float(eps_rel)
    if eps == 0:
        zero = np.argwhere(mag == 0)
        if len(zero):
            ky, kx = zero[0]
            raise SingularFilterError(f"PSF spectrum vanishes at bin ({ky}, {kx}); use eps > 0")
        r = 1.0 / K
    else:
        r = np.conj(K) / (mag ** 2 + eps ** 2)
    return FrequencyFilter(r, float(eps), float(eps_rel))


def deconvolve(g, filt: FrequencyFilter):
    """``h = F^-1[F[g] * r]`` per channel. Returns an array, or an
    :class:`ImageGrid` when ``g`` is one."""
    values = g.values if isinstance(g, ImageGrid) else np.asarray(g, dtype=np.float64)
    if values.shape[:2] != filt.shape:
        raise ValueError(f"capture {values.shape[:2]} and filter {filt.shape} differ in shape")
    img = values if values.ndim == 3 else values[..., None]
    h = np.fft.ifft2(np.fft.fft2(img, axes=(0, 1)) * filt.spectrum[..., None], axes=(0, 1))
    norm = np.linalg.norm(h)
    resid = np.linalg.norm(h.imag)
    if norm > 0 and resid > IMAG_TOL * norm:
        warnings.warn(f"restoration has imaginary residue {resid / norm:.2e} of the signal norm",
                      RuntimeWarning, stacklevel=2)
    out = h.real if values.ndim == 3 else h.real[..., 0]
    if isinstance(g, ImageGrid):
        return ImageGrid(out, g.pixel_pitch)
    return out
