"""
Coded-aperture masks and the geometric lensless forward model.

The capture model is the multiplexed pinhole camera: the scene is mapped onto
the sensor by the pinhole similarity ``f(u) = I(u/z) / z**2`` and then
convolved with the aperture transmission (resampled to sensor pitch and
blurred by the finite pinhole size and by diffraction).

Lengths are in metres throughout. Image arrays are ``(H, W)`` or
``(H, W, C)`` with linear intensities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError", "PackingError", "PinholeGeometry", "MaskSpec", "ApertureMask",
    "ImageGrid", "NoiseSpec", "optimal_pinhole_diameter", "blur_width",
    "generate_coded_mask", "mask_from_centers", "pinhole_project", "psf_from_mask",
    "delta_psf", "convolve_psf", "coded_capture", "apply_noise", "sigma_for_snr",
    "thickness_vignetting", "vignetting_map",
]

#: Rayleigh's empirical coefficient for the optimal pinhole, a = 1.9 sqrt(lambda d).
RAYLEIGH_COEFF = 1.9


class GeometryError(ValueError):
    """Inconsistent shapes, pitches or non-physical lengths."""


class PackingError(RuntimeError):
    """The requested pinholes do not fit in the mask region."""


def _positive(name, value):
    if not (value > 0 and math.isfinite(value)):
        raise GeometryError(f"{name} must be a positive finite length, got {value!r}")


@dataclass(frozen=True)
class PinholeGeometry:
    """Optical layout of the camera.

    ``similarity`` is the factor ``z`` of the pinhole mapping
    ``f(u) = I(u/z)/z**2`` in pixel units; scene rasters are assumed to be
    rendered at sensor pitch already, so it defaults to 1. ``blur_geometric``
    and ``blur_diffraction`` scale the two blur terms of :func:`blur_width`.
    The default ratio puts the blur minimum at ``1.9 * sqrt(lambda * d)``.
    """

    wavelength: float = 500e-9
    mask_sensor_distance: float = 2e-3
    scene_distance: float = 0.18
    pinhole_size: float = 61e-6
    similarity: float = 1.0
    blur_geometric: float = 0.5
    blur_diffraction: float = 0.5 * RAYLEIGH_COEFF ** 2

    def __post_init__(self):
        _positive("wavelength", self.wavelength)
        _positive("mask_sensor_distance", self.mask_sensor_distance)
        _positive("scene_distance", self.scene_distance)
        _positive("pinhole_size", self.pinhole_size)
        _positive("similarity", self.similarity)
        if self.blur_geometric < 0 or self.blur_diffraction < 0:
            raise GeometryError("blur coefficients must be non-negative")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class MaskSpec:
    region_extent: tuple = (2e-3, 2e-3)
    pinhole_count: int = 1000
    pinhole_size: float = 61e-6
    pinhole_shape: str = "rectangular"
    rng_seed: int = 0
    grid_pitch: float | None = None
    thickness: float = 0.0

    def __post_init__(self):
        ey, ex = self.region_extent
        _positive("region_extent[0]", ey)
        _positive("region_extent[1]", ex)
        _positive("pinhole_size", self.pinhole_size)
        if self.pinhole_count < 1:
            raise GeometryError(f"pinhole_count must be >= 1, got {self.pinhole_count}")
        if self.pinhole_size > min(ey, ex):
            raise GeometryError("pinhole_size exceeds the mask region")
        if self.pinhole_shape != "rectangular":
            raise GeometryError(f"unsupported pinhole_shape {self.pinhole_shape!r}")
        if self.thickness < 0:
            raise GeometryError("thickness must be non-negative")

    def to_dict(self):
        d = dict(self.__dict__)
        d["region_extent"] = list(self.region_extent)
        return d


@dataclass
class ApertureMask:
    """Sampled transmission ``k(a)`` over the mask region."""

    transmission: np.ndarray
    grid_pitch: float
    thickness: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def region_extent(self):
        ny, nx = self.transmission.shape
        return ny * self.grid_pitch, nx * self.grid_pitch

    @property
    def open_fraction(self):
        ey, ex = self.region_extent
        return float(self.transmission.sum() * self.grid_pitch ** 2 / (ey * ex))


@dataclass
class ImageGrid:
    values: np.ndarray
    pixel_pitch: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim not in (2, 3):
            raise GeometryError(f"image must be 2D or 2D x channels, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise GeometryError("image contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian noise (``sigma``) with optional Poisson shot noise.

    ``photons`` is the expected photon count at unit intensity; ``None``
    disables shot noise. Noisy captures are clipped at zero when ``clip``.
    """

    sigma: float = 0.0
    photons: float | None = None
    seed: int = 0
    clip: bool = True

    @property
    def is_noiseless(self):
        return self.sigma == 0 and self.photons is None


def optimal_pinhole_diameter(wavelength, distance, coeff=RAYLEIGH_COEFF):
    """Pinhole size ``coeff * sqrt(wavelength * distance)`` balancing geometric and diffraction blur."""
    for name, v in (("wavelength", wavelength), ("distance", distance), ("coeff", coeff)):
        if not v > 0:
            raise GeometryError(f"{name} must be positive, got {v!r}")
    return coeff * math.sqrt(wavelength * distance)


def blur_width(pinhole_size, wavelength, distance, c_geom=0.5, c_diff=0.5 * RAYLEIGH_COEFF ** 2):
    """Quadrature sum of the geometric (``~a``) and diffraction (``~lambda d / a``) blur."""
    a = np.asarray(pinhole_size, dtype=np.float64)
    if np.any(a <= 0):
        raise GeometryError("pinhole size must be positive")
    return np.sqrt((c_geom * a) ** 2 + (c_diff * wavelength * distance / a) ** 2)


def _grid_cells(extent, target_pitch):
    n = max(1, int(math.ceil(extent / target_pitch - 1e-9)))
    return n, extent / n


def _coverage(start, size, n, pitch):
    """Fraction of each of ``n`` cells covered by the interval [start, start+size)."""
    edges = np.arange(n + 1) * pitch
    lo = np.maximum(edges[:-1], start)
    hi = np.minimum(edges[1:], start + size)
    return np.clip(hi - lo, 0.0, None) / pitch


def mask_from_centers(spec: MaskSpec, centers) -> ApertureMask:
    """Render rectangular pinholes at ``centers`` (metres from the region corner).

    Cells partially covered by a pinhole get fractional transmission, so the
    open area is exact regardless of the grid.
    """
    ey, ex = spec.region_extent
    a = spec.pinhole_size
    pitch_target = spec.grid_pitch or a / 4
    ny, _ = _grid_cells(ey, pitch_target)
    pitch = ey / ny
    nx = max(1, int(round(ex / pitch)))
    if not math.isclose(nx * pitch, ex, rel_tol=1e-9):
        raise GeometryError("region extents must be commensurate with the grid pitch")
    trans = np.zeros((ny, nx))
    half = a / 2
    for cy, cx in np.asarray(centers, dtype=np.float64).reshape(-1, 2):
        if cy - half < -1e-12 or cx - half < -1e-12 or cy + half > ey + 1e-12 or cx + half > ex + 1e-12:
            raise PackingError(f"pinhole at ({cy:.3e}, {cx:.3e}) leaves the region")
        fy = _coverage(cy - half, a, ny, pitch)
        fx = _coverage(cx - half, a, nx, pitch)
        iy, ix = np.nonzero(fy)[0], np.nonzero(fx)[0]
        trans[iy[0]:iy[-1] + 1, ix[0]:ix[-1] + 1] += np.outer(fy[iy[0]:iy[-1] + 1], fx[ix[0]:ix[-1] + 1])
    if trans.max() > 1 + 1e-9:
        raise PackingError("pinholes overlap")
    np.clip(trans, 0.0, 1.0, out=trans)
    meta = {"spec": spec.to_dict(), "centers": np.asarray(centers).reshape(-1, 2).tolist()}
    return ApertureMask(trans, pitch, spec.thickness, meta)


def generate_coded_mask(spec: MaskSpec) -> ApertureMask:
    """Place ``pinhole_count`` non-overlapping rectangular pinholes at random.

    The region is divided into a lattice of slots at least one pinhole wide;
    distinct slots are drawn uniformly without replacement and each pinhole
    is jittered uniformly inside its slot. This packs up to
    ``floor(E/a)**2`` pinholes, far denser than sequential rejection sampling
    can reach. Deterministic for a given ``rng_seed``.
    """
    ey, ex = spec.region_extent
    a = spec.pinhole_size
    sy, sx = int(ey // a), int(ex // a)
    if spec.pinhole_count > sy * sx:
        raise PackingError(
            f"{spec.pinhole_count} pinholes of {a:.3e} m do not fit a {sy}x{sx} slot lattice"
        )
    rng = np.random.default_rng(spec.rng_seed)
    slots = rng.choice(sy * sx, size=spec.pinhole_count, replace=False)
    hy, hx = ey / sy, ex / sx
    jitter = rng.uniform(0.0, 1.0, size=(spec.pinhole_count, 2))
    row, col = np.divmod(slots, sx)
    cy = row * hy + a / 2 + jitter[:, 0] * (hy - a)
    cx = col * hx + a / 2 + jitter[:, 1] * (hx - a)
    return mask_from_centers(spec, np.stack([cy, cx], axis=1))


def _overlap_matrix(n_out, out_pitch, n_in, in_pitch, scale=1.0):
    """``M[i, j]`` = length of output cell ``i`` (mapped by 1/scale) inside input cell ``j``,
    in units of the input cell. Both grids are centred on the optical axis."""
    o_edges = (np.arange(n_out + 1) - n_out / 2) * out_pitch / scale
    i_edges = (np.arange(n_in + 1) - n_in / 2) * in_pitch
    lo = np.maximum(o_edges[:-1, None], i_edges[None, :-1])
    hi = np.minimum(o_edges[1:, None], i_edges[None, 1:])
    return np.clip(hi - lo, 0.0, None) / in_pitch


def _apply_separable(my, mx, values):
    if values.ndim == 2:
        return my @ values @ mx.T
    return np.einsum("ih,hwc,jw->ijc", my, values, mx)


def pinhole_project(scene: ImageGrid, geom) -> ImageGrid:
    """Pinhole image ``f(u) = I(u/z) / z**2`` on the scene's own grid.

    ``geom`` is a :class:`PinholeGeometry` (its ``similarity`` is used) or
    the factor ``z`` itself. Each output pixel integrates the scene over its
    pre-image, so flux that stays inside the grid is conserved exactly.
    No inversion is applied.
    """
    z = geom.similarity if isinstance(geom, PinholeGeometry) else float(geom)
    _positive("z", z)
    H, W = scene.values.shape[:2]
    my = _overlap_matrix(H, 1.0, H, 1.0, scale=z)
    mx = _overlap_matrix(W, 1.0, W, 1.0, scale=z)
    return ImageGrid(_apply_separable(my, mx, scene.values), scene.pixel_pitch)


def _gaussian_operator(n, sigma):
    if sigma <= 0:
        return np.eye(n)
    i = np.arange(n)
    g = np.exp(-0.5 * ((i[:, None] - i[None, :]) / sigma) ** 2)
    # column-normalised: every source pixel keeps its total weight
    return g / g.sum(axis=0, keepdims=True)


def psf_from_mask(mask: ApertureMask, geom: PinholeGeometry, shape, pixel_pitch) -> ImageGrid:
    """Point spread function on a sensor grid of ``shape`` and ``pixel_pitch``.

    The transmission is area-resampled to the sensor (centred), scaled so the
    PSF sums to the open fraction, then blurred by a Gaussian whose standard
    deviation is :func:`blur_width`. Both steps preserve the total.
    """
    _positive("pixel_pitch", pixel_pitch)
    H, W = shape
    ny, nx = mask.transmission.shape
    my = _overlap_matrix(H, pixel_pitch, ny, mask.grid_pitch)
    mx = _overlap_matrix(W, pixel_pitch, nx, mask.grid_pitch)
    ey, ex = mask.region_extent
    psf = my @ mask.transmission @ mx.T * (mask.grid_pitch ** 2 / (ey * ex))
    w = float(blur_width(geom.pinhole_size, geom.wavelength, geom.mask_sensor_distance,
                         geom.blur_geometric, geom.blur_diffraction))
    sigma = w / pixel_pitch
    psf = _gaussian_operator(H, sigma) @ psf @ _gaussian_operator(W, sigma).T
    return ImageGrid(psf, pixel_pitch)


def delta_psf(shape, pixel_pitch=1.0):
    psf = np.zeros(shape)
    psf[shape[0] // 2, shape[1] // 2] = 1.0
    return ImageGrid(psf, pixel_pitch)


def convolve_psf(values, psf, boundary="periodic"):
    """Convolve an image with a centred PSF (index ``(H//2, W//2)`` is the origin).

    ``boundary="periodic"`` is circular convolution; ``"linear"`` zero-pads
    and returns the centred ``same``-size crop.
    """
    values = np.asarray(values, dtype=np.float64)
    psf = np.asarray(psf, dtype=np.float64)
    H, W = psf.shape
    if values.shape[:2] != (H, W):
        raise GeometryError(f"image {values.shape[:2]} and PSF {psf.shape} differ in shape")
    img = values if values.ndim == 3 else values[..., None]
    if boundary == "periodic":
        K = np.fft.fft2(np.fft.ifftshift(psf))
        out = np.fft.ifft2(np.fft.fft2(img, axes=(0, 1)) * K[..., None], axes=(0, 1)).real
    elif boundary == "linear":
        s = (2 * H, 2 * W)
        K = np.fft.fft2(psf, s)
        full = np.fft.ifft2(np.fft.fft2(img, s, axes=(0, 1)) * K[..., None], axes=(0, 1)).real
        cy, cx = H // 2, W // 2
        out = full[cy:cy + H, cx:cx + W]
    else:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    return out if values.ndim == 3 else out[..., 0]


def sigma_for_snr(signal, snr_db):
    """Gaussian sigma giving ``snr_db`` relative to the RMS of ``signal``."""
    rms = float(np.sqrt(np.mean(np.square(signal))))
    return rms * 10.0 ** (-snr_db / 20.0)


def apply_noise(values, noise: NoiseSpec, rng=None):
    if noise is None or noise.is_noiseless:
        return values
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    out = values
    if noise.photons is not None:
        out = rng.poisson(np.clip(out, 0.0, None) * noise.photons) / noise.photons
    if noise.sigma:
        out = out + rng.normal(0.0, noise.sigma, size=out.shape)
    if noise.clip:
        out = np.clip(out, 0.0, None)
    return out


def thickness_vignetting(pinhole_size, thickness, angle):
    """Transmission of a square tunnel of width ``a`` and depth ``t`` at incidence ``angle``.

    Per axis the unobstructed fraction is ``clip(1 - t*tan|angle|/a, 0, 1)``.
    """
    a = float(pinhole_size)
    _positive("pinhole_size", a)
    if thickness < 0:
        raise GeometryError("thickness must be non-negative")
    theta = np.abs(np.asarray(angle, dtype=np.float64))
    if np.any(theta >= np.pi / 2):
        raise GeometryError("incidence angle must satisfy |angle| < pi/2")
    out = np.clip(1.0 - thickness * np.tan(theta) / a, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def vignetting_map(shape, pixel_pitch, pinhole_size, thickness, distance):
    """Field-dependent attenuation: the product of the per-axis tunnel factors
    for the incidence angle reaching each sensor pixel."""
    H, W = shape
    y = (np.arange(H) - H / 2 + 0.5) * pixel_pitch
    x = (np.arange(W) - W / 2 + 0.5) * pixel_pitch
    vy = thickness_vignetting(pinhole_size, thickness, np.arctan(np.abs(y) / distance))
    vx = thickness_vignetting(pinhole_size, thickness, np.arctan(np.abs(x) / distance))
    return np.outer(np.atleast_1d(vy), np.atleast_1d(vx))


def coded_capture(scene: ImageGrid, mask: ApertureMask | None, geom: PinholeGeometry,
                  noise: NoiseSpec | None = None, *, psf: ImageGrid | None = None,
                  boundary="periodic", rng=None) -> ImageGrid:
    """Simulated sensor image ``g = f * k (+ noise)``.

    ``f`` is the pinhole projection of ``scene``; ``k`` is the PSF (computed
    from ``mask`` at the scene's pitch unless passed in). A mask with
    non-zero thickness also applies :func:`vignetting_map` to ``f``.
    """
    H, W = scene.values.shape[:2]
    if psf is None:
        if mask is None:
            raise GeometryError("need a mask or an explicit psf")
        psf = psf_from_mask(mask, geom, (H, W), scene.pixel_pitch)
    if psf.values.shape != (H, W):
        raise GeometryError(f"PSF shape {psf.values.shape} does not match scene {(H, W)}")
    if not math.isclose(psf.pixel_pitch, scene.pixel_pitch, rel_tol=1e-9):
        raise GeometryError(f"PSF pitch {psf.pixel_pitch} differs from scene pitch {scene.pixel_pitch}")
    f = pinhole_project(scene, geom).values
    if mask is not None and mask.thickness > 0:
        vig = vignetting_map((H, W), scene.pixel_pitch, geom.pinhole_size, mask.thickness,
                             geom.mask_sensor_distance)
        f = f * (vig if f.ndim == 2 else vig[..., None])
    g = convolve_psf(f, psf.values, boundary)
    return ImageGrid(apply_noise(g, noise, rng), scene.pixel_pitch)
