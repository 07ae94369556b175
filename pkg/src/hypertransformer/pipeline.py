"""Data preparation: simulated sensor degradation, bicubic resampling, RGB synthesis.

All functions here operate on plain ``numpy`` arrays laid out band-major
(``[C, H, W]``); nothing in this module needs gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_SIGMA = 2.0
KERNEL_SIZE = 8
KEYS_A = -0.5

# blue, green, red centre bands for Pavia Center (102 bands)
PAVIA_RGB_BANDS = (10, 30, 60)
PAVIA_BANDS = 102
PAVIA_RESPONSE_SIGMA = 5.0


@dataclass
class HsiCube:
    data: np.ndarray
    wavelength_ids: list[int] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise DimensionError(f"HsiCube needs [C,H,W] data with C >= 1, got {self.data.shape}")
        if self.wavelength_ids is not None and len(self.wavelength_ids) != self.bands:
            raise ContractError("wavelength_ids must have one entry per band")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class PanImage:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or self.data.shape[0] != 1:
            raise DimensionError(f"PanImage needs [1,H,W] data, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SpectralResponse:
    """Gaussian band-weighting curve, in band-index units."""

    center_band: int
    sigma_bands: float

    def weights(self, n_bands: int) -> np.ndarray:
        if not 0 <= self.center_band < n_bands:
            raise ContractError(f"centre band {self.center_band} outside [0, {n_bands})")
        if self.sigma_bands < 0:
            raise ContractError("sigma_bands must be non-negative")
        w = np.zeros(n_bands)
        if self.sigma_bands == 0:
            w[self.center_band] = 1.0
            return w
        idx = np.arange(n_bands)
        w = np.exp(-0.5 * ((idx - self.center_band) / self.sigma_bands) ** 2)
        return w / w.sum()


def default_responses(n_bands: int) -> tuple[SpectralResponse, SpectralResponse, SpectralResponse]:
    """Blue/green/red responses; Pavia's centres, rescaled when the cube has fewer bands."""
    if n_bands >= PAVIA_BANDS:
        return tuple(SpectralResponse(c, PAVIA_RESPONSE_SIGMA) for c in PAVIA_RGB_BANDS)
    scale = (n_bands - 1) / (PAVIA_BANDS - 1)
    sigma = PAVIA_RESPONSE_SIGMA * n_bands / PAVIA_BANDS
    return tuple(SpectralResponse(int(round(c * scale)), sigma) for c in PAVIA_RGB_BANDS)


def rgb_weights(responses, n_bands: int) -> np.ndarray:
    """Stack the three response curves into a ``[3, C]`` mixing matrix."""
    if len(responses) != 3:
        raise ContractError("exactly three responses (blue, green, red) are required")
    return np.stack([r.weights(n_bands) for r in responses])


def synthesize_rgb(x, responses=None) -> np.ndarray:
    """Response-weighted band averages, returned in (R, G, B) channel order."""
    data = x.data if isinstance(x, HsiCube) else np.asarray(x)
    c, h, w = data.shape
    responses = default_responses(c) if responses is None else responses
    mix = rgb_weights(responses, c)[::-1]
    return (mix @ data.reshape(c, -1)).reshape(3, h, w)


# -- Wald degradation ----------------------------------------------------------
def gaussian_kernel(size: int = KERNEL_SIZE, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Normalized ``size x size`` Gaussian, centred between the middle taps for even sizes."""
    if size < 1 or sigma <= 0:
        raise ContractError("kernel size must be >= 1 and sigma > 0")
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _filter_axis(a: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    # out[i] = sum_t taps[t] * a[i - lo + t], half-sample symmetric borders
    size = len(taps)
    lo = size // 2 - 1
    hi = size - 1 - lo
    pad = [(0, 0)] * a.ndim
    pad[axis] = (lo, hi)
    ap = np.pad(a, pad, mode="symmetric")
    n = a.shape[axis]
    out = np.zeros_like(a, dtype=np.float64)
    for t, weight in enumerate(taps):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(t, t + n)
        out += weight * ap[tuple(sl)]
    return out


def gaussian_blur(data: np.ndarray, sigma: float = DEFAULT_SIGMA, size: int = KERNEL_SIZE) -> np.ndarray:
    taps = _gaussian_1d(size, sigma)
    return _filter_axis(_filter_axis(np.asarray(data, dtype=np.float64), taps, -2), taps, -1)


def walds_degrade(x_ref, scale: int = 4, sigma: float = DEFAULT_SIGMA, size: int = KERNEL_SIZE):
    """Blur every band with an 8x8 Gaussian and keep one pixel per ``scale`` block.

    The kept phase (offset ``scale // 2 - 1``) puts each sample at the centre
    of its block when ``size == 2 * scale``.
    """
    cube = x_ref if isinstance(x_ref, HsiCube) else HsiCube(x_ref)
    _, h, w = cube.data.shape
    if scale < 1 or h % scale or w % scale:
        raise DimensionError(f"spatial size {h}x{w} is not divisible by scale {scale}")
    blurred = gaussian_blur(cube.data, sigma, size)
    phase = scale // 2 - 1 if scale > 1 else 0
    lr = blurred[:, phase::scale, phase::scale]
    return HsiCube(np.ascontiguousarray(lr), cube.wavelength_ids)


# -- bicubic resampling -----------------------------------------------------------
def keys_kernel(t, a: float = KEYS_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix with pixel-centre alignment.

    Downsampling widens the kernel by the inverse scale (antialiasing);
    out-of-range taps are folded onto the nearest edge sample.
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    centres = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centres - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    w = stretch * keys_kernel(stretch * (centres[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    m = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(m, (rows, idx.ravel()), w.ravel())
    return m


def _target_size(n: int, factor: Fraction) -> int:
    target = n * factor
    if target.denominator != 1 or target <= 0:
        raise DimensionError(f"size {n} times factor {factor} is not a positive integer")
    return int(target)


def bicubic_resample(img, factor) -> np.ndarray:
    """Separable Keys-cubic (a = -0.5) resize of ``[C, H, W]`` by a rational factor."""
    data = np.asarray(img, dtype=np.float64)
    if data.ndim != 3:
        raise DimensionError(f"bicubic_resample expects [C,H,W], got {data.shape}")
    factor = Fraction(factor).limit_denominator(1 << 16)
    if factor <= 0:
        raise DimensionError("resampling factor must be positive")
    c, h, w = data.shape
    ho, wo = _target_size(h, factor), _target_size(w, factor)
    if factor == 1:
        return data.copy()
    mh = resize_matrix(h, ho)
    mw = resize_matrix(w, wo)
    return np.einsum("oh,chw,pw->cop", mh, data, mw, optimize=True)


def make_pan_downup(p, scale: int = 4) -> np.ndarray:
    """PAN bicubically reduced then enlarged by ``scale``; same shape as the input."""
    data = p.data if isinstance(p, PanImage) else np.asarray(p)
    if data.ndim == 2:
        data = data[None]
    _, h, w = data.shape
    if h % scale or w % scale:
        raise DimensionError(f"PAN size {h}x{w} is not divisible by {scale}")
    return bicubic_resample(bicubic_resample(data, Fraction(1, scale)), scale)


def synthesize_pan(x_ref, band_range: tuple[int, int] | None = None) -> PanImage:
    """Uniform average over ``band_range`` (all bands by default)."""
    data = x_ref.data if isinstance(x_ref, HsiCube) else np.asarray(x_ref)
    lo, hi = (0, data.shape[0]) if band_range is None else band_range
    if not 0 <= lo < hi <= data.shape[0]:
        raise ContractError(f"band range {band_range} invalid for {data.shape[0]} bands")
    return PanImage(data[lo:hi].mean(axis=0, keepdims=True))


def normalize_cube(data: np.ndarray) -> np.ndarray:
    """Min-max scale a whole cube to [0, 1]; constant cubes map to zeros."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def laplacian_energy(img: np.ndarray) -> float:
    """Sum of squared 5-point Laplacian responses over interior pixels."""
    a = np.asarray(img, dtype=np.float64)
    lap = (
        a[..., 1:-1, :-2] + a[..., 1:-1, 2:] + a[..., :-2, 1:-1] + a[..., 2:, 1:-1]
        - 4 * a[..., 1:-1, 1:-1]
    )
    return float(np.sum(lap**2))


# -- synthetic data ------------------------------------------------------------------
@dataclass
class Patch:
    x_ref: HsiCube
    pan: PanImage
    lr: HsiCube
    name: str = field(default="")


def _smooth_field(rng: np.random.Generator, h: int, w: int, octaves: int = 4) -> np.ndarray:
    out = np.zeros((h, w))
    for o in range(octaves):
        cells = 2 ** (o + 1)
        coarse = rng.standard_normal((cells, cells))
        out += resize_matrix(cells, h) @ coarse @ resize_matrix(cells, w).T / (o + 1)
    return out


def synth_cube(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    """Smooth spectral ramps mixed by spatial textures, plus band-correlated noise."""
    n_end = 3
    bands = np.linspace(0.0, 1.0, c)
    spectra = []
    for _ in range(n_end):
        slope, bump, width = rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(0.1, 0.4)
        spectra.append(0.5 + 0.3 * slope * (bands - 0.5) + 0.4 * np.exp(-0.5 * ((bands - bump) / width) ** 2))
    spectra = np.stack(spectra)  # [n_end, C]
    abund = np.stack([_smooth_field(rng, h, w) for _ in range(n_end)])
    yy, xx = np.mgrid[0:h, 0:w]
    freq = rng.uniform(0.15, 0.6, size=2)
    stripes = np.sin(freq[0] * xx + freq[1] * yy + rng.uniform(0, 2 * np.pi))
    abund[0] += 0.5 * stripes
    abund = np.exp(abund - abund.max(axis=0, keepdims=True))
    abund /= abund.sum(axis=0, keepdims=True)
    cube = np.einsum("ec,ehw->chw", spectra, abund)
    band_noise = rng.standard_normal((h, w))
    cube += 0.01 * band_noise[None] * (1 + bands[:, None, None])
    return normalize_cube(cube)


def synth_dataset(seed: int, n_patches: int, c: int, h: int, w: int, scale: int = 4,
                  sigma: float = DEFAULT_SIGMA) -> list[Patch]:
    """Deterministic synthetic (reference, PAN, LR) triplets."""
    if h % scale or w % scale:
        raise DimensionError(f"patch size {h}x{w} is not divisible by {scale}")
    rng = np.random.default_rng(seed)
    patches = []
    for i in range(n_patches):
        ref = HsiCube(synth_cube(rng, c, h, w))
        patches.append(Patch(ref, synthesize_pan(ref), walds_degrade(ref, scale, sigma), f"patch{i:03d}"))
    return patches
