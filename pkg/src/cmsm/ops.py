"""Complex image arithmetic, unitary centered FFTs, Cartesian column masks,
and the multi-coil forward/adjoint operators everything else builds on.

Conventions:
    * images are (H, W) complex arrays; coil stacks are (n_coils, H, W)
    * k-space lives on the full grid with an explicit column mask and is
      exactly zero at unsampled coordinates
    * FFTs are unitary (norm="ortho") and centered: the DC bin sits at
      (H // 2, W // 2)

All operations are pure functions; nothing here holds mutable state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

RSS_EPS = 1e-12


def _require_power_of_two(n: int, what: str) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"{what} must be a power of two, got {n}")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComplexImage:
    """A single complex-valued 2-D image."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or not np.iscomplexobj(data):
            raise ValueError("ComplexImage expects a 2-D complex array")
        if not np.all(np.isfinite(data)):
            raise ValueError("ComplexImage entries must be finite")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CoilMaps:
    """Stack of per-coil complex sensitivity maps, shape (n_coils, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or not np.iscomplexobj(data):
            raise ValueError("CoilMaps expects a (n_coils, H, W) complex array")
        if not np.all(np.isfinite(data)):
            raise ValueError("CoilMaps entries must be finite")
        object.__setattr__(self, "data", data)

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def rss(self) -> np.ndarray:
        """Per-pixel root-sum-of-squares magnitude across coils."""
        return np.sqrt(np.sum(np.abs(self.data) ** 2, axis=0))


@dataclass(frozen=True)
class Mask:
    """Cartesian column sampling pattern: readout rows are fully sampled,
    phase-encode columns are switched on or off.  The center ``acs_width``
    columns form the contiguous auto-calibration block and are always on.
    """

    height: int
    width: int
    cols: np.ndarray
    acs_width: int

    def __post_init__(self):
        cols = np.ascontiguousarray(np.asarray(self.cols, dtype=np.uint8))
        if cols.shape != (self.width,):
            raise ValueError("mask column vector must have shape (width,)")
        if not np.all((cols == 0) | (cols == 1)):
            raise ValueError("mask bits must be 0 or 1")
        if not 0 <= self.acs_width <= self.width:
            raise ValueError("acs_width out of range")
        lo, hi = _acs_span(self.width, self.acs_width)
        if not np.all(cols[lo:hi] == 1):
            raise ValueError("ACS columns must all be selected")
        object.__setattr__(self, "cols", cols)

    @property
    def n_selected(self) -> int:
        return int(self.cols.sum())

    @property
    def grid(self) -> np.ndarray:
        """Dense (H, W) 0/1 view of the mask (uint8, zero-copy broadcast)."""
        return np.broadcast_to(self.cols[None, :], (self.height, self.width))

    def acs_block(self) -> tuple[int, int]:
        return _acs_span(self.width, self.acs_width)


def _acs_span(width: int, acs_width: int) -> tuple[int, int]:
    lo = (width - acs_width) // 2
    return lo, lo + acs_width


def full_mask(height: int, width: int) -> Mask:
    return Mask(height, width, np.ones(width, dtype=np.uint8), width)


def acs_mask(height: int, width: int, acs_width: int) -> Mask:
    cols = np.zeros(width, dtype=np.uint8)
    lo, hi = _acs_span(width, acs_width)
    cols[lo:hi] = 1
    return Mask(height, width, cols, acs_width)


@dataclass(frozen=True)
class MultiCoilKSpace:
    """Full-grid multi-coil k-space with its occupancy mask.  Entries at
    unselected columns are exactly zero."""

    data: np.ndarray
    mask: Mask

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or not np.iscomplexobj(data):
            raise ValueError("MultiCoilKSpace expects a (n_coils, H, W) complex array")
        if data.shape[1:] != (self.mask.height, self.mask.width):
            raise ValueError("k-space grid does not match its mask")
        off = self.mask.cols == 0
        if off.any() and np.any(data[:, :, off] != 0):
            raise ValueError("k-space must be exactly zero off the mask")
        object.__setattr__(self, "data", data)

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# transforms and operators
# ---------------------------------------------------------------------------


def fft2c(arr: np.ndarray) -> np.ndarray:
    """Unitary centered 2-D FFT over the trailing two axes."""
    _require_power_of_two(arr.shape[-2], "height")
    _require_power_of_two(arr.shape[-1], "width")
    shifted = np.fft.ifftshift(arr, axes=(-2, -1))
    out = np.fft.fft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(out, axes=(-2, -1))


def ifft2c(arr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    _require_power_of_two(arr.shape[-2], "height")
    _require_power_of_two(arr.shape[-1], "width")
    shifted = np.fft.ifftshift(arr, axes=(-2, -1))
    out = np.fft.ifft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(out, axes=(-2, -1))


def fft2_unitary(img: ComplexImage) -> ComplexImage:
    return ComplexImage(fft2c(img.data))


def ifft2_unitary(img: ComplexImage) -> ComplexImage:
    return ComplexImage(ifft2c(img.data))


def apply_forward(x: ComplexImage, maps: CoilMaps, mask: Mask) -> MultiCoilKSpace:
    """Coil-weighted, Fourier-transformed, column-masked acquisition of ``x``.

    Per coil k: ``mask * F(C_k * x)``.  Requires ``maps`` to be RSS
    normalized for the adjoint round-trip identities to hold.
    """
    if maps.data.shape[1:] != x.data.shape:
        raise ValueError("coil maps and image shapes disagree")
    if (mask.height, mask.width) != x.data.shape:
        raise ValueError("mask and image shapes disagree")
    k = fft2c(maps.data * x.data[None, :, :])
    k = k * mask.grid[None, :, :]
    return MultiCoilKSpace(k, mask)


def apply_adjoint(y: MultiCoilKSpace, maps: CoilMaps) -> ComplexImage:
    """Adjoint of :func:`apply_forward`: per-coil inverse FFT followed by a
    conjugate-map coil combination."""
    if maps.data.shape != y.data.shape:
        raise ValueError("coil maps and k-space shapes disagree")
    imgs = ifft2c(y.data)
    return ComplexImage(np.sum(np.conj(maps.data) * imgs, axis=0))


class NormalizedMaps(NamedTuple):
    maps: CoilMaps
    clamped: int


def rss_normalize(maps: CoilMaps) -> NormalizedMaps:
    """Divide every coil by the per-pixel RSS magnitude.

    Pixels with RSS below ``RSS_EPS`` are divided by the clamp value instead;
    the number of clamped pixels is reported in the result.
    """
    rss = maps.rss()
    clamped = int(np.count_nonzero(rss < RSS_EPS))
    denom = np.maximum(rss, RSS_EPS)
    return NormalizedMaps(CoilMaps(maps.data / denom[None, :, :]), clamped)


def make_mask(
    height: int,
    width: int,
    acceleration: float,
    acs_width: int,
    seed,
) -> Mask:
    """Random column mask: the ACS block is always on and the remaining
    columns are selected independently with the probability that makes the
    expected total selected fraction equal ``1 / acceleration``.

    If the ACS block alone already exceeds that fraction, only the ACS is
    selected and a warning is issued.
    """
    if acs_width > width:
        raise ValueError("acs_width exceeds mask width")
    if acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    target = width / acceleration
    cols = np.zeros(width, dtype=np.uint8)
    lo, hi = _acs_span(width, acs_width)
    cols[lo:hi] = 1
    rest = width - acs_width
    if target < acs_width:
        warnings.warn(
            "ACS block alone exceeds the requested sampling budget; "
            "selecting ACS columns only",
            UserWarning,
            stacklevel=2,
        )
        prob = 0.0
    else:
        prob = (target - acs_width) / rest if rest > 0 else 0.0
    if rest > 0 and prob > 0.0:
        rng = np.random.default_rng(seed)
        draw = rng.random(rest) < prob
        outside = np.concatenate([np.arange(0, lo), np.arange(hi, width)])
        cols[outside] = draw.astype(np.uint8)
    cols[lo:hi] = 1
    return Mask(height, width, cols, acs_width)


def restrict(y: MultiCoilKSpace, mask: Mask) -> MultiCoilKSpace:
    """Keep entries selected by both ``y``'s mask and ``mask``; the output
    mask is the intersection."""
    if (mask.height, mask.width) != (y.height, y.width):
        raise ValueError("mask and k-space grids disagree")
    cols = (y.mask.cols & mask.cols).astype(np.uint8)
    out_mask = Mask(y.height, y.width, cols, min(y.mask.acs_width, mask.acs_width))
    return MultiCoilKSpace(y.data * out_mask.grid[None, :, :], out_mask)
