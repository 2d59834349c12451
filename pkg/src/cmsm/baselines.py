"""Reconstruction baselines (zero-filled adjoint, total-variation proximal
gradient) and magnitude-domain image quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import CoilMaps, ComplexImage, MultiCoilKSpace, apply_adjoint, apply_forward


class TVDivergenceError(RuntimeError):
    pass


def zero_filled(y: MultiCoilKSpace, maps: CoilMaps) -> ComplexImage:
    """Adjoint of the zero-filled measurements; the no-prior baseline."""
    return apply_adjoint(y, maps)


def _grad2(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy = np.zeros_like(u)
    gx = np.zeros_like(u)
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    return gy, gx


def _div2(py: np.ndarray, px: np.ndarray) -> np.ndarray:
    out = np.zeros_like(py)
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    return out


def tv_value(u: np.ndarray) -> float:
    gy, gx = _grad2(u)
    return float(np.sum(np.sqrt(np.abs(gy) ** 2 + np.abs(gx) ** 2)))


def _tv_prox(u, weight, inner, py, px):
    """Isotropic TV proximal map via Chambolle's dual projection, warm
    started with the dual fields of the previous outer iteration."""
    if weight <= 0:
        return u, py, px
    tau = 0.249
    for _ in range(inner):
        gy, gx = _grad2(_div2(py, px) - u / weight)
        norm = np.sqrt(np.abs(gy) ** 2 + np.abs(gx) ** 2)
        py = (py - tau * gy) / (1.0 + tau * norm)
        px = (px - tau * gx) / (1.0 + tau * norm)
    return u - weight * _div2(py, px), py, px


def tv_reconstruct(
    y: MultiCoilKSpace,
    maps: CoilMaps,
    tv_weight: float,
    iterations: int = 200,
    step: float = 1.0,
    inner: int = 10,
    tol: float = 1e-6,
) -> ComplexImage:
    """Proximal gradient on 0.5*||y - A x||^2 + tv_weight * TV(x).

    The data term steps through the forward/adjoint pair; the TV proximal
    uses a fixed number of Chambolle inner iterations with warm-started dual
    variables.  Aborts if the objective grows for 10 consecutive outer
    iterations.
    """
    if tv_weight <= 0:
        raise ValueError("tv_weight must be positive")
    ydata = y.data.astype(np.complex128)
    y128 = MultiCoilKSpace(ydata, y.mask)
    maps = CoilMaps(maps.data.astype(np.complex128))
    x = np.zeros((y.height, y.width), dtype=np.complex128)
    py = np.zeros_like(x)
    px = np.zeros_like(x)

    def objective(u: np.ndarray) -> float:
        resid = apply_forward(ComplexImage(u), maps, y.mask).data - ydata
        return 0.5 * float(np.sum(np.abs(resid) ** 2)) + tv_weight * tv_value(u)

    prev_obj = objective(x)
    bad_streak = 0
    for _ in range(iterations):
        resid = apply_forward(ComplexImage(x), maps, y.mask).data - ydata
        grad = apply_adjoint(MultiCoilKSpace(resid, y.mask), maps).data
        x_new, py, px = _tv_prox(x - step * grad, step * tv_weight, inner, py, px)
        obj = objective(x_new)
        if obj > prev_obj + 1e-10:
            bad_streak += 1
            if bad_streak >= 10:
                raise TVDivergenceError(
                    f"objective increased for {bad_streak} consecutive steps "
                    f"(last {prev_obj:.6g} -> {obj:.6g}); reduce the step size"
                )
        else:
            bad_streak = 0
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-30)
        x = x_new
        prev_obj = min(prev_obj, obj)
        if change < tol:
            break
    return ComplexImage(x)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def psnr(reference: ComplexImage, estimate: ComplexImage) -> float:
    """Peak signal-to-noise ratio in dB on magnitude images, with the peak
    taken from the reference.  Identical images report infinity."""
    ref = np.abs(reference.data).astype(np.float64)
    est = np.abs(estimate.data).astype(np.float64)
    if ref.shape != est.shape:
        raise ValueError("image shapes disagree")
    peak = ref.max()
    if peak == 0:
        raise ValueError("reference image is identically zero")
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    views = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(views, window, axes=([2, 3], [0, 1]))


def ssim(
    reference: ComplexImage,
    estimate: ComplexImage,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Single-scale SSIM on magnitude images: Gaussian window, dynamic range
    from the reference maximum, mean over fully interior windows."""
    ref = np.abs(reference.data).astype(np.float64)
    est = np.abs(estimate.data).astype(np.float64)
    if ref.shape != est.shape:
        raise ValueError("image shapes disagree")
    if min(ref.shape) < window_size:
        raise ValueError("image smaller than the SSIM window")
    window = _gaussian_window(window_size, sigma)
    dyn = ref.max()
    c1 = (k1 * dyn) ** 2
    c2 = (k2 * dyn) ** 2
    mu_x = _windowed_mean(ref, window)
    mu_y = _windowed_mean(est, window)
    xx = _windowed_mean(ref * ref, window) - mu_x**2
    yy = _windowed_mean(est * est, window) - mu_y**2
    xy = _windowed_mean(ref * est, window) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricReport:
    method: str
    acceleration: float
    seed: int
    psnr_db: float
    ssim: float

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("ssim out of range")

    def to_row(self) -> list[str]:
        return [
            self.method,
            f"{self.acceleration:g}",
            str(self.seed),
            "inf" if math.isinf(self.psnr_db) else f"{self.psnr_db:.6f}",
            f"{self.ssim:.6f}",
        ]

    @classmethod
    def from_row(cls, row: list[str]) -> "MetricReport":
        return cls(row[0], float(row[1]), int(row[2]), float(row[3]), float(row[4]))


METRIC_CSV_HEADER = ["method", "acceleration", "seed", "psnr_db", "ssim"]
