"""Stochastic ensemble posterior sampler: coil maps estimated from the ACS
block, per-step random subsample branches denoised and data-consistency
corrected, coverage-weighted recombination, and the variance-exploding
ancestral transition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import ParamStore, csm_forward
from .ops import (
    CoilMaps,
    ComplexImage,
    Mask,
    MultiCoilKSpace,
    acs_mask,
    apply_adjoint,
    full_mask,
    ifft2c,
    make_mask,
    restrict,
)
from .phantom import derive_seed
from .training import NoiseSchedule, predict_measurement


@dataclass(frozen=True)
class SamplerConfig:
    ensemble_size: int = 10
    step_size: float = 2.0
    steps: int = 100
    acceleration: float = 4.0
    acs_width: int = 4
    seed: int = 0
    recalibrate_every: int = 0

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble size must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.steps < 2:
            raise ValueError("sampler needs at least 2 steps")


@dataclass(frozen=True)
class WeightMap:
    """Per-coordinate recombination weights: reciprocal branch coverage,
    clamped so uncovered coordinates keep weight 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0) or np.any(w > 1):
            raise ValueError("weights must lie in (0, 1]")
        object.__setattr__(self, "weights", w)


def estimate_csm_inference(y_acs: MultiCoilKSpace, phi: ParamStore) -> CoilMaps:
    """Predict normalized coil maps from the zero-filled ACS measurement."""
    if y_acs.mask.n_selected == 0 or y_acs.mask.acs_width == 0:
        raise ValueError("ACS measurement is empty")
    return csm_forward(ifft2c(y_acs.data), phi)


def draw_ensemble_masks(
    w: int, acceleration: float, acs_width: int, height: int, width: int, seed
) -> list[Mask]:
    """``w`` independent masks from the training mask law."""
    if w < 1:
        raise ValueError("ensemble size must be >= 1")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63, size=w)
    return [
        make_mask(height, width, acceleration, acs_width, int(s)) for s in seeds
    ]


def dc_update(
    branch: MultiCoilKSpace, y: MultiCoilKSpace, mask: Mask, step_size: float
) -> MultiCoilKSpace:
    """Data-consistency step on the overlap of the branch mask and the
    acquisition mask: relax the branch toward the observed values with the
    given step size (1 is exact replacement)."""
    overlap = (mask.cols & y.mask.cols).astype(bool)[None, None, :]
    updated = np.where(
        overlap, branch.data - step_size * (branch.data - y.data), branch.data
    )
    return MultiCoilKSpace(updated, branch.mask)


def build_weight_map(masks: list[Mask]) -> WeightMap:
    """Reciprocal of the per-coordinate coverage count, clamped below at 1."""
    if not masks:
        raise ValueError("need at least one mask")
    h, w = masks[0].height, masks[0].width
    counts = np.zeros((h, w), dtype=np.float64)
    for m in masks:
        counts += m.grid
    return WeightMap(1.0 / np.maximum(counts, 1.0))


def combine_weighted(
    branches: list[MultiCoilKSpace], masks: list[Mask], wmap: WeightMap
) -> MultiCoilKSpace:
    """Coverage-weighted sum of zero-filled branches on the full grid; the
    output mask is the union of the branch masks."""
    if len(branches) != len(masks):
        raise ValueError("one mask per branch required")
    shape = branches[0].data.shape
    acc = np.zeros(shape, dtype=branches[0].data.dtype)
    cols = np.zeros(masks[0].width, dtype=np.uint8)
    for branch, mask in zip(branches, masks):
        if branch.data.shape != shape:
            raise ValueError("branch shapes disagree")
        acc = acc + branch.data
        cols |= mask.cols
    out = acc * wmap.weights[None]
    union = Mask(
        masks[0].height, masks[0].width, cols, max(m.acs_width for m in masks)
    )
    return MultiCoilKSpace(out.astype(branches[0].data.dtype, copy=False), union)


def ancestral_step(
    z_t: MultiCoilKSpace,
    z_denoised: MultiCoilKSpace,
    sigma_t: float,
    sigma_prev: float,
    seed,
) -> MultiCoilKSpace:
    """Variance-exploding posterior transition toward the denoised estimate.

    With ``sigma_prev == 0`` the denoised estimate is returned exactly.
    """
    if sigma_prev >= sigma_t:
        raise ValueError("sigma_prev must be smaller than sigma_t")
    if sigma_prev < 0:
        raise ValueError("sigma_prev must be >= 0")
    ratio2 = (sigma_prev / sigma_t) ** 2
    rng = np.random.default_rng(seed)
    shape = z_t.data.shape
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    out = (
        z_denoised.data
        + ratio2 * (z_t.data - z_denoised.data)
        + sigma_prev * np.sqrt(1.0 - ratio2) * noise
    )
    return MultiCoilKSpace(
        out.astype(z_t.data.dtype, copy=False), full_mask(z_t.height, z_t.width)
    )


def reconstruct(
    y: MultiCoilKSpace,
    theta: ParamStore,
    phi: ParamStore,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    return_kspace: bool = False,
):
    """Full conditional sampling loop for one acquisition ``y``.

    Starts from pure noise at the top of the schedule; at every level draws
    ``ensemble_size`` random subsample branches of the current iterate,
    denoises and data-consistency-corrects each, recombines them with
    coverage weights, and takes one ancestral step.  Returns the coil
    combination of the final k-space iterate (optionally with that iterate).
    """
    if config.steps != schedule.steps:
        schedule = NoiseSchedule(schedule.sigma_min, schedule.sigma_max, config.steps)
    # the sampler runs in double precision; checkpoints store single
    y = MultiCoilKSpace(y.data.astype(np.complex128), y.mask)
    theta = theta.astype(np.float64)
    phi = phi.astype(np.float64)
    nc, h, w = y.data.shape
    sigmas = schedule.sigmas
    maps = estimate_csm_inference(
        restrict(y, acs_mask(h, w, y.mask.acs_width)), phi
    )
    rng = np.random.default_rng(derive_seed(config.seed, 0))
    z = sigmas[0] * (
        rng.standard_normal((nc, h, w)) + 1j * rng.standard_normal((nc, h, w))
    )
    z = MultiCoilKSpace(z.astype(np.complex128), full_mask(h, w))
    # one transition per pair of consecutive levels; the final iterate sits
    # at sigma_min, so columns a step's ensemble happens to miss keep their
    # (shrunk) content instead of being zeroed by the last recombination
    for i in range(len(sigmas) - 1):
        sigma_t = float(sigmas[i])
        sigma_prev = float(sigmas[i + 1])
        if (
            config.recalibrate_every > 0
            and i > 0
            and i % config.recalibrate_every == 0
        ):
            maps = estimate_csm_inference(
                restrict(y, acs_mask(h, w, y.mask.acs_width)), phi
            )
        masks = draw_ensemble_masks(
            config.ensemble_size,
            config.acceleration,
            config.acs_width,
            h,
            w,
            derive_seed(config.seed, i + 1, 0),
        )
        branches = []
        for mask in masks:
            branch = restrict(z, mask)
            pred = predict_measurement(branch, sigma_t, theta, maps)
            branches.append(dc_update(pred, y, mask, config.step_size))
        combined = combine_weighted(branches, masks, build_weight_map(masks))
        z = ancestral_step(
            z, combined, sigma_t, sigma_prev, derive_seed(config.seed, i + 1, 1)
        )
    image = apply_adjoint(z, maps)
    if return_kspace:
        return image, z
    return image
