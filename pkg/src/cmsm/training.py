"""Self-supervised joint training of the measurement denoiser and the
coil-map predictor from undersampled k-space only: geometric noise schedule,
masked measurement-matching loss plus a weighted map-smoothness penalty, and
the deterministic Adam loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .nets import AdamState, ConvNetSpec, ParamStore, adam_step
from .ops import CoilMaps, MultiCoilKSpace, ifft2c
from .phantom import DatasetRecord, derive_seed


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise levels for sampling: index 0 is the noisiest."""

    sigma_min: float = 0.01
    sigma_max: float = 10.0
    steps: int = 100

    def __post_init__(self):
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.sigma_max < self.sigma_min:
            raise ValueError("sigma_max must be >= sigma_min")
        if self.steps < 2:
            raise ValueError("schedule needs at least 2 steps")

    @property
    def sigmas(self) -> np.ndarray:
        """Strictly decreasing levels from sigma_max down to sigma_min."""
        return np.geomspace(self.sigma_max, self.sigma_min, self.steps)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    learning_rate: float = 1e-3
    batch_size: int = 1
    smoothness_weight: float = 1000.0
    mask_acceleration: float = 4.0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.smoothness_weight < 0:
            raise ValueError("smoothness weight must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass(frozen=True)
class TrainingSample:
    """Restricted view of a dataset record: only the undersampled
    measurement and its ACS block.  The training loop accepts nothing else,
    which is what keeps ground truth and true maps out of reach."""

    sample: MultiCoilKSpace
    sample_acs: MultiCoilKSpace

    @classmethod
    def from_record(cls, record: DatasetRecord) -> "TrainingSample":
        return cls(record.sample, record.sample_acs)


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, sigma: float, record_index: int):
        super().__init__(
            f"non-finite loss at iteration {iteration} "
            f"(sigma={sigma:.6g}, record={record_index})"
        )
        self.iteration = iteration
        self.sigma = sigma
        self.record_index = record_index


def sample_sigma(schedule: NoiseSchedule, seed) -> float:
    """Log-uniform draw from [sigma_min, sigma_max]."""
    rng = np.random.default_rng(seed)
    lo, hi = math.log(schedule.sigma_min), math.log(schedule.sigma_max)
    return float(math.exp(rng.uniform(lo, hi)))


def perturb(sample: MultiCoilKSpace, sigma: float, seed) -> MultiCoilKSpace:
    """Add circular complex Gaussian noise of per-component std ``sigma`` on
    the sampled coordinates only; off-mask zeros are preserved."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    shape = sample.data.shape
    noise = sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    noise = noise.astype(sample.data.dtype, copy=False)
    data = sample.data + noise * sample.mask.grid[None]
    return MultiCoilKSpace(data, sample.mask)


def predict_graph(
    theta_leaves: dict[str, ad.Var],
    theta_spec: ConvNetSpec,
    maps_var: ad.Var,
    noisy: MultiCoilKSpace,
    sigma: float,
    tape: ad.Tape,
) -> ad.Var:
    """Taped measurement prediction: coil-combine the noisy measurement with
    the (possibly learned) maps, denoise in the image domain, re-project per
    coil, and restrict to the measurement's mask."""
    n_coils = noisy.n_coils
    ks = tape.constant(noisy.data)
    coil_imgs = ad.ifft2c_v(ks)
    combined = ad.sum0(ad.mul(ad.conj(maps_var), coil_imgs))
    denoised = nets.denoiser_graph(theta_leaves, theta_spec, combined, sigma, tape)
    reproj = ad.fft2c_v(ad.mul(maps_var, ad.broadcast0(denoised, n_coils)))
    return ad.const_mul(reproj, noisy.mask.grid[None])


def predict_measurement(
    noisy: MultiCoilKSpace, sigma: float, theta: ParamStore, maps: CoilMaps
) -> MultiCoilKSpace:
    """Plain wrapper around :func:`predict_graph` for fixed maps."""
    if maps.data.shape != noisy.data.shape:
        raise ValueError("maps and measurement shapes disagree")
    spec = nets.spec_from_store(theta, residual=True)
    tape = ad.Tape()
    out = predict_graph(
        theta.leaves(tape), spec, tape.constant(maps.data), noisy, sigma, tape
    )
    return MultiCoilKSpace(out.value, noisy.mask)


def _selected_entries(sample: MultiCoilKSpace) -> int:
    n = sample.n_coils * sample.height * sample.mask.n_selected
    if n == 0:
        raise ValueError("measurement mask selects nothing")
    return n


def msm_loss(
    sample: MultiCoilKSpace,
    noisy: MultiCoilKSpace,
    sigma: float,
    theta: ParamStore,
    maps: CoilMaps,
) -> float:
    """Mean squared error between the measurement and its prediction over
    the sampled coordinates, per selected complex entry."""
    pred = predict_measurement(noisy, sigma, theta, maps)
    diff = pred.data - sample.data
    return float(np.sum(np.abs(diff) ** 2) / _selected_entries(sample))


def csm_smoothness_loss(maps: CoilMaps) -> float:
    """Forward-difference gradient penalty per pixel and coil."""
    d = maps.data
    dh = d[:, 1:, :] - d[:, :-1, :]
    dw = d[:, :, 1:] - d[:, :, :-1]
    return float((np.sum(np.abs(dh) ** 2) + np.sum(np.abs(dw) ** 2)) / d.size)


class LossParts(NamedTuple):
    total: float
    msm: float
    smoothness: float


def _loss_graph(
    tape: ad.Tape,
    theta: ParamStore,
    theta_spec: ConvNetSpec,
    phi: ParamStore,
    phi_spec: ConvNetSpec,
    sample: MultiCoilKSpace,
    noisy: MultiCoilKSpace,
    sample_acs: MultiCoilKSpace,
    sigma: float,
    smoothness_weight: float,
):
    theta_leaves = theta.leaves(tape)
    phi_leaves = phi.leaves(tape)
    acs_images = tape.constant(ifft2c(sample_acs.data))
    maps_var = nets.csm_graph(phi_leaves, phi_spec, acs_images)
    pred = predict_graph(theta_leaves, theta_spec, maps_var, noisy, sigma, tape)
    resid = ad.sub(pred, tape.constant(sample.data))
    msm = ad.sqnorm_mean(resid, _selected_entries(sample))
    pix = maps_var.value.size
    pen = ad.add(
        ad.sqnorm_mean(ad.diff_rows(maps_var), pix),
        ad.sqnorm_mean(ad.diff_cols(maps_var), pix),
    )
    total = ad.add(msm, ad.scale(pen, smoothness_weight))
    return total, msm, pen, theta_leaves, phi_leaves


def total_loss(
    sample: MultiCoilKSpace,
    noisy: MultiCoilKSpace,
    sample_acs: MultiCoilKSpace,
    sigma: float,
    theta: ParamStore,
    phi: ParamStore,
    smoothness_weight: float,
) -> LossParts:
    """Joint objective value: masked measurement MSE with maps predicted
    from the ACS block, plus the weighted smoothness penalty on those maps."""
    if smoothness_weight < 0:
        raise ValueError("smoothness weight must be >= 0")
    tape = ad.Tape()
    total, msm, pen, _, _ = _loss_graph(
        tape,
        theta,
        nets.spec_from_store(theta, residual=True),
        phi,
        nets.spec_from_store(phi, residual=False),
        sample,
        noisy,
        sample_acs,
        sigma,
        smoothness_weight,
    )
    return LossParts(float(total.value), float(msm.value), float(pen.value))


class LogRow(NamedTuple):
    iteration: int
    msm_loss: float
    csm_loss: float
    total_loss: float
    sigma: float


def train(
    samples: Sequence[TrainingSample],
    config: TrainConfig,
    theta: ParamStore | None = None,
    phi: ParamStore | None = None,
    n_coils: int | None = None,
    start_iteration: int = 0,
    net_width: int = 32,
    checkpoint_cb: Callable[[int, ParamStore, ParamStore], None] | None = None,
    checkpoint_every: int = 0,
) -> tuple[ParamStore, ParamStore, list[LogRow]]:
    """Run the joint Adam loop over restricted training views.

    Stores are created (seeded, float32) when not resuming.  Raises
    :class:`NonFiniteLossError` with the failing iteration, noise level, and
    record index if the loss stops being finite.
    """
    if len(samples) == 0:
        raise ValueError("training needs a nonempty dataset")
    for s in samples:
        if not isinstance(s, TrainingSample):
            raise TypeError(
                "train() accepts TrainingSample views only; convert records "
                "with TrainingSample.from_record"
            )
    if n_coils is None:
        n_coils = samples[0].sample.n_coils
    if theta is None:
        theta = nets.init_params(nets.denoiser_spec(net_width), derive_seed(config.seed, 0))
    if phi is None:
        phi = nets.init_params(
            nets.csm_spec(n_coils, net_width), derive_seed(config.seed, 1)
        )
    theta_spec = nets.spec_from_store(theta, residual=True)
    phi_spec = nets.spec_from_store(phi, residual=False)
    adam_theta = AdamState.for_store(theta, config.learning_rate)
    adam_phi = AdamState.for_store(phi, config.learning_rate)

    log: list[LogRow] = []
    end = start_iteration + config.iterations
    for it in range(start_iteration, end):
        theta.zero_grad()
        phi.zero_grad()
        tot = msm = pen = 0.0
        sigma = 0.0
        idx = -1
        for b in range(config.batch_size):
            rng = np.random.default_rng(derive_seed(config.seed, it, b, 0))
            idx = int(rng.integers(0, len(samples)))
            sigma = sample_sigma(config.schedule, derive_seed(config.seed, it, b, 1))
            view = samples[idx]
            noisy = perturb(view.sample, sigma, derive_seed(config.seed, it, b, 2))
            tape = ad.Tape()
            total, msm_v, pen_v, th_leaves, ph_leaves = _loss_graph(
                tape,
                theta,
                theta_spec,
                phi,
                phi_spec,
                view.sample,
                noisy,
                view.sample_acs,
                sigma,
                config.smoothness_weight,
            )
            scaled = ad.scale(total, 1.0 / config.batch_size)
            ad.backward(scaled)
            theta.accumulate_grads(th_leaves)
            phi.accumulate_grads(ph_leaves)
            tot += float(total.value) / config.batch_size
            msm += float(msm_v.value) / config.batch_size
            pen += float(pen_v.value) / config.batch_size
        if not math.isfinite(tot):
            raise NonFiniteLossError(it, sigma, idx)
        adam_step(theta, adam_theta)
        adam_step(phi, adam_phi)
        if (it - start_iteration) % config.log_every == 0 or it == end - 1:
            log.append(LogRow(it, msm, pen, tot, sigma))
        if checkpoint_cb is not None and checkpoint_every > 0:
            if (it - start_iteration + 1) % checkpoint_every == 0:
                checkpoint_cb(it + 1, theta, phi)
    return theta, phi, log
