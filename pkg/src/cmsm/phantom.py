"""Synthetic multi-coil data: random ellipse phantoms with a smooth phase
field, border-lobe coil maps, noisy fully sampled k-space, training
subsamples, and the CMSD dataset container."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fileio import Reader, atomic_write_bytes
from .ops import (
    CoilMaps,
    ComplexImage,
    Mask,
    MultiCoilKSpace,
    _require_power_of_two,
    acs_mask,
    apply_forward,
    full_mask,
    make_mask,
    restrict,
    rss_normalize,
)

DATASET_MAGIC = b"CMSD"
DATASET_VERSION = 1

# amplitude (radians) of the smooth random phase field multiplied onto phantoms
PHASE_AMPLITUDE = 1.0


def derive_seed(*keys) -> np.random.SeedSequence:
    """Deterministic child seed from an integer tuple; pass to any generator
    that accepts a seed."""
    return np.random.SeedSequence(tuple(int(k) for k in keys))


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 32
    width: int = 32
    n_ellipses: int = 6
    intensity_min: float = 0.3
    intensity_max: float = 1.0
    radius_min: float = 0.15
    radius_max: float = 0.55
    phase_scale: float = 8.0

    def __post_init__(self):
        _require_power_of_two(self.height, "phantom height")
        _require_power_of_two(self.width, "phantom width")
        if self.n_ellipses < 1:
            raise ValueError("n_ellipses must be >= 1")
        if self.intensity_max < self.intensity_min:
            raise ValueError("empty intensity range")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError("bad ellipse radius range")


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def gen_phantom(spec: PhantomSpec, seed) -> ComplexImage:
    """Sum of random anti-aliased ellipses times a smooth random phase field,
    magnitude normalized to a peak of 1.  Pure function of the seed."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    ys = np.linspace(-1.0, 1.0, h, endpoint=False) + 1.0 / h
    xs = np.linspace(-1.0, 1.0, w, endpoint=False) + 1.0 / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    mag = np.zeros((h, w), dtype=np.float64)
    px = 2.0 / max(h, w)
    for _ in range(spec.n_ellipses):
        cy, cx = rng.uniform(-0.45, 0.45, size=2)
        a = rng.uniform(spec.radius_min, spec.radius_max)
        b = rng.uniform(spec.radius_min, spec.radius_max)
        theta = rng.uniform(0.0, np.pi)
        amp = rng.uniform(spec.intensity_min, spec.intensity_max)
        u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
        v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        edge = 1.5 * px / min(a, b)
        mag += amp * _smoothstep((1.0 - r) / edge + 0.5)
    if spec.phase_scale > 0:
        noise = rng.standard_normal((h, w))
        smooth = gaussian_filter(noise, sigma=spec.phase_scale, mode="wrap")
        std = smooth.std()
        phase = PHASE_AMPLITUDE * smooth / std if std > 0 else np.zeros_like(smooth)
    else:
        phase = np.zeros((h, w))
    img = mag * np.exp(1j * phase)
    peak = np.abs(img).max()
    if peak > 0:
        img = img / peak
    return ComplexImage(img)


def gen_coilmaps(n_coils: int, height: int, width: int, seed) -> CoilMaps:
    """Smooth synthetic sensitivities: one complex Gaussian lobe per coil
    centered near the image border, with a low-order polynomial phase, then
    RSS normalized."""
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    rng = np.random.default_rng(seed)
    ys = np.linspace(-1.0, 1.0, height)
    xs = np.linspace(-1.0, 1.0, width)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    maps = np.empty((n_coils, height, width), dtype=np.complex128)
    for k in range(n_coils):
        angle = 2.0 * np.pi * (k + rng.uniform(-0.15, 0.15)) / n_coils
        radius = rng.uniform(1.0, 1.3)
        cy, cx = radius * np.sin(angle), radius * np.cos(angle)
        sigma = rng.uniform(1.1, 1.5)
        lobe = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        c = rng.normal(0.0, 0.3, size=6)
        phase = (
            c[0]
            + c[1] * xx
            + c[2] * yy
            + c[3] * xx * yy
            + c[4] * xx**2
            + c[5] * yy**2
        )
        maps[k] = lobe * np.exp(1j * phase)
    return rss_normalize(CoilMaps(maps)).maps


def gradient_energy(maps: CoilMaps) -> float:
    """Mean squared forward-difference gradient per pixel and coil; the
    smoothness statistic used to compare estimated and reference maps."""
    d = maps.data
    dh = d[:, 1:, :] - d[:, :-1, :]
    dw = d[:, :, 1:] - d[:, :, :-1]
    total = float(np.sum(np.abs(dh) ** 2) + np.sum(np.abs(dw) ** 2))
    return total / d.size


def synthesize_kspace(
    x: ComplexImage, maps: CoilMaps, noise_level: float, seed
) -> MultiCoilKSpace:
    """Fully sampled multi-coil k-space of ``x`` plus circular complex
    Gaussian noise with the given per-component standard deviation."""
    if noise_level < 0:
        raise ValueError("noise level must be >= 0")
    mask = full_mask(x.height, x.width)
    k = apply_forward(x, maps, mask).data.copy()
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        shape = k.shape
        k = k + noise_level * (
            rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        )
    return MultiCoilKSpace(k, mask)


def make_training_sample(
    z: MultiCoilKSpace, acceleration: float, acs_width: int, seed
) -> tuple[MultiCoilKSpace, MultiCoilKSpace]:
    """Draw a random column mask and return the subsampled measurement and
    its ACS-only restriction."""
    mask = make_mask(z.height, z.width, acceleration, acs_width, seed)
    sample = restrict(z, mask)
    sample_acs = restrict(sample, acs_mask(z.height, z.width, acs_width))
    return sample, sample_acs


# ---------------------------------------------------------------------------
# dataset records and CMSD container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRecord:
    """One simulated acquisition: the hidden truth, the noisy fully sampled
    k-space, and the undersampled training views derived from it."""

    ground_truth: ComplexImage
    true_maps: CoilMaps
    kspace: MultiCoilKSpace
    sample: MultiCoilKSpace
    sample_acs: MultiCoilKSpace
    noise_level: float

    def __post_init__(self):
        if self.kspace.mask.n_selected != self.kspace.width:
            raise ValueError("record k-space must carry a full mask")
        check = restrict(self.kspace, self.sample.mask)
        if not np.array_equal(check.data, self.sample.data):
            raise ValueError("training sample is inconsistent with its k-space")

    @classmethod
    def build(
        cls,
        ground_truth: ComplexImage,
        true_maps: CoilMaps,
        kspace: MultiCoilKSpace,
        mask: Mask,
        noise_level: float,
    ) -> "DatasetRecord":
        sample = restrict(kspace, mask)
        sample_acs = restrict(
            sample, acs_mask(kspace.height, kspace.width, mask.acs_width)
        )
        return cls(ground_truth, true_maps, kspace, sample, sample_acs, noise_level)


def simulate_records(
    spec: PhantomSpec,
    n_coils: int,
    noise_level: float,
    acceleration: float,
    acs_width: int,
    seed: int,
    count: int,
    first_index: int = 0,
) -> list[DatasetRecord]:
    """Generate ``count`` records with per-record child seeds.  Arrays are
    stored in single precision, matching the on-disk format."""
    records = []
    for i in range(first_index, first_index + count):
        x = gen_phantom(spec, derive_seed(seed, i, 0))
        maps = gen_coilmaps(n_coils, spec.height, spec.width, derive_seed(seed, i, 1))
        z = synthesize_kspace(x, maps, noise_level, derive_seed(seed, i, 2))
        mask = make_mask(
            spec.height, spec.width, acceleration, acs_width, derive_seed(seed, i, 3)
        )
        records.append(
            DatasetRecord.build(
                ComplexImage(x.data.astype(np.complex64)),
                CoilMaps(maps.data.astype(np.complex64)),
                MultiCoilKSpace(z.data.astype(np.complex64), z.mask),
                mask,
                noise_level,
            )
        )
    return records


def _complex_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<c8").tobytes()


def save_dataset(records: list[DatasetRecord], path: str) -> None:
    """Serialize records to the CMSD container (little-endian, f32)."""
    buf = bytearray()
    buf += DATASET_MAGIC
    buf += struct.pack("<II", DATASET_VERSION, len(records))
    for rec in records:
        h, w = rec.ground_truth.height, rec.ground_truth.width
        nc = rec.true_maps.n_coils
        buf += struct.pack("<IIII", h, w, nc, rec.sample.mask.acs_width)
        buf += struct.pack("<f", float(rec.noise_level))
        buf += _complex_bytes(rec.ground_truth.data)
        buf += _complex_bytes(rec.true_maps.data)
        buf += _complex_bytes(rec.kspace.data)
        buf += np.packbits(rec.sample.mask.cols, bitorder="little").tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_dataset(path: str) -> list[DatasetRecord]:
    with open(path, "rb") as handle:
        reader = Reader(handle.read(), path)
    reader.expect_magic(DATASET_MAGIC)
    reader.expect_version(DATASET_VERSION)
    count = reader.u32()
    records = []
    for _ in range(count):
        h, w, nc, acs_width = (reader.u32() for _ in range(4))
        eta = reader.f32()
        gt = _read_complex(reader, (h, w))
        maps = _read_complex(reader, (nc, h, w))
        z = _read_complex(reader, (nc, h, w))
        packed = np.frombuffer(reader.take((w + 7) // 8), dtype=np.uint8)
        cols = np.unpackbits(packed, bitorder="little", count=w)
        mask = Mask(h, w, cols, acs_width)
        records.append(
            DatasetRecord.build(
                ComplexImage(gt),
                CoilMaps(maps),
                MultiCoilKSpace(z, full_mask(h, w)),
                mask,
                eta,
            )
        )
    return records


def _read_complex(reader: Reader, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    raw = reader.take(8 * n)
    return np.frombuffer(raw, dtype="<c8").reshape(shape).copy()
