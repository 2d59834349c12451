"""Small convolutional denoiser and coil-map predictor with seeded
He-uniform initialization, an Adam optimizer, and the CMSM checkpoint
container.  Forward passes are built from the autodiff tape so training and
inference share one code path."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fileio import Reader, atomic_write_bytes
from .ops import CoilMaps, ComplexImage

CHECKPOINT_MAGIC = b"CMSM"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class ConvLayer:
    in_channels: int
    out_channels: int
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")


@dataclass(frozen=True)
class ConvNetSpec:
    """A chain of 3x3 zero-padded conv layers plus an optional residual
    connection added by the caller."""

    layers: tuple[ConvLayer, ...]
    residual: bool

    def __post_init__(self):
        if not self.layers:
            raise ValueError("ConvNetSpec needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_channels != cur.in_channels:
                raise ValueError("layer channel chain is inconsistent")

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels


def denoiser_spec(width: int = 32) -> ConvNetSpec:
    """Default image-domain denoiser: 2 complex-as-real channels plus one
    noise-level channel in, 2 channels out, residual."""
    return ConvNetSpec(
        (
            ConvLayer(3, width, "relu"),
            ConvLayer(width, width, "relu"),
            ConvLayer(width, width, "relu"),
            ConvLayer(width, 2, "identity"),
        ),
        residual=True,
    )


def csm_spec(n_coils: int, width: int = 32) -> ConvNetSpec:
    """Default coil-map predictor: 2*n_coils real channels in and out."""
    return ConvNetSpec(
        (
            ConvLayer(2 * n_coils, width, "relu"),
            ConvLayer(width, width, "relu"),
            ConvLayer(width, 2 * n_coils, "identity"),
        ),
        residual=False,
    )


class ParamStore:
    """Ordered named parameter arrays with paired gradient buffers."""

    def __init__(self):
        self._names: list[str] = []
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        values = np.asarray(values)
        self._names.append(name)
        self.values[name] = values
        self.grads[name] = np.zeros_like(values)

    def zero_grad(self) -> None:
        for name in self._names:
            self.grads[name][...] = 0

    def n_params(self) -> int:
        return sum(self.values[name].size for name in self._names)

    def leaves(self, tape: ad.Tape) -> dict[str, ad.Var]:
        return {name: tape.leaf(self.values[name]) for name in self._names}

    def accumulate_grads(self, leaves: dict[str, ad.Var], scale: float = 1.0) -> None:
        for name in self._names:
            grad = leaves[name].grad
            if grad is not None:
                self.grads[name] += scale * grad

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self._names:
            out.add(name, self.values[name].copy())
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name in self._names:
            out.add(name, self.values[name].astype(dtype))
        return out


def init_params(spec: ConvNetSpec, seed, dtype=np.float32) -> ParamStore:
    """He-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i, layer in enumerate(spec.layers):
        fan_in = layer.in_channels * 9
        bound = math.sqrt(6.0 / fan_in)
        weight = rng.uniform(
            -bound, bound, size=(layer.out_channels, layer.in_channels, 3, 3)
        )
        store.add(f"conv{i}.weight", weight.astype(dtype))
        store.add(f"conv{i}.bias", np.zeros(layer.out_channels, dtype=dtype))
    return store


def spec_from_store(store: ParamStore, residual: bool) -> ConvNetSpec:
    """Rebuild the layer chain from weight shapes; activations follow the
    default builders (relu between layers, identity last)."""
    shapes = []
    i = 0
    while f"conv{i}.weight" in store.values:
        shapes.append(store.values[f"conv{i}.weight"].shape)
        i += 1
    if not shapes:
        raise ValueError("store holds no conv layers")
    layers = []
    for j, shape in enumerate(shapes):
        act = "identity" if j == len(shapes) - 1 else "relu"
        layers.append(ConvLayer(shape[1], shape[0], act))
    return ConvNetSpec(tuple(layers), residual=residual)


def _convnet(spec: ConvNetSpec, leaves: dict[str, ad.Var], x: ad.Var) -> ad.Var:
    h = x
    for i, layer in enumerate(spec.layers):
        h = ad.conv3x3(h, leaves[f"conv{i}.weight"], leaves[f"conv{i}.bias"])
        if layer.activation == "relu":
            h = ad.relu(h)
    return h


def _real_dtype(complex_dtype) -> np.dtype:
    return np.zeros(1, dtype=complex_dtype).real.dtype


def denoiser_graph(
    leaves: dict[str, ad.Var],
    spec: ConvNetSpec,
    image: ad.Var,
    noise_level: float,
    tape: ad.Tape,
) -> ad.Var:
    """Taped denoiser on a (H, W) complex Var.  The image becomes two real
    channels plus a constant log(noise_level) channel; the residual path adds
    the input channels back."""
    if noise_level <= 0:
        raise ValueError("noise level must be positive")
    h, w = image.value.shape
    stack = ad.expand_dims0(image)
    chans = ad.complex_to_channels(stack)
    sig = tape.constant(
        np.full((1, h, w), math.log(noise_level), dtype=_real_dtype(image.value.dtype))
    )
    x = ad.concat0([chans, sig])
    out = _convnet(spec, leaves, x)
    if spec.residual:
        out = ad.add(out, chans)
    return ad.squeeze0(ad.channels_to_complex(out))


def csm_graph(
    leaves: dict[str, ad.Var], spec: ConvNetSpec, coil_images: ad.Var
) -> ad.Var:
    """Taped coil-map predictor on a (n_coils, H, W) complex Var; output is
    RSS normalized."""
    n_coils = coil_images.value.shape[0]
    if spec.in_channels != 2 * n_coils:
        raise ValueError(
            f"predictor was built for {spec.in_channels // 2} coils, got {n_coils}"
        )
    ch = ad.complex_to_channels(coil_images)
    out = _convnet(spec, leaves, ch)
    maps = ad.channels_to_complex(out)
    return ad.rss_normalize_v(maps)


def denoiser_forward(
    image: ComplexImage, noise_level: float, theta: ParamStore
) -> ComplexImage:
    """Plain (non-taped result) denoiser application."""
    spec = spec_from_store(theta, residual=True)
    tape = ad.Tape()
    iv = tape.constant(image.data)
    out = denoiser_graph(theta.leaves(tape), spec, iv, noise_level, tape)
    return ComplexImage(out.value)


def csm_forward(coil_images: np.ndarray, phi: ParamStore) -> CoilMaps:
    """Predict normalized coil maps from zero-filled per-coil ACS images."""
    coil_images = np.asarray(coil_images)
    if coil_images.ndim != 3 or not np.iscomplexobj(coil_images):
        raise ValueError("expected a (n_coils, H, W) complex stack")
    spec = spec_from_store(phi, residual=False)
    tape = ad.Tape()
    iv = tape.constant(coil_images)
    out = csm_graph(phi.leaves(tape), spec, iv)
    return CoilMaps(out.value)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = None
    v: dict = None

    @classmethod
    def for_store(cls, store: ParamStore, learning_rate: float) -> "AdamState":
        state = cls(learning_rate=learning_rate)
        state.m = {n: np.zeros_like(store.values[n]) for n in store.names}
        state.v = {n: np.zeros_like(store.values[n]) for n in store.names}
        return state


def adam_step(store: ParamStore, state: AdamState) -> ParamStore:
    """One in-place Adam update with bias correction, reading the gradients
    currently held in ``store``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in store.names:
        g = store.grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        store.values[name] -= (
            state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        ).astype(store.values[name].dtype, copy=False)
    return store


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named f32 tensors to the CMSM container (little-endian)."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("tensor name too long")
        arr = np.asarray(arr, dtype="<f4")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += np.ascontiguousarray(arr).tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as handle:
        reader = Reader(handle.read(), path)
    reader.expect_magic(CHECKPOINT_MAGIC)
    reader.expect_version(CHECKPOINT_VERSION)
    count = reader.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u16()).decode("utf-8")
        ndims = reader.u8()
        shape = tuple(reader.u32() for _ in range(ndims))
        n = int(np.prod(shape)) if shape else 1
        raw = reader.take(4 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return tensors


def checkpoint_tensors(
    theta: ParamStore, phi: ParamStore, extras: dict[str, float]
) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for prefix, store in (("denoiser", theta), ("csm", phi)):
        for name in store.names:
            tensors[f"{prefix}.{name}"] = store.values[name]
    for name, value in extras.items():
        tensors[name] = np.asarray(value, dtype=np.float32)
    return tensors


def stores_from_checkpoint(
    tensors: dict[str, np.ndarray], dtype=np.float32
) -> tuple[ParamStore, ParamStore, dict[str, float]]:
    theta, phi = ParamStore(), ParamStore()
    extras: dict[str, float] = {}
    for name, arr in tensors.items():
        if name.startswith("denoiser."):
            theta.add(name[len("denoiser.") :], arr.astype(dtype))
        elif name.startswith("csm."):
            phi.add(name[len("csm.") :], arr.astype(dtype))
        else:
            extras[name] = float(arr)
    if not theta.names or not phi.names:
        raise ValueError("checkpoint is missing denoiser or csm parameters")
    return theta, phi, extras
