"""Minimal reverse-mode tape over numpy arrays, real or complex.

For a real scalar loss L the gradient carried on a complex node z is
dL/dRe(z) + i*dL/dIm(z); on a real node it is the ordinary gradient.
Consequences used below: a C-linear unitary map backpropagates through its
inverse (FFT nodes), and an elementwise product conjugates the opposite
factor.  Reductions run in numpy's fixed order, so backward passes are
run-to-run deterministic.

Only the handful of operations needed by the conv nets and losses in this
package are provided; every one of them is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A tape-recorded array value."""

    __slots__ = ("value", "grad", "tape", "_index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.grad = None
        self.tape = tape
        self._index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        # entries: (out Var, parents tuple[Var], backward fn or None)
        self._nodes: list[tuple[Var, tuple, object]] = []

    def _new(self, value, parents=(), bwd=None) -> Var:
        var = Var(np.asarray(value), self, len(self._nodes))
        self._nodes.append((var, parents, bwd))
        return var

    def leaf(self, value: np.ndarray) -> Var:
        """Tracked input (parameters)."""
        return self._new(value)

    def constant(self, value: np.ndarray) -> Var:
        """Untracked input; grads still accumulate but are never used."""
        return self._new(value)

    def backward(self, loss: Var) -> None:
        """Accumulate gradients of a real scalar ``loss`` into every
        upstream Var's ``.grad``."""
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ValueError("backward expects a scalar loss")
        if np.iscomplexobj(loss.value):
            raise ValueError("backward expects a real-valued loss")
        loss.grad = np.ones_like(loss.value)
        for var, parents, bwd in reversed(self._nodes[: loss._index + 1]):
            if var.grad is None or bwd is None:
                continue
            contribs = bwd(var.grad)
            for parent, contrib in zip(parents, contribs):
                if contrib is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + contrib


def _tape_of(*vars_: Var) -> Tape:
    tape = None
    for v in vars_:
        if not isinstance(v, Var):
            raise TypeError("autodiff ops take Var inputs")
        if tape is None:
            tape = v.tape
        elif v.tape is not tape:
            raise ValueError("operands come from different tapes")
    return tape


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError("add expects equal shapes")
    return tape._new(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError("sub expects equal shapes")
    return tape._new(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    """Elementwise product; conjugates cross-terms for complex operands."""
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    return tape._new(
        av * bv, (a, b), lambda g: (g * np.conj(bv), g * np.conj(av))
    )


def conj(a: Var) -> Var:
    tape = _tape_of(a)
    return tape._new(np.conj(a.value), (a,), lambda g: (np.conj(g),))


def scale(a: Var, c: float) -> Var:
    tape = _tape_of(a)
    c = float(c)
    return tape._new(a.value * c, (a,), lambda g: (g * c,))


def const_mul(a: Var, m: np.ndarray) -> Var:
    """Multiply by a fixed real array (e.g. a 0/1 mask grid)."""
    tape = _tape_of(a)
    m = np.asarray(m)
    if np.iscomplexobj(m):
        raise TypeError("const_mul expects a real multiplier")
    return tape._new(a.value * m, (a,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def expand_dims0(a: Var) -> Var:
    tape = _tape_of(a)
    return tape._new(a.value[None], (a,), lambda g: (g[0],))


def squeeze0(a: Var) -> Var:
    tape = _tape_of(a)
    if a.value.shape[0] != 1:
        raise ValueError("squeeze0 expects leading axis 1")
    return tape._new(a.value[0], (a,), lambda g: (g[None],))


def broadcast0(a: Var, n: int) -> Var:
    """Repeat along a new leading axis of length ``n``."""
    tape = _tape_of(a)
    value = np.broadcast_to(a.value[None], (n,) + a.value.shape).copy()
    return tape._new(value, (a,), lambda g: (g.sum(axis=0),))


def sum0(a: Var) -> Var:
    tape = _tape_of(a)
    shape = a.value.shape
    return tape._new(
        a.value.sum(axis=0),
        (a,),
        lambda g: (np.broadcast_to(g[None], shape).copy(),),
    )


def concat0(parts: list[Var]) -> Var:
    tape = _tape_of(*parts)
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return tape._new(np.concatenate([p.value for p in parts], axis=0), tuple(parts), bwd)


# ---------------------------------------------------------------------------
# complex <-> channel packing
# ---------------------------------------------------------------------------


def complex_to_channels(a: Var) -> Var:
    """(n, H, W) complex -> (2n, H, W) real: real block then imaginary block."""
    tape = _tape_of(a)
    n = a.value.shape[0]
    value = np.concatenate([a.value.real, a.value.imag], axis=0)

    def bwd(g):
        return (g[:n] + 1j * g[n:],)

    return tape._new(value, (a,), bwd)


def channels_to_complex(a: Var) -> Var:
    """(2n, H, W) real -> (n, H, W) complex."""
    tape = _tape_of(a)
    if a.value.shape[0] % 2 != 0:
        raise ValueError("channel count must be even")
    n = a.value.shape[0] // 2
    value = a.value[:n] + 1j * a.value[n:]

    def bwd(g):
        return (np.concatenate([g.real, g.imag], axis=0),)

    return tape._new(value, (a,), bwd)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def fft2c_v(a: Var) -> Var:
    from .ops import fft2c, ifft2c

    tape = _tape_of(a)
    return tape._new(fft2c(a.value), (a,), lambda g: (ifft2c(g),))


def ifft2c_v(a: Var) -> Var:
    from .ops import fft2c, ifft2c

    tape = _tape_of(a)
    return tape._new(ifft2c(a.value), (a,), lambda g: (fft2c(g),))


# ---------------------------------------------------------------------------
# neural-net pieces
# ---------------------------------------------------------------------------


def relu(a: Var) -> Var:
    tape = _tape_of(a)
    keep = a.value > 0
    return tape._new(a.value * keep, (a,), lambda g: (g * keep,))


def conv3x3(x: Var, weight: Var, bias: Var) -> Var:
    """3x3 same-size convolution with zero padding.

    ``x`` is (C, H, W) real, ``weight`` is (O, C, 3, 3), ``bias`` is (O,).
    Implemented as im2col plus one matmul so both directions are a single
    BLAS call.
    """
    tape = _tape_of(x, weight, bias)
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[2:] != (3, 3):
        raise ValueError("conv3x3 expects (C,H,W) input and (O,C,3,3) weights")
    c, h, w = xv.shape
    o = wv.shape[0]
    if wv.shape[1] != c:
        raise ValueError(
            f"conv3x3 channel mismatch: input has {c}, weights expect {wv.shape[1]}"
        )
    if bv.shape != (o,):
        raise ValueError("bias shape must be (out_channels,)")
    if xv.dtype != wv.dtype:
        raise TypeError("conv3x3 input and weight dtypes must match")
    padded = np.pad(xv, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)
    cols = np.ascontiguousarray(cols)
    w2 = wv.reshape(o, c * 9)
    out = (w2 @ cols + bv[:, None]).reshape(o, h, w)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(o, h * w))
        grad_w = (g2 @ cols.T).reshape(wv.shape)
        grad_b = g2.sum(axis=1)
        gcols = (w2.T @ g2).reshape(c, 3, 3, h, w)
        gx_pad = np.zeros((c, h + 2, w + 2), dtype=g.dtype)
        for ki in range(3):
            for kj in range(3):
                gx_pad[:, ki : ki + h, kj : kj + w] += gcols[:, ki, kj]
        return gx_pad[:, 1 : h + 1, 1 : w + 1], grad_w, grad_b

    return tape._new(out, (x, weight, bias), bwd)


def rss_normalize_v(maps: Var, eps: float = 1e-12) -> Var:
    """Per-pixel RSS normalization of a (n, H, W) complex coil stack, with the
    same clamp as the plain operator."""
    tape = _tape_of(maps)
    c = maps.value
    r = np.sqrt(np.sum(np.abs(c) ** 2, axis=0))
    m = np.maximum(r, eps)
    out = c / m[None]

    def bwd(g):
        beta = np.sum((np.conj(g) * c).real, axis=0)
        active = (r > eps).astype(r.dtype)
        corr = np.where(active > 0, beta / (m * m * np.maximum(r, eps)), 0.0)
        return (g / m[None] - (corr * active)[None] * c,)

    return tape._new(out, (maps,), bwd)


# ---------------------------------------------------------------------------
# differences and reductions
# ---------------------------------------------------------------------------


def diff_rows(a: Var) -> Var:
    """Forward difference along the row axis of a (n, H, W) stack."""
    tape = _tape_of(a)
    value = a.value[:, 1:, :] - a.value[:, :-1, :]

    def bwd(g):
        out = np.zeros_like(a.value)
        out[:, 1:, :] += g
        out[:, :-1, :] -= g
        return (out,)

    return tape._new(value, (a,), bwd)


def diff_cols(a: Var) -> Var:
    """Forward difference along the column axis of a (n, H, W) stack."""
    tape = _tape_of(a)
    value = a.value[:, :, 1:] - a.value[:, :, :-1]

    def bwd(g):
        out = np.zeros_like(a.value)
        out[:, :, 1:] += g
        out[:, :, :-1] -= g
        return (out,)

    return tape._new(value, (a,), bwd)


def sqnorm_mean(a: Var, divisor: float) -> Var:
    """sum(|a|^2) / divisor, a real scalar for real or complex input."""
    tape = _tape_of(a)
    divisor = float(divisor)
    if divisor <= 0:
        raise ValueError("divisor must be positive")
    av = a.value
    value = np.asarray(np.sum((av * np.conj(av)).real) / divisor)

    def bwd(g):
        return (np.asarray(g).reshape(()) * 2.0 / divisor * av,)

    return tape._new(value, (a,), bwd)


def backward(loss: Var) -> None:
    """Run the reverse pass of ``loss``'s tape."""
    loss.tape.backward(loss)
