"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A Tape records operations as they execute; Tape.backward replays them in
reverse, accumulating vector-Jacobian products into Variable.grad. One tape
serves one forward/backward pair: recording is cheap, tapes are discarded
after each step.

Implemented operations cover the network end to end: broadcasting arithmetic,
(batched) matmul, 2-D cross-correlation with stride and dilation, LeakyReLU,
non-overlapping max-pooling, reductions, spectral matrix functions through
the eigendecomposition, bilinear congruence maps, gather/concat plumbing, and
log-softmax with negative log-likelihood.
"""

from __future__ import annotations

import numpy as np

from . import linalg
from .errors import NumericalError

__all__ = ["Tape", "Variable"]


class Variable:
    """A node in the recorded computation: a value plus its place on the tape."""

    __slots__ = ("value", "tape", "requires_grad", "grad")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    # Operator sugar; scalars and arrays lift to constants on the same tape.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self._nodes: list[tuple[Variable, tuple[Variable, ...], object]] = []
        self._grad_leaves: list[Variable] = []
        self._consumed = False

    def leaf(self, value, requires_grad: bool = False) -> Variable:
        v = Variable(value, self, requires_grad)
        if requires_grad:
            self._grad_leaves.append(v)
        return v

    def constant(self, value) -> Variable:
        return Variable(value, self, requires_grad=False)

    def record(self, parents: tuple[Variable, ...], value: np.ndarray, backward_fn) -> Variable:
        """Register an operation. `backward_fn(g)` returns one gradient per parent
        (None for parents that need none)."""
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot mix Variables from different tapes")
        out = Variable(value, self, any(p.requires_grad for p in parents))
        if out.requires_grad:
            self._nodes.append((out, parents, backward_fn))
        return out

    def backward(self, loss: Variable) -> None:
        """Populate .grad on every grad-requiring leaf reachable from `loss`.

        Unreachable leaves receive zeros. A tape can run backward once.
        """
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; re-record the forward pass")
        self._consumed = True

        loss.grad = np.ones_like(loss.value)
        # accumulate without materializing zeros: the first contribution is
        # held by reference (it may alias op-internal arrays), later ones
        # force a fresh owned buffer
        owned: set[int] = set()
        for out, parents, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = g
                elif id(p) in owned:
                    p.grad += g
                else:
                    p.grad = p.grad + g
                    owned.add(id(p))
        for leaf in self._grad_leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)
            elif leaf.grad.base is not None or not leaf.grad.flags.owndata:
                leaf.grad = leaf.grad.copy()


def _lift(tape: Tape, x) -> Variable:
    if isinstance(x, Variable):
        if x.tape is not tape:
            raise ValueError("cannot mix Variables from different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- arithmetic ---------------------------------------------------------------

def add(a: Variable, b) -> Variable:
    b = _lift(a.tape, b)
    va, vb = a.value, b.value
    return a.tape.record(
        (a, b), va + vb,
        lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)),
    )


def sub(a: Variable, b) -> Variable:
    b = _lift(a.tape, b)
    va, vb = a.value, b.value
    return a.tape.record(
        (a, b), va - vb,
        lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)),
    )


def mul(a: Variable, b) -> Variable:
    b = _lift(a.tape, b)
    va, vb = a.value, b.value
    return a.tape.record(
        (a, b), va * vb,
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
    )


def div(a: Variable, b) -> Variable:
    b = _lift(a.tape, b)
    va, vb = a.value, b.value
    return a.tape.record(
        (a, b), va / vb,
        lambda g: (
            _unbroadcast(g / vb, va.shape),
            _unbroadcast(-g * va / (vb * vb), vb.shape),
        ),
    )


def neg(a: Variable) -> Variable:
    return a.tape.record((a,), -a.value, lambda g: (-g,))


def power(a: Variable, p: float) -> Variable:
    p = float(p)
    va = a.value
    return a.tape.record(
        (a,), va ** p,
        lambda g: (g * p * va ** (p - 1.0),),
    )


def exp(a: Variable) -> Variable:
    out = np.exp(a.value)
    return a.tape.record((a,), out, lambda g: (g * out,))


def log(a: Variable) -> Variable:
    va = a.value
    return a.tape.record((a,), np.log(va), lambda g: (g / va,))


# --- shape plumbing -----------------------------------------------------------

def reshape(a: Variable, shape) -> Variable:
    old = a.value.shape
    return a.tape.record((a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def flatten_rows(a: Variable) -> Variable:
    """(b, ...) -> (b, prod(...)) row-major."""
    b = a.value.shape[0]
    return reshape(a, (b, -1))


def transpose(a: Variable, axes=None) -> Variable:
    if axes is None:
        axes = tuple(range(a.value.ndim - 2)) + (a.value.ndim - 1, a.value.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.tape.record((a,), a.value.transpose(axes), lambda g: (g.transpose(inv),))


def concat(parts: list[Variable], axis: int) -> Variable:
    tape = parts[0].tape
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes[:-1])

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(tuple(parts), np.concatenate([p.value for p in parts], axis=axis), backward)


def gather(a: Variable, idx, axis: int) -> Variable:
    """Select indices along one axis; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    va = a.value

    def backward(g):
        gx = np.zeros_like(va)
        sel = [slice(None)] * va.ndim
        sel[axis] = idx
        np.add.at(gx, tuple(sel), g)
        return (gx,)

    return a.tape.record((a,), np.take(va, idx, axis=axis), backward)


def take_scalar(a: Variable, index: tuple) -> Variable:
    """Pick one entry as a 0-d Variable."""
    va = a.value

    def backward(g):
        gx = np.zeros_like(va)
        gx[index] = g
        return (gx,)

    return a.tape.record((a,), np.asarray(va[index]), backward)


# --- reductions ---------------------------------------------------------------

def _bcast_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a % len(shape) for a in ax)
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a: Variable, axis=None, keepdims: bool = False) -> Variable:
    va = a.value
    return a.tape.record(
        (a,), va.sum(axis=axis, keepdims=keepdims),
        lambda g: (_bcast_reduced(g, va.shape, axis, keepdims),),
    )


def mean(a: Variable, axis=None, keepdims: bool = False) -> Variable:
    va = a.value
    count = va.size if axis is None else np.prod(
        [va.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return a.tape.record(
        (a,), va.mean(axis=axis, keepdims=keepdims),
        lambda g: (_bcast_reduced(g / count, va.shape, axis, keepdims),),
    )


# --- linear algebra -----------------------------------------------------------

def matmul(a: Variable, b) -> Variable:
    b = _lift(a.tape, b)
    va, vb = a.value, b.value
    if va.ndim < 2 or vb.ndim < 2:
        raise ValueError("matmul requires arrays with at least 2 dimensions")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)
        gb = _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)
        return ga, gb

    return a.tape.record((a, b), va @ vb, backward)


def bilinear(w: Variable, c: Variable) -> Variable:
    """Congruence map W C W^T, batched over the leading axes of `c`."""
    wt = transpose(w)
    return matmul(matmul(w, c), wt)


def sym_fn(a: Variable, tag: str, param=None) -> Variable:
    """Spectral matrix function on (..., n, n); backward via the Loewner product."""
    eig = linalg.sym_eig(a.value)
    out = linalg.sym_fn(a.value, tag, param, eig=eig)

    def backward(g):
        return (linalg.sym_fn_vjp(a.value, tag, g, param, eig=eig),)

    return a.tape.record((a,), out, backward)


def geo_mean(z1: Variable, z2: Variable, w: float) -> Variable:
    """Weighted geometric mean as a composition of spectral ops (differentiable)."""
    s = sym_fn(z1, "sqrt")
    inv_s = sym_fn(z1, "inv_sqrt")
    mid = sym_fn(matmul(matmul(inv_s, z2), inv_s), "pow", w)
    return matmul(matmul(s, mid), s)


# --- neural-network ops -------------------------------------------------------

def leaky_relu(a: Variable, slope: float = 0.01) -> Variable:
    va = a.value
    factor = (va > 0) * (1.0 - slope)
    factor += slope
    return a.tape.record((a,), va * factor, lambda g: (g * factor,))


def conv2d(
    x: Variable,
    w: Variable,
    bias: Variable | None = None,
    stride: tuple[int, int] = (1, 1),
    dilation: tuple[int, int] = (1, 1),
) -> Variable:
    """Valid-padding 2-D cross-correlation.

    x: (b, c_in, h, w); w: (c_out, c_in, kh, kw); bias: (c_out,).
    Output: (b, c_out, oh, ow) with oh = (h - (kh-1)*dh - 1)//sh + 1.
    """
    vx, vw = x.value, w.value
    bsz, cin, h, wd = vx.shape
    cout, cin_w, kh, kw = vw.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    sh, sw = stride
    dh, dw = dilation
    span_h = (kh - 1) * dh + 1
    span_w = (kw - 1) * dw + 1
    if span_h > h or span_w > wd:
        raise ValueError(
            f"kernel span ({span_h}, {span_w}) exceeds input size ({h}, {wd})"
        )
    oh = (h - span_h) // sh + 1
    ow = (wd - span_w) // sw + 1

    # zero-copy (b, c, oh, ow, kh, kw) window view; patches[..., i, j] is the
    # input sample each kernel tap sees
    sb, sc, srh, srw = vx.strides
    patches = np.lib.stride_tricks.as_strided(
        vx,
        shape=(bsz, cin, oh, ow, kh, kw),
        strides=(sb, sc, srh * sh, srw * sw, srh * dh, srw * dw),
        writeable=False,
    )
    out = np.tensordot(patches, vw, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    parents: tuple[Variable, ...]
    if bias is not None:
        out += bias.value[None, :, None, None]
        parents = (x, w, bias)
    else:
        parents = (x, w)

    def backward(g):
        gw = np.tensordot(g, patches, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros_like(vx)
        # scatter per kernel tap: strided slices never overlap within a tap
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, vw[:, :, i, j], axes=([1], [0]))
                gx[:, :,
                   i * dh: i * dh + (oh - 1) * sh + 1: sh,
                   j * dw: j * dw + (ow - 1) * sw + 1: sw] += contrib.transpose(0, 3, 1, 2)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return x.tape.record(parents, out, backward)


def max_pool_time(x: Variable, size: int) -> Variable:
    """Non-overlapping max pooling along the last axis (kernel = stride = size).

    Ties route the gradient to the earliest index in the window.
    """
    vx = x.value
    *lead, t = vx.shape
    ot = t // size
    if ot < 1:
        raise ValueError(f"pool size {size} exceeds axis length {t}")
    windows = vx[..., : ot * size].reshape(*lead, ot, size)
    arg = windows.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(vx)
        gx[..., : ot * size] = gw.reshape(*lead, ot * size)
        return (gx,)

    return x.tape.record((x,), out, backward)


def log_softmax(a: Variable) -> Variable:
    """Log-softmax along the last axis."""
    va = a.value
    shift = va - va.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    out = shift - lse
    softmax = np.exp(out)

    def backward(g):
        return (g - softmax * g.sum(axis=-1, keepdims=True),)

    return a.tape.record((a,), out, backward)


def nll_loss(logp: Variable, labels: np.ndarray) -> Variable:
    """Mean negative log-likelihood of integer labels under (b, n_c) log-probs."""
    labels = np.asarray(labels, dtype=np.intp)
    vp = logp.value
    bsz = vp.shape[0]
    picked = vp[np.arange(bsz), labels]

    def backward(g):
        gx = np.zeros_like(vp)
        gx[np.arange(bsz), labels] = -float(g) / bsz
        return (gx,)

    return logp.tape.record((logp,), np.asarray(-picked.mean()), backward)


def cross_entropy(logits: Variable, labels: np.ndarray) -> Variable:
    return nll_loss(log_softmax(logits), labels)


# --- statistics ---------------------------------------------------------------

def center_rows(a: Variable, axis: int = -1) -> Variable:
    """Subtract the mean along `axis` (mean-centering)."""
    return sub(a, mean(a, axis=axis, keepdims=True))


def covariance(a: Variable) -> Variable:
    """Row covariance of (..., n, m) features: centered F F^T / (m - 1)."""
    m = a.value.shape[-1]
    if m < 2:
        raise ValueError(f"covariance needs at least 2 observations, got {m}")
    fc = center_rows(a, axis=-1)
    return mul(matmul(fc, transpose(fc)), 1.0 / (m - 1))
