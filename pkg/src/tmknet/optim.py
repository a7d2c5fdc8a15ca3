"""Adam over a heterogeneous parameter store.

Each parameter carries a manifold tag that decides how the update respects
its constraint set:

    euclidean   standard Adam with decoupled weight decay (decay only where
                the decay flag is set: convolution and linear weights)
    stiefel     ambient moments, tangent-projected gradient, QR retraction;
                rows stay orthonormal
    spd         metric gradient P G P, first moment parallel-transported
                between steps, scalar second moment of the metric norm,
                update along the exponential map; the matrix stays SPD
    log_scalar  Adam on the stored logarithm; the decoded value stays positive
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import NumericalError
from .linalg import symmetrize

MANIFOLD_TAGS = ("euclidean", "stiefel", "spd", "log_scalar")


@dataclass
class Param:
    value: np.ndarray
    tag: str
    decay: bool = False
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        if self.tag not in MANIFOLD_TAGS:
            raise ValueError(f"unknown manifold tag {self.tag!r}")
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros(()) if self.tag == "spd" else np.zeros_like(self.value)


class ParamStore:
    """Ordered named parameters; iteration order is registration order."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value, tag: str, decay: bool = False) -> None:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        self._params[name] = Param(value=np.array(value, dtype=np.float64), tag=tag, decay=decay)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, p in self._params.items():
            p.value = np.asarray(values[k], dtype=np.float64).reshape(p.value.shape).copy()


def zero_or_decay_policy(param: Param, weight_decay: float) -> float:
    """Weight decay applies to flagged Euclidean weights only; manifold
    parameters and normalization scale/shift get none."""
    return weight_decay if param.tag == "euclidean" and param.decay else 0.0


def _stiefel_retract_rows(w_raw: np.ndarray) -> np.ndarray:
    """Orthonormalize the rows of w_raw by QR, sign-fixed so diag(R) > 0."""
    q, r = np.linalg.qr(w_raw.T)
    if np.linalg.matrix_rank(r) < r.shape[0]:
        raise NumericalError("Stiefel retraction failed: rank loss in QR")
    sign = np.where(np.diag(r) >= 0, 1.0, -1.0)
    return (q * sign).T


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> None:
    """One Adam step over every parameter with a gradient in `grads`.

    Aborts (raising, mutating nothing) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}; step aborted")
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != store[name].value.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match "
                             f"parameter {name!r} shape {store[name].value.shape}")

    for name, g in grads.items():
        if g is None:
            continue
        p = store[name]
        g = np.asarray(g, dtype=np.float64)
        p.step += 1
        bc1 = 1.0 - beta1 ** p.step
        bc2 = 1.0 - beta2 ** p.step

        if p.tag in ("euclidean", "log_scalar"):
            wd = zero_or_decay_policy(p, weight_decay)
            if wd:
                p.value *= 1.0 - lr * wd
            p.m = beta1 * p.m + (1.0 - beta1) * g
            p.v = beta2 * p.v + (1.0 - beta2) * g * g
            p.value -= lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)

        elif p.tag == "stiefel":
            w = p.value
            # tangent projection for row-orthonormal W: G - (1/2)(G W^T + W G^T) W
            a = g @ w.T
            gt = g - 0.5 * (a + a.T) @ w
            p.m = beta1 * p.m + (1.0 - beta1) * gt
            p.v = beta2 * p.v + (1.0 - beta2) * gt * gt
            w_raw = w - lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)
            p.value = _stiefel_retract_rows(w_raw)

        elif p.tag == "spd":
            point = p.value
            rgrad = point @ symmetrize(g) @ point
            p.m = beta1 * p.m + (1.0 - beta1) * rgrad
            inv = np.linalg.inv(point)
            sq_norm = float(np.trace(inv @ rgrad @ inv @ rgrad))
            p.v = beta2 * p.v + (1.0 - beta2) * sq_norm
            direction = (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)
            new_point = geometry.exp_map(point, -lr * direction)
            p.m = geometry.parallel_transport(p.m, point, new_point)
            p.value = new_point
