"""Euclidean stem: multi-resolution temporal layer and anatomy-informed
multi-scale spatial layer.

Feature maps are (batch, channel, sensor, time) arrays. The temporal layer
slides per-resolution kernels along time, the spatial layer slides muscle
kernels along the sensor axis. Parameters are plain named arrays; forward
passes run on autodiff Variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ConfigError

MSS_KERNELS = ("global", "flexor", "extensor", "proximal_distal", "dilated")


@dataclass
class StemConfig:
    fs: float
    r_data: float
    r_resolution: tuple[float, ...]
    n_t: int
    n_s: int
    flexor_ids: tuple[int, ...]
    extensor_ids: tuple[int, ...]
    proximal_ids: tuple[int, ...]
    distal_ids: tuple[int, ...]
    pool_size: int = 4
    leaky_slope: float = 0.01
    mss_kernels: tuple[str, ...] = MSS_KERNELS

    def __post_init__(self):
        ratios = (self.r_data, *self.r_resolution)
        if not all(0.0 < r <= 1.0 for r in ratios):
            raise ConfigError(f"ratios must lie in (0, 1], got r_data={self.r_data}, "
                              f"r_resolution={self.r_resolution}")
        c = self.sensors
        if c % 2 != 0:
            raise ConfigError(f"sensor count must be even, got {c}")
        if len(self.flexor_ids) != c // 2 or len(self.extensor_ids) != c // 2:
            raise ConfigError("flexor and extensor lists must each cover half the sensors")
        if sorted(self.flexor_ids + self.extensor_ids) != list(range(c)):
            raise ConfigError("flexor + extensor lists must partition the sensors")
        if sorted(self.proximal_ids + self.distal_ids) != list(range(c)):
            raise ConfigError("proximal + distal lists must partition the sensors")
        unknown = set(self.mss_kernels) - set(MSS_KERNELS)
        if unknown:
            raise ConfigError(f"unknown spatial kernels: {sorted(unknown)}")
        if self.pool_size < 1 or self.n_t < 1 or self.n_s < 1:
            raise ConfigError("pool_size, n_t and n_s must be positive")

    @property
    def sensors(self) -> int:
        return len(self.flexor_ids) + len(self.extensor_ids)

    @property
    def temporal_kernel_sizes(self) -> tuple[int, ...]:
        return tuple(
            temporal_kernel_size(self.fs, self.r_data, r) for r in self.r_resolution
        )

    def mrt_out_time(self, t: int) -> int:
        sizes = self.temporal_kernel_sizes
        if max(sizes) > t:
            raise ConfigError(f"temporal kernel {max(sizes)} exceeds window length {t}")
        return sum((t - k + 1) // self.pool_size for k in sizes)

    @property
    def mss_out_sensors(self) -> int:
        c = self.sensors
        sizes = {"global": 1, "flexor": 1, "extensor": 1, "proximal_distal": 2, "dilated": c // 2}
        return sum(sizes[k] for k in self.mss_kernels)


def temporal_kernel_size(fs: float, r_data: float, r_resolution: float,
                         window_len: int | None = None) -> int:
    """Kernel length floor(r_data * r_resolution * fs), at least 1 sample."""
    k = max(1, math.floor(r_data * r_resolution * fs))
    if window_len is not None and k > window_len:
        raise ConfigError(f"temporal kernel {k} exceeds window length {window_len}")
    return k


# --- Euclidean batch normalization ---------------------------------------------

@dataclass
class BnState:
    """Running per-channel statistics for Euclidean batch norm (eval-time state)."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "BnState":
        return cls(mean=np.zeros(channels), var=np.ones(channels), momentum=momentum)

    def copy(self) -> "BnState":
        return BnState(self.mean.copy(), self.var.copy(), self.initialized, self.momentum)


BN_EPS = 1e-8


def euclid_batchnorm(x: Variable, gamma: Variable, beta: Variable,
                     state: BnState, mode: str) -> Variable:
    """Standardize per channel over (batch, sensor, time), then scale and shift.

    Training uses batch statistics and updates the running ones with momentum;
    eval uses the running statistics and requires at least one prior update.
    """
    ch = x.value.shape[1]
    shape = (1, ch, 1, 1)
    if mode == "train":
        if x.value.shape[0] < 2:
            raise ValueError("batch norm in training mode needs batch size >= 2")
        mu = ad.mean(x, axis=(0, 2, 3), keepdims=True)
        xc = ad.sub(x, mu)
        var = ad.mean(ad.mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        # reciprocal sqrt on the per-channel array, then broadcast multiply:
        # dividing the full tensor costs three large passes in backward
        xn = ad.mul(xc, ad.power(ad.add(var, BN_EPS), -0.5))
        m = state.momentum
        state.mean = (1 - m) * state.mean + m * mu.value.reshape(ch)
        state.var = (1 - m) * state.var + m * var.value.reshape(ch)
        state.initialized = True
    elif mode == "eval":
        if not state.initialized:
            raise ValueError("batch norm running statistics are uninitialized; train first")
        xc = ad.sub(x, state.mean.reshape(shape))
        xn = ad.mul(xc, (state.var.reshape(shape) + BN_EPS) ** -0.5)
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    return ad.add(ad.mul(xn, ad.reshape(gamma, shape)), ad.reshape(beta, shape))


# --- parameter initialization ---------------------------------------------------

def _conv_init(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int) -> np.ndarray:
    fan_in = cin * kh * kw
    return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(cout, cin, kh, kw))


def init_mrt(rng: np.random.Generator, cfg: StemConfig) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for i, k in enumerate(cfg.temporal_kernel_sizes):
        params[f"mrt.branch{i}.weight"] = _conv_init(rng, cfg.n_t, 1, 1, k)
        params[f"mrt.branch{i}.bias"] = np.zeros(cfg.n_t)
    params["mrt.bn.gamma"] = np.ones(cfg.n_t)
    params["mrt.bn.beta"] = np.zeros(cfg.n_t)
    return params


def init_mss(rng: np.random.Generator, cfg: StemConfig) -> dict[str, np.ndarray]:
    c = cfg.sensors
    heights = {"global": c, "flexor": c // 2, "extensor": c // 2,
               "proximal_distal": c // 2, "dilated": 2}
    params: dict[str, np.ndarray] = {}
    for name in cfg.mss_kernels:
        params[f"mss.{name}.weight"] = _conv_init(rng, cfg.n_s, cfg.n_t, heights[name], 1)
        params[f"mss.{name}.bias"] = np.zeros(cfg.n_s)
    params["mss.bn.gamma"] = np.ones(cfg.n_s)
    params["mss.bn.beta"] = np.zeros(cfg.n_s)
    return params


# --- forward passes --------------------------------------------------------------

def mrt_branches(x: Variable, params: dict[str, Variable], cfg: StemConfig) -> Variable:
    """Pre-normalization part of the temporal layer: per-resolution conv,
    LeakyReLU and max-pool, concatenated along time."""
    t = x.value.shape[-1]
    outs = []
    for i, k in enumerate(cfg.temporal_kernel_sizes):
        if k > t:
            raise ConfigError(f"temporal kernel {k} exceeds window length {t}")
        z = ad.conv2d(x, params[f"mrt.branch{i}.weight"], params[f"mrt.branch{i}.bias"])
        z = ad.leaky_relu(z, cfg.leaky_slope)
        outs.append(ad.max_pool_time(z, cfg.pool_size))
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=3)


def mrt_forward(x: Variable, params: dict[str, Variable], cfg: StemConfig,
                bn_state: BnState, mode: str) -> Variable:
    """Multi-resolution temporal layer.

    x: (b, 1, c, t). Per branch: time cross-correlation with kernel (1, k_i),
    LeakyReLU, non-overlapping max-pool; branch outputs concatenate along the
    time axis, followed by Euclidean batch norm over the n_t channels.
    """
    z = mrt_branches(x, params, cfg)
    return euclid_batchnorm(z, params["mrt.bn.gamma"], params["mrt.bn.beta"], bn_state, mode)


def mss_branches(z_t: Variable, params: dict[str, Variable], cfg: StemConfig) -> Variable:
    """Pre-normalization part of the spatial layer: the five muscle kernels
    with LeakyReLU, concatenated along the sensor axis."""
    c = cfg.sensors
    outs = []
    for name in cfg.mss_kernels:
        w, b = params[f"mss.{name}.weight"], params[f"mss.{name}.bias"]
        if name == "global":
            z = ad.conv2d(z_t, w, b)
        elif name == "flexor":
            z = ad.conv2d(ad.gather(z_t, cfg.flexor_ids, axis=2), w, b)
        elif name == "extensor":
            z = ad.conv2d(ad.gather(z_t, cfg.extensor_ids, axis=2), w, b)
        elif name == "proximal_distal":
            ordered = ad.gather(z_t, cfg.proximal_ids + cfg.distal_ids, axis=2)
            z = ad.conv2d(ordered, w, b, stride=(c // 2, 1))
        elif name == "dilated":
            z = ad.conv2d(z_t, w, b, dilation=(c // 2, 1))
        outs.append(ad.leaky_relu(z, cfg.leaky_slope))
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=2)


def mss_forward(z_t: Variable, params: dict[str, Variable], cfg: StemConfig,
                bn_state: BnState, mode: str) -> Variable:
    """Multi-scale spatial layer.

    z_t: (b, n_t, c, t_t). Five sensor-axis kernels (global, flexor, extensor,
    strided proximal-distal, dilated neighbour) each produce n_s channels;
    their outputs concatenate along the sensor axis to 5 + c/2 rows, followed
    by batch norm over the n_s channels.
    """
    z = mss_branches(z_t, params, cfg)
    return euclid_batchnorm(z, params["mss.bn.gamma"], params["mss.bn.beta"], bn_state, mode)
