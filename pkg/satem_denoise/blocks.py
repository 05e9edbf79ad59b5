"""Cover embedding, token shift, signal and channel mixing, and the residual DR block."""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from .cowkv import CoWkvParams, cowkv
from .numerics import (
    Component,
    Tensor,
    exp,
    log,
    mean,
    parameter,
    relu,
    shift,
    sigmoid,
    square,
    variance,
)

logger = logging.getLogger(__name__)

VALID_PADDING = ["zero", "edge"]


def _weight(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    return parameter(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)))


@dataclass
class Linear(Component):
    """
    Affine map applied to the last axis

    Parameters
    ----------
    weight : Tensor
        (fan_in, fan_out) matrix.
    bias : Tensor
        (fan_out,) offset.
    """

    weight: Tensor
    bias: Tensor

    @classmethod
    def initialize(cls, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 1.0):
        return cls(weight=_weight(rng, fan_in, fan_out, gain), bias=parameter(np.zeros(fan_out)))

    def __call__(self, x) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class LayerNorm(Component):
    """ scale/offset normalization over channels """

    scale: Tensor
    offset: Tensor
    eps: float = 1e-5

    @classmethod
    def initialize(cls, channels: int):
        return cls(scale=parameter(np.ones(channels)), offset=parameter(np.zeros(channels)))

    def __call__(self, x: Tensor) -> Tensor:
        centered = x - mean(x, axis=-1, keepdims=True)
        inv_std = exp(log(variance(x, axis=-1, keepdims=True) + self.eps) * -0.5)
        return centered * inv_std * self.scale + self.offset


def cover_windows(x: np.ndarray, cover_length: int, padding: str = "zero") -> np.ndarray:
    """overlapping windows ``[x_t, ..., x_{t+n-1}]`` for every sample t

    Parameters
    ----------
    x : np.ndarray
        Signal(s) shaped (..., T).
    cover_length : int
        Window length n.
    padding : str
        Tail fill for samples past the end: 'zero' or 'edge' (repeat the last sample).

    Returns
    -------
    windows : np.ndarray
        (..., T, n) array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("cover embedding needs a signal with at least one sample")
    if cover_length < 1:
        raise ValueError(f"cover length must be >= 1, got {cover_length}")
    if padding not in VALID_PADDING:
        raise ValueError(f"Invalid padding: {padding}, expected one of {VALID_PADDING}")

    pad = [(0, 0)] * (x.ndim - 1) + [(0, cover_length - 1)]
    mode = "constant" if padding == "zero" else "edge"
    padded = np.pad(x, pad, mode=mode)
    return np.lib.stride_tricks.sliding_window_view(padded, cover_length, axis=-1).copy()


@dataclass
class CoverEmbedding(Component):
    """
    Overlapping embedding: each sample and its n-1 successors form one token

    Parameters
    ----------
    projection : Linear
        (n, C) map from a window to a token.
    cover_length : int
        Window length n.
    padding : str
        Tail policy, one of ``VALID_PADDING``.
    """

    projection: Linear
    cover_length: int = 3
    padding: str = "zero"

    def __post_init__(self):
        if self.padding not in VALID_PADDING:
            raise ValueError(f"Invalid padding: {self.padding}, expected one of {VALID_PADDING}")
        if self.projection.weight.shape[0] != self.cover_length:
            raise ValueError(
                f"projection expects {self.projection.weight.shape[0]} inputs, "
                f"cover length is {self.cover_length}"
            )

    @classmethod
    def initialize(cls, cover_length: int, channels: int, rng, padding: str = "zero"):
        if channels < 1:
            raise ValueError(f"embedding dimension must be >= 1, got {channels}")
        return cls(Linear.initialize(cover_length, channels, rng), cover_length, padding)

    @property
    def channels(self) -> int:
        return self.projection.weight.shape[1]

    def __call__(self, x: np.ndarray) -> Tensor:
        return self.projection(Tensor(cover_windows(x, self.cover_length, self.padding)))


def token_shift(x: Tensor, mu) -> Tensor:
    """per-channel blend of each token with its predecessor (zero before the first)"""
    return x * mu + shift(x) * (1.0 - mu)


def _mix(channels: int) -> Tensor:
    return parameter(np.full(channels, 0.5))


@dataclass
class SignalMix(Component):
    """
    Token shift, receptance/key/value projections and Co-WKV global attention

    Parameters
    ----------
    mu_r, mu_k, mu_v : Tensor
        Token-shift coefficients in [0, 1].
    w_r, w_k, w_v, w_o : Tensor
        (C, C) projections.
    wkv : CoWkvParams
        Kernel decay and bonus.
    """

    mu_r: Tensor
    mu_k: Tensor
    mu_v: Tensor
    w_r: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    wkv: CoWkvParams

    @classmethod
    def initialize(cls, channels: int, rng):
        return cls(
            mu_r=_mix(channels),
            mu_k=_mix(channels),
            mu_v=_mix(channels),
            w_r=_weight(rng, channels, channels),
            w_k=_weight(rng, channels, channels),
            w_v=_weight(rng, channels, channels),
            w_o=_weight(rng, channels, channels),
            wkv=CoWkvParams.initialize(channels),
        )

    def __call__(self, x: Tensor) -> Tensor:
        r = token_shift(x, self.mu_r) @ self.w_r
        k = token_shift(x, self.mu_k) @ self.w_k
        v = token_shift(x, self.mu_v) @ self.w_v
        return (sigmoid(r) * cowkv(k, v, self.wkv)) @ self.w_o

    def clamp_mix(self):
        for mu in (self.mu_r, self.mu_k, self.mu_v):
            np.clip(mu.data, 0.0, 1.0, out=mu.data)


@dataclass
class ChannelMix(Component):
    """
    Per-token feature fusion: sigmoid(x W_r) * (relu(x W_k)^2 W_v)

    Parameters
    ----------
    mu_r, mu_k : Tensor
        Token-shift coefficients in [0, 1].
    w_r : Tensor
        (C, C) receptance projection.
    w_k : Tensor
        (C, H) key projection.
    w_v : Tensor
        (H, C) value projection.
    """

    mu_r: Tensor
    mu_k: Tensor
    w_r: Tensor
    w_k: Tensor
    w_v: Tensor

    @classmethod
    def initialize(cls, channels: int, rng, hidden_mult: int = 4):
        hidden = hidden_mult * channels
        return cls(
            mu_r=_mix(channels),
            mu_k=_mix(channels),
            w_r=_weight(rng, channels, channels),
            w_k=_weight(rng, channels, hidden),
            w_v=_weight(rng, hidden, channels),
        )

    def __call__(self, x: Tensor) -> Tensor:
        r = token_shift(x, self.mu_r) @ self.w_r
        k = token_shift(x, self.mu_k) @ self.w_k
        return sigmoid(r) * (square(relu(k)) @ self.w_v)

    def clamp_mix(self):
        for mu in (self.mu_r, self.mu_k):
            np.clip(mu.data, 0.0, 1.0, out=mu.data)


@dataclass
class DrBlock(Component):
    """
    Residual unit: pre-normed signal mixing followed by pre-normed channel mixing
    """

    norm1: LayerNorm
    signal_mix: SignalMix
    norm2: LayerNorm
    channel_mix: ChannelMix

    @classmethod
    def initialize(cls, channels: int, rng, hidden_mult: int = 4):
        return cls(
            norm1=LayerNorm.initialize(channels),
            signal_mix=SignalMix.initialize(channels, rng),
            norm2=LayerNorm.initialize(channels),
            channel_mix=ChannelMix.initialize(channels, rng, hidden_mult),
        )

    def __call__(self, x: Tensor) -> Tensor:
        y = x + self.signal_mix(self.norm1(x))
        return y + self.channel_mix(self.norm2(y))

    def clamp_mix(self):
        self.signal_mix.clamp_mix()
        self.channel_mix.clamp_mix()


def run_blocks(blocks: List[DrBlock], x: Tensor) -> Tensor:
    for block in blocks:
        x = block(x)
    return x
