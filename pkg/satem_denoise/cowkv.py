"""Contextual-WKV: bidirectional linear attention with a symmetric position decay.

For every position ``t`` and channel ``c``::

    wkv[t] = (sum_{i != t} exp(k[i] - (|t - i| - 1) w) v[i] + exp(u + k[t]) v[t])
             / (sum_{i != t} exp(k[i] - (|t - i| - 1) w) + exp(u + k[t]))

``cowkv_naive`` evaluates the double sum directly in O(T^2 C). ``cowkv_scan``
runs one forward and one backward recurrence in O(T C), each accumulator
carrying the running maximum exponent so that unbounded keys never overflow.
Arrays are shaped ``(..., T, C)``; leading axes are batch axes.
"""
import logging
import time
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from .numerics import Component, NonFiniteError, Tensor, apply, parameter, register_op

logger = logging.getLogger(__name__)


@dataclass
class CoWkvParams(Component):
    """
    Per-channel decay ``w`` and current-token bonus ``u``

    Parameters
    ----------
    w : Tensor
        Decay weights, length C, unconstrained.
    u : Tensor
        Bonus for the current token, length C.
    """

    w: Tensor
    u: Tensor

    def __post_init__(self):
        if self.w.shape != self.u.shape or self.w.ndim != 1:
            raise ValueError(
                f"w and u must be vectors of equal length, got {self.w.shape} and {self.u.shape}"
            )

    @classmethod
    def initialize(cls, channels: int) -> "CoWkvParams":
        """log-spaced positive decays, zero bonus"""
        return cls(w=parameter(np.logspace(-2, 0, channels)), u=parameter(np.zeros(channels)))

    @property
    def channels(self) -> int:
        return self.w.shape[0]


def _validate(K: np.ndarray, V: np.ndarray, w: np.ndarray, u: np.ndarray):
    if K.shape != V.shape:
        raise ValueError(f"K and V must have the same shape, got {K.shape} and {V.shape}")
    if K.ndim < 2 or K.shape[-2] == 0:
        raise ValueError(f"expected (..., T, C) inputs with T >= 1, got {K.shape}")
    if w.shape != (K.shape[-1],) or u.shape != (K.shape[-1],):
        raise ValueError(
            f"w and u must have length C={K.shape[-1]}, got {w.shape} and {u.shape}"
        )
    for name, values in (("K", K), ("V", V), ("w", w), ("u", u)):
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"non-finite values in {name}")


def cowkv_naive(K: np.ndarray, V: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """direct double-sum evaluation, the reference for every other form"""
    K, V, w, u = (np.asarray(a, dtype=np.float64) for a in (K, V, w, u))
    _validate(K, V, w, u)

    T = K.shape[-2]
    positions = np.arange(T)
    out = np.empty_like(V)
    for t in range(T):
        exponent = K - (np.abs(t - positions) - 1)[:, None] * w
        exponent[..., t, :] = u + K[..., t, :]
        weights = np.exp(exponent - exponent.max(axis=-2, keepdims=True))
        out[..., t, :] = (weights * V).sum(axis=-2) / weights.sum(axis=-2)
    return out


def _one_sided(E, X, w, reverse=False, distance=False):
    """streaming sums over one side of every position

    For each t returns the log scale ``m[t]`` and
    ``S[t] = sum_{i < t} exp(E[i] - (t - i - 1) w - m[t]) X[i]`` (``i > t`` when
    ``reverse``). ``X`` stacks several coefficient arrays on a leading axis.
    With ``distance`` the same sums weighted by ``t - i - 1`` are returned too.
    """
    T = E.shape[-2]
    lead = E.shape[:-2] + E.shape[-1:]
    m = np.full(lead, -np.inf)
    acc = np.zeros((X.shape[0],) + lead)
    dacc = np.zeros_like(acc)

    M = np.empty(E.shape)
    S = np.empty(X.shape)
    D = np.empty(X.shape) if distance else None
    order = range(T - 1, -1, -1) if reverse else range(T)
    prev = None
    for t in order:
        if prev is not None:
            e_prev = E[..., prev, :]
            m_new = np.maximum(m - w, e_prev)
            decay = np.exp(m - w - m_new)
            if distance:
                dacc = decay * (dacc + acc)
            acc = decay * acc + np.exp(e_prev - m_new) * X[..., prev, :]
            m = m_new
        M[..., t, :] = m
        S[..., t, :] = acc
        if distance:
            D[..., t, :] = dacc
        prev = t
    return M, S, D


def _scan(K, V, w, u, distance=False):
    X = np.stack([V, np.ones_like(V)])
    mf, Sf, Df = _one_sided(K, X, w, distance=distance)
    mb, Sb, Db = _one_sided(K, X, w, reverse=True, distance=distance)
    mc = u + K

    m = np.maximum(np.maximum(mf, mb), mc)
    sf, sb, sc = np.exp(mf - m), np.exp(mb - m), np.exp(mc - m)
    num = Sf[0] * sf + Sb[0] * sb + V * sc
    den = Sf[1] * sf + Sb[1] * sb + sc
    y = num / den
    lse = m + np.log(den)
    return y, lse, (mf, Df, mb, Db)


def cowkv_scan(K: np.ndarray, V: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """linear-time evaluation by a forward and a backward recurrence"""
    K, V, w, u = (np.asarray(a, dtype=np.float64) for a in (K, V, w, u))
    _validate(K, V, w, u)
    with np.errstate(invalid="ignore"):
        y, _, _ = _scan(K, V, w, u)
    return y


def _channel_sum(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def cowkv_grad(
    K: np.ndarray, V: np.ndarray, w: np.ndarray, u: np.ndarray, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """gradients of ``sum(upstream * cowkv(K, V))`` with respect to K, V, w and u

    With attention probabilities ``P[t, i]`` (the normalized weights of
    ``wkv[t]``) and upstream gradient ``g``::

        dV[i] = sum_t g[t] P[t, i]
        dK[i] = sum_t g[t] P[t, i] (v[i] - wkv[t])
        du    = sum_t g[t] P[t, t] (v[t] - wkv[t])
        dw    = -sum_t g[t] sum_{i != t} (|t - i| - 1) P[t, i] (v[i] - wkv[t])

    The sums over t for fixed i use the same symmetric kernel, so they are
    evaluated by the same stabilized recurrences.
    """
    K, V, w, u, g = (np.asarray(a, dtype=np.float64) for a in (K, V, w, u, upstream))
    _validate(K, V, w, u)
    if g.shape != K.shape:
        raise ValueError(f"upstream must have shape {K.shape}, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite upstream gradient")

    with np.errstate(invalid="ignore"):
        y, lse, (mf, Df, mb, Db) = _scan(K, V, w, u, distance=True)

        # transposed sums: sum_t h[t] P[t, i] for h in (g, g * y)
        H = np.stack([g, g * y])
        tf_m, tf_S, _ = _one_sided(-lse, H, w)
        tb_m, tb_S, _ = _one_sided(-lse, H, w, reverse=True)
        mc = u - lse
        m = np.maximum(np.maximum(tf_m, tb_m), mc)
        transposed = tf_S * np.exp(tf_m - m) + tb_S * np.exp(tb_m - m) + H * np.exp(mc - m)
        scale = np.exp(K + m)

        dV = scale * transposed[0]
        dK = V * dV - scale * transposed[1]

        p_center = np.exp(u + K - lse)
        du = _channel_sum(g * p_center * (V - y))

        spread = np.exp(mf - lse) * (Df[0] - y * Df[1]) + np.exp(mb - lse) * (Db[0] - y * Db[1])
        dw = -_channel_sum(g * spread)
    return dK, dV, dw, du


def _cowkv_forward(K, V, w, u):
    _validate(K, V, w, u)
    y, _, _ = _scan(K, V, w, u)
    return y, None


def _cowkv_backward(g, ctx, xs, out):
    return cowkv_grad(*xs, g)


register_op("cowkv", _cowkv_forward, _cowkv_backward)


def cowkv(K: Tensor, V: Tensor, params: CoWkvParams) -> Tensor:
    """the scan kernel as a single node on the differentiation tape"""
    return apply("cowkv", K, V, params.w, params.u)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max absolute difference relative to the reference magnitude"""
    scale = np.max(np.abs(b)) if b.size else 0.0
    return float(np.max(np.abs(a - b)) / (scale + 1e-300)) if a.size else 0.0


def bench_kernel(
    lengths: Iterable[int],
    channels: int = 16,
    repeats: int = 3,
    seed: int = 0,
    naive_max: Optional[int] = None,
) -> pd.DataFrame:
    """time the naive and scan kernels

    Parameters
    ----------
    lengths : iterable of int
        Sequence lengths T to time.
    channels : int
        Channel count C.
    repeats : int
        Best-of repeat count.
    naive_max : int, optional
        Skip the quadratic kernel above this length.

    Returns
    -------
    df : pandas.DataFrame
        Columns ``T, impl, seconds`` plus ``rel_error`` of scan versus naive.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for T in lengths:
        K = rng.uniform(-1, 1, size=(T, channels))
        V = rng.uniform(-1, 1, size=(T, channels))
        w = np.logspace(-2, 0, channels)
        u = np.zeros(channels)

        impls = [("scan", cowkv_scan)]
        if naive_max is None or T <= naive_max:
            impls.append(("naive", cowkv_naive))

        outputs = {}
        for name, fn in impls:
            best = np.inf
            for _ in range(repeats):
                start = time.perf_counter()
                outputs[name] = fn(K, V, w, u)
                best = min(best, time.perf_counter() - start)
            rows.append({"T": T, "impl": name, "seconds": best})
            logger.info("T=%d %s %.4fs", T, name, best)

        err = relative_error(outputs["scan"], outputs["naive"]) if "naive" in outputs else np.nan
        if err > 1e-10:
            raise RuntimeError(f"scan and naive kernels disagree at T={T}: {err:.3e}")
        for row in rows[-len(impls):]:
            row["rel_error"] = err
    return pd.DataFrame(rows, columns=["T", "impl", "seconds", "rel_error"])
