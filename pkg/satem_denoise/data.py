"""Synthetic decay curves, the field-noise model and the dataset file format.

Clean curves come from a parametric family of power-law/exponential terms
plus a late-time ``t^-5/2`` tail. Noise is composed of the relative plus
background model, sferic impulses, powerline harmonics, motion drift, extra
Gaussian noise and (optionally) traces from a recorded-noise bank.
Every record draws from its own counter-based random stream, so generation
does not depend on record order.
"""
import io
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import merge_params
from .model import atomic_write_bytes

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"SATEMDS\x00"
DATASET_VERSION = 1
# magic, version, T, count, seed, units, eps, scale, has_clean
_HEADER = struct.Struct("<8sIIQq16sdd?")
CSV_COLUMNS = ["time_s", "value"]

# background noise level is quoted at 1 ms
T_REF = 1e-3
# motion drift is smoothed over at least this fraction of the record
MOTION_WINDOW_MIN = 0.25


class DatasetFormatError(ValueError):
    pass


@dataclass
class DataConfig(object):
    """
    Gate layout, clean-curve family and normalization floor
    """

    n_gates: int
    t_min: float
    t_max: float
    eps: float
    scale: float
    units: str
    max_terms: int
    power_min: float
    power_max: float
    level_min: float
    level_max: float
    late_level_min: float
    late_level_max: float
    slope_min: float
    slope_max: float
    max_draws: int
    seed: int

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError(f"invalid gate range [{self.t_min}, {self.t_max}]")
        if self.eps <= 0:
            raise ValueError(f"normalization floor must be > 0, got {self.eps}")
        if self.max_terms < 1:
            raise ValueError(f"max_terms must be >= 1, got {self.max_terms}")
        if len(self.units.encode()) > 16:
            raise ValueError(f"units label longer than 16 bytes: {self.units!r}")

    @classmethod
    def from_params(cls, params: Optional[Dict[str, Any]] = None) -> "DataConfig":
        return cls(**merge_params("data", params))


@dataclass
class NoiseConfig(object):
    """
    Parameters of every noise component; an amplitude (or rate) of zero
    switches that component off.

    Parameters
    ----------
    std : float
        Relative noise level of the relative plus background model.
    b : float, optional
        Background level at 1 ms. Drawn uniformly from [b_min, b_max] per record when None.
    """

    std: float
    b: Optional[float]
    b_min: float
    b_max: float
    sferic_rate: float
    sferic_amp_min: float
    sferic_amp_max: float
    sferic_tau_rise: float
    sferic_tau_fall: float
    powerline_base: float
    powerline_harmonics: int
    powerline_amplitude: float
    motion_window: float
    motion_amplitude: float
    gaussian_extra: float
    recorded_scale_min: float
    recorded_scale_max: float
    seed: int

    def __post_init__(self):
        for name in (
            "std",
            "b_min",
            "b_max",
            "sferic_rate",
            "sferic_amp_min",
            "sferic_amp_max",
            "powerline_amplitude",
            "motion_amplitude",
            "gaussian_extra",
            "recorded_scale_min",
            "recorded_scale_max",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"noise parameter {name} must be >= 0, got {getattr(self, name)}")
        if self.b is not None and self.b < 0:
            raise ValueError(f"background level must be >= 0, got {self.b}")
        if self.b_min > self.b_max:
            raise ValueError(f"b_min {self.b_min} exceeds b_max {self.b_max}")
        if not 0 < self.sferic_tau_rise < self.sferic_tau_fall:
            raise ValueError("sferic time constants must satisfy 0 < tau_rise < tau_fall")
        if not MOTION_WINDOW_MIN <= self.motion_window <= 1:
            raise ValueError(
                f"motion window must be in [{MOTION_WINDOW_MIN}, 1], got {self.motion_window}"
            )

    @classmethod
    def from_params(cls, params: Optional[Dict[str, Any]] = None) -> "NoiseConfig":
        return cls(**merge_params("noise", params))

    @classmethod
    def silent(cls, **params) -> "NoiseConfig":
        """every component switched off unless given in ``params``"""
        off = {
            "std": 0.0,
            "b": 0.0,
            "sferic_rate": 0.0,
            "powerline_amplitude": 0.0,
            "motion_amplitude": 0.0,
            "gaussian_extra": 0.0,
        }
        return cls.from_params({**off, **params})


def _check_gates(gate_times: np.ndarray):
    if gate_times.ndim != 1 or len(gate_times) == 0:
        raise ValueError(f"gate times must be a non-empty vector, got shape {gate_times.shape}")
    if np.any(gate_times <= 0):
        raise ValueError("gate times must be > 0")
    if np.any(np.diff(gate_times) <= 0):
        raise ValueError("gate times must be strictly increasing")


@dataclass
class SignalRecord(object):
    """
    One sample: gate times, clean decay (when known) and noisy decay

    Parameters
    ----------
    gate_times : np.ndarray
        Seconds, strictly increasing.
    clean : np.ndarray, optional
        Noise-free response. None for field data without ground truth.
    noisy : np.ndarray
        Observed response.
    eps, scale : float
        Normalization metadata used by ``normalize``.
    """

    gate_times: np.ndarray
    clean: Optional[np.ndarray]
    noisy: np.ndarray
    eps: float = 0.01
    scale: float = 1.0

    def __post_init__(self):
        self.gate_times = np.asarray(self.gate_times, dtype=np.float64)
        self.noisy = np.asarray(self.noisy, dtype=np.float64)
        _check_gates(self.gate_times)
        arrays = [("noisy", self.noisy)]
        if self.clean is not None:
            self.clean = np.asarray(self.clean, dtype=np.float64)
            arrays.append(("clean", self.clean))
        for name, values in arrays:
            if values.shape != self.gate_times.shape:
                raise ValueError(
                    f"{name} has shape {values.shape}, gate times {self.gate_times.shape}"
                )
            if not np.all(np.isfinite(values)):
                raise ValueError(f"non-finite values in {name}")

    @property
    def norm_meta(self) -> Tuple[float, float]:
        return self.eps, self.scale

    @property
    def noise(self) -> np.ndarray:
        if self.clean is None:
            raise ValueError("record carries no clean signal")
        return self.noisy - self.clean


def _as_records(values, T: int, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    if values.ndim != 2 or values.shape[1] != T:
        raise ValueError(f"{name} must be shaped (N, {T}), got {values.shape}")
    return values


@dataclass
class SignalDataset(object):
    """
    Records sharing one gate layout, stored as (N, T) arrays

    Parameters
    ----------
    gate_times : np.ndarray
        (T,) gate times in seconds.
    noisy : np.ndarray
        (N, T) observed responses.
    clean : np.ndarray, optional
        (N, T) noise-free responses.
    seed : int
        Generator seed that produced the records.
    """

    gate_times: np.ndarray
    noisy: np.ndarray
    clean: Optional[np.ndarray] = None
    eps: float = 0.01
    scale: float = 1.0
    seed: int = 0
    units: str = "nV/m^2"

    def __post_init__(self):
        self.gate_times = np.asarray(self.gate_times, dtype=np.float64)
        T = len(self.gate_times)
        self.noisy = _as_records(self.noisy, T, "noisy")
        if self.clean is not None:
            self.clean = _as_records(self.clean, T, "clean")
            if self.clean.shape != self.noisy.shape:
                raise ValueError(f"clean {self.clean.shape} and noisy {self.noisy.shape} differ")
        if len(self.units.encode()) > 16:
            raise ValueError(f"units label longer than 16 bytes: {self.units!r}")

    def __len__(self) -> int:
        return self.noisy.shape[0]

    @property
    def n_gates(self) -> int:
        return len(self.gate_times)

    @property
    def has_clean(self) -> bool:
        return self.clean is not None

    @property
    def records(self) -> List[SignalRecord]:
        return [
            SignalRecord(
                self.gate_times,
                None if self.clean is None else self.clean[i],
                self.noisy[i],
                self.eps,
                self.scale,
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, records: Sequence[SignalRecord], seed: int = 0, units: str = "nV/m^2"):
        if not records:
            return cls(np.zeros(0), np.zeros((0, 0)), None, seed=seed, units=units)
        first = records[0]
        for r in records[1:]:
            if not np.array_equal(r.gate_times, first.gate_times):
                raise ValueError("records do not share one gate layout")
            if (r.clean is None) != (first.clean is None):
                raise ValueError("either every record or none must carry a clean signal")
        clean = None if first.clean is None else np.stack([r.clean for r in records])
        noisy = np.stack([r.noisy for r in records])
        return cls(first.gate_times, noisy, clean, first.eps, first.scale, seed, units)

    def normalized(self) -> Tuple[Optional[np.ndarray], np.ndarray]:
        """(clean, noisy) in the normalized domain the network sees"""
        clean = None if self.clean is None else normalize(self.clean, self.eps, self.scale)
        return clean, normalize(self.noisy, self.eps, self.scale)


# --------- gates and clean curves --------- #
def gen_gate_times(n_gates: int, t_min: float, t_max: float) -> np.ndarray:
    """log-spaced gate times, both endpoints included"""
    if n_gates < 2:
        raise ValueError(f"need at least 2 gates, got {n_gates}")
    if not 0 < t_min < t_max:
        raise ValueError(f"invalid gate range [{t_min}, {t_max}]")
    gates = np.logspace(np.log10(t_min), np.log10(t_max), n_gates)
    gates[0], gates[-1] = t_min, t_max
    return gates


def decay_curve(
    gate_times: np.ndarray,
    amplitudes: Sequence[float],
    powers: Sequence[float],
    taus: Sequence[float],
    a0: float = 0.0,
) -> np.ndarray:
    """sum_j a_j t^-p_j exp(-t / tau_j) + a0 t^-5/2 (tau may be inf)"""
    t = np.asarray(gate_times, dtype=np.float64)[:, None]
    a = np.asarray(amplitudes, dtype=np.float64)
    p = np.asarray(powers, dtype=np.float64)
    tau = np.asarray(taus, dtype=np.float64)
    terms = a * t ** -p * np.exp(-t / tau)
    return terms.sum(axis=1) + a0 * t[:, 0] ** -2.5


def late_time_slope(gate_times: np.ndarray, curve: np.ndarray, fraction: float = 0.1) -> float:
    """least-squares log-log slope over the last ``fraction`` of the gates"""
    n = max(2, int(round(fraction * len(gate_times))))
    t, s = gate_times[-n:], curve[-n:]
    if np.any(s <= 0):
        return np.nan
    return float(np.polyfit(np.log10(t), np.log10(s), 1)[0])


def _is_monotone(curve: np.ndarray, tolerance: float = 0.01) -> bool:
    return bool(np.all(curve[1:] <= curve[:-1] * (1.0 + tolerance)))


def gen_clean_curve(
    gate_times: np.ndarray, rng: np.random.Generator, cfg: Optional[DataConfig] = None
) -> np.ndarray:
    """draw one strictly positive, decaying clean curve

    Draws are rejected until the curve is non-increasing (1% tolerance) with a
    late-time log-log slope inside ``[cfg.slope_min, cfg.slope_max]``.

    Parameters
    ----------
    gate_times : np.ndarray
        Gate times in seconds.
    rng : np.random.Generator
        Random stream of this record.
    cfg : DataConfig, optional
        Curve family ranges; packaged defaults when None.
    """
    cfg = cfg or DataConfig.from_params()
    gate_times = np.asarray(gate_times, dtype=np.float64)
    _check_gates(gate_times)
    t0, t1 = gate_times[0], gate_times[-1]

    for _ in range(cfg.max_draws):
        n_terms = rng.integers(1, cfg.max_terms + 1)
        powers = rng.uniform(cfg.power_min, cfg.power_max, n_terms)
        taus = np.exp(rng.uniform(np.log(t0), np.log(t1), n_terms))
        # each term's level is fixed at the first gate
        levels = np.exp(rng.uniform(np.log(cfg.level_min), np.log(cfg.level_max), n_terms))
        amplitudes = levels * t0 ** powers * np.exp(t0 / taus)
        late = np.exp(rng.uniform(np.log(cfg.late_level_min), np.log(cfg.late_level_max)))
        a0 = late * t1 ** 2.5

        curve = decay_curve(gate_times, amplitudes, powers, taus, a0)
        if not (np.all(np.isfinite(curve)) and np.all(curve > 0)):
            continue
        if not _is_monotone(curve):
            continue
        slope = late_time_slope(gate_times, curve)
        if cfg.slope_min <= slope <= cfg.slope_max:
            return curve
    raise RuntimeError(
        f"no acceptable clean curve in {cfg.max_draws} draws, check the data parameter ranges"
    )


# --------- noise components --------- #
def background_noise(t, b: float) -> np.ndarray:
    """background level b (t / 1 ms)^-1/2"""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("background noise needs t > 0")
    if b < 0:
        raise ValueError(f"background level must be >= 0, got {b}")
    return b * (t / T_REF) ** -0.5


def draw_background_level(cfg: NoiseConfig, rng: np.random.Generator) -> float:
    return float(cfg.b) if cfg.b is not None else float(rng.uniform(cfg.b_min, cfg.b_max))


def apply_auken_noise(
    clean: np.ndarray,
    gate_times: np.ndarray,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    b: Optional[float] = None,
) -> np.ndarray:
    """relative plus background noise, s + g sqrt(std^2 + (n/s)^2) s with g ~ N(0, 1)

    The noise at every gate is independent. ``b`` overrides the level from ``cfg``.
    """
    s = np.asarray(clean, dtype=np.float64)
    if np.any(s == 0):
        raise ValueError("relative noise is undefined where the clean signal is zero")
    b = draw_background_level(cfg, rng) if b is None else b
    n = background_noise(gate_times, b)
    g = rng.standard_normal(s.shape)
    return s + g * np.sqrt(cfg.std ** 2 + (n / s) ** 2) * s


def sferic_pulse(
    gate_times: np.ndarray, index: int, amplitude: float, tau_rise: float, tau_fall: float
) -> np.ndarray:
    """double-exponential impulse starting at gate ``index``, zero before it"""
    gate_times = np.asarray(gate_times, dtype=np.float64)
    dt = gate_times - gate_times[index]
    pulse = np.zeros_like(gate_times)
    after = dt >= 0
    pulse[after] = amplitude * (np.exp(-dt[after] / tau_fall) - np.exp(-dt[after] / tau_rise))
    return pulse


def draw_sferic_events(
    n_gates: int, cfg: NoiseConfig, rng: np.random.Generator
) -> List[Tuple[int, float]]:
    """Poisson number of (gate index, signed amplitude) impulses"""
    count = rng.poisson(cfg.sferic_rate)
    events = []
    for _ in range(count):
        index = int(rng.integers(0, n_gates))
        amplitude = rng.uniform(cfg.sferic_amp_min, cfg.sferic_amp_max)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        events.append((index, sign * amplitude))
    return events


def add_sferics(
    noisy: np.ndarray,
    gate_times: np.ndarray,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    events: Optional[List[Tuple[int, float]]] = None,
) -> np.ndarray:
    """add lightning impulses; ``events`` forces explicit (index, amplitude) pairs"""
    noisy = np.array(noisy, dtype=np.float64)
    if events is None:
        events = draw_sferic_events(len(gate_times), cfg, rng)
    for index, amplitude in events:
        noisy += sferic_pulse(
            gate_times, index, amplitude, cfg.sferic_tau_rise, cfg.sferic_tau_fall
        )
    return noisy


def powerline_waveform(
    gate_times: np.ndarray, amplitudes: Sequence[float], phases: Sequence[float], base: float = 50.0
) -> np.ndarray:
    """sum_h A_h sin(2 pi h base t + phi_h) for harmonics h = 1..len(amplitudes)"""
    t = np.asarray(gate_times, dtype=np.float64)[:, None]
    h = np.arange(1, len(amplitudes) + 1)
    waves = np.asarray(amplitudes) * np.sin(2 * np.pi * h * base * t + np.asarray(phases))
    return waves.sum(axis=1)


def add_powerline(
    noisy: np.ndarray, gate_times: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator
) -> np.ndarray:
    """harmonics of the mains frequency with random phases, amplitude falling as 1/h"""
    noisy = np.array(noisy, dtype=np.float64)
    if cfg.powerline_amplitude == 0 or cfg.powerline_harmonics < 1:
        return noisy
    h = np.arange(1, cfg.powerline_harmonics + 1)
    phases = rng.uniform(0, 2 * np.pi, len(h))
    wave = powerline_waveform(gate_times, cfg.powerline_amplitude / h, phases, cfg.powerline_base)
    return noisy + wave


def motion_drift(n_gates: int, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """smoothed Gaussian random walk with zero mean and RMS ``cfg.motion_amplitude``"""
    window = max(1, int(np.ceil(cfg.motion_window * n_gates)))
    walk = np.cumsum(rng.standard_normal(n_gates))
    padded = np.pad(walk, (window // 2, window - 1 - window // 2), mode="edge")
    smooth = np.convolve(padded, np.ones(window) / window, mode="valid")
    smooth -= smooth.mean()
    rms = np.sqrt(np.mean(smooth ** 2))
    if rms == 0:
        return np.zeros(n_gates)
    return smooth * (cfg.motion_amplitude / rms)


def add_motion_drift(noisy: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    noisy = np.array(noisy, dtype=np.float64)
    if cfg.motion_amplitude == 0:
        return noisy
    return noisy + motion_drift(len(noisy), cfg, rng)


def add_gaussian(noisy: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    noisy = np.array(noisy, dtype=np.float64)
    if cfg.gaussian_extra == 0:
        return noisy
    return noisy + rng.normal(0.0, cfg.gaussian_extra, noisy.shape)


def add_recorded_noise(
    noisy: np.ndarray,
    bank: Optional[np.ndarray],
    cfg: NoiseConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """add one randomly chosen and randomly scaled trace from a (K, T) noise bank"""
    noisy = np.array(noisy, dtype=np.float64)
    if bank is None or len(bank) == 0:
        return noisy
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[1] != len(noisy):
        raise ValueError(f"noise bank shape {bank.shape} does not match {len(noisy)} gates")
    trace = bank[rng.integers(0, len(bank))]
    return noisy + rng.uniform(cfg.recorded_scale_min, cfg.recorded_scale_max) * trace


def synthesize_noisy(
    clean: np.ndarray,
    gate_times: np.ndarray,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    bank: Optional[np.ndarray] = None,
) -> np.ndarray:
    """apply every noise component in a fixed order"""
    noisy = apply_auken_noise(clean, gate_times, cfg, rng)
    if cfg.sferic_rate > 0:
        noisy = add_sferics(noisy, gate_times, cfg, rng)
    noisy = add_powerline(noisy, gate_times, cfg, rng)
    noisy = add_motion_drift(noisy, cfg, rng)
    noisy = add_gaussian(noisy, cfg, rng)
    return add_recorded_noise(noisy, bank, cfg, rng)


# --------- generation --------- #
def record_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """independent counter-based stream for one record"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, stream])))


_CLEAN_STREAM, _NOISE_STREAM = 0, 1


def add_noise(
    clean: np.ndarray,
    gate_times: np.ndarray,
    noise_cfg: NoiseConfig,
    seed: int,
    bank: Optional[np.ndarray] = None,
) -> np.ndarray:
    """noisy versions of (N, T) clean curves, record i using its own stream"""
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.empty_like(clean)
    for i in range(len(clean)):
        rng = record_rng(seed, i, _NOISE_STREAM)
        noisy[i] = synthesize_noisy(clean[i], gate_times, noise_cfg, rng, bank)
    return noisy


def generate_dataset(
    count: int,
    data_cfg: Optional[DataConfig] = None,
    noise_cfg: Optional[NoiseConfig] = None,
    seed: Optional[int] = None,
    bank: Optional[np.ndarray] = None,
    clean: Optional[np.ndarray] = None,
    gate_times: Optional[np.ndarray] = None,
) -> SignalDataset:
    """generate ``count`` (clean, noisy) pairs

    Parameters
    ----------
    count : int
        Number of records; ignored when ``clean`` is given.
    seed : int, optional
        Generator seed, ``data_cfg.seed`` when None.
    bank : np.ndarray, optional
        (K, T) recorded-noise traces.
    clean, gate_times : np.ndarray, optional
        Externally computed clean curves to noise instead of drawing new ones.
    """
    data_cfg = data_cfg or DataConfig.from_params()
    noise_cfg = noise_cfg or NoiseConfig.from_params()
    seed = data_cfg.seed if seed is None else seed
    if count < 0:
        raise ValueError(f"record count must be >= 0, got {count}")

    if clean is None:
        gate_times = gen_gate_times(data_cfg.n_gates, data_cfg.t_min, data_cfg.t_max)
        clean = np.empty((count, len(gate_times)))
        for i in range(count):
            clean[i] = gen_clean_curve(gate_times, record_rng(seed, i, _CLEAN_STREAM), data_cfg)
    elif gate_times is None:
        raise ValueError("gate times are required with externally supplied clean curves")

    noisy = add_noise(clean, gate_times, noise_cfg, seed, bank)
    logger.info("generated %d records with %d gates (seed %d)", len(clean), len(gate_times), seed)
    return SignalDataset(
        gate_times, noisy, clean, data_cfg.eps, data_cfg.scale, seed, data_cfg.units
    )


# --------- normalization --------- #
def normalize(x, eps: float, scale: float = 1.0) -> np.ndarray:
    """sign(x) log10(1 + |x| / eps) / scale"""
    if eps <= 0:
        raise ValueError(f"normalization floor must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log10(1.0 + np.abs(x) / eps) / scale


def denormalize(y, eps: float, scale: float = 1.0) -> np.ndarray:
    """inverse of ``normalize``"""
    if eps <= 0:
        raise ValueError(f"normalization floor must be > 0, got {eps}")
    y = np.asarray(y, dtype=np.float64) * scale
    return np.sign(y) * eps * np.expm1(np.abs(y) * np.log(10.0))


# --------- dataset file --------- #
def _record_width(T: int, has_clean: bool) -> int:
    return T * (2 if has_clean else 1)


def dataset_size(T: int, count: int, has_clean: bool = True) -> int:
    """byte size of a dataset file"""
    return _HEADER.size + 8 * T + 8 * count * _record_width(T, has_clean)


def dataset_bytes(dataset: SignalDataset) -> bytes:
    header = _HEADER.pack(
        DATASET_MAGIC,
        DATASET_VERSION,
        dataset.n_gates,
        len(dataset),
        dataset.seed,
        dataset.units.encode(),
        dataset.eps,
        dataset.scale,
        dataset.has_clean,
    )
    if dataset.has_clean:
        body = np.concatenate([dataset.clean, dataset.noisy], axis=1)
    else:
        body = dataset.noisy
    return (
        header
        + dataset.gate_times.astype("<f8").tobytes()
        + np.ascontiguousarray(body, dtype="<f8").tobytes()
    )


def dataset_write(dataset: SignalDataset, path: str):
    """write the dataset atomically; each record is [clean | noisy] little-endian float64"""
    atomic_write_bytes(path, dataset_bytes(dataset))
    logger.info("wrote %d records to %s", len(dataset), path)


def dataset_read(path: str) -> SignalDataset:
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, T, count, seed, units, eps, scale, has_clean = _HEADER.unpack_from(payload)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported dataset version {version}, expected {DATASET_VERSION}"
        )
    expected = dataset_size(T, count, has_clean)
    if len(payload) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(payload)}")

    values = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    gate_times = values[:T]
    body = values[T:].reshape(count, _record_width(T, has_clean))
    clean = body[:, :T] if has_clean else None
    noisy = body[:, T:] if has_clean else body
    return SignalDataset(
        gate_times, noisy, clean, eps, scale, seed, units.rstrip(b"\x00").decode()
    )


# --------- CSV blocks --------- #
def _parse_block(lines: List[str], where: str) -> Tuple[np.ndarray, np.ndarray]:
    rows = [ln for ln in lines if ln.replace(" ", "").lower() != ",".join(CSV_COLUMNS)]
    if not rows:
        return np.zeros(0), np.zeros(0)
    if any(ln.count(",") != 1 for ln in rows):
        raise DatasetFormatError(f"{where}: every row needs exactly two columns")
    try:
        frame = pd.read_csv(
            io.StringIO("\n".join(rows)), header=None, names=CSV_COLUMNS, dtype=str
        )
    except pd.errors.ParserError as exc:
        raise DatasetFormatError(f"{where}: expected two columns ({exc})") from exc
    if frame.isna().any().any():
        raise DatasetFormatError(f"{where}: every row needs a time and a value")
    try:
        # exact decimal to binary conversion, so %.17g text round-trips bit for bit
        frame = frame.apply(lambda col: col.str.strip().astype(np.float64))
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: non-numeric cell ({exc})") from exc
    t = frame["time_s"].to_numpy(dtype=np.float64)
    v = frame["value"].to_numpy(dtype=np.float64)
    if np.any(t <= 0):
        raise DatasetFormatError(f"{where}: gate times must be > 0")
    if np.any(np.diff(t) <= 0):
        raise DatasetFormatError(f"{where}: gate times must be strictly increasing")
    if not np.all(np.isfinite(v)):
        raise DatasetFormatError(f"{where}: non-finite value")
    return t, v


def read_csv_blocks(path: str) -> List[Tuple[np.ndarray, np.ndarray]]:
    """``time_s,value`` blocks separated by blank lines, each with an optional header"""
    with open(path) as f:
        text = f.read()
    blocks: List[List[str]] = [[]]
    for line in text.splitlines():
        if line.strip():
            blocks[-1].append(line.strip())
        elif blocks[-1]:
            blocks.append([])
    blocks = [b for b in blocks if b]
    out = []
    for i, lines in enumerate(blocks):
        out.append(_parse_block(lines, f"{os.path.basename(path)} block {i}"))
    return [(t, v) for t, v in out if len(t)]


def import_forward_csv(path: str, eps: float = 0.01, scale: float = 1.0) -> List[SignalRecord]:
    """forward responses as records; clean = imported values, noise is applied later"""
    records = [
        SignalRecord(t, v, v.copy(), eps, scale) for t, v in read_csv_blocks(path)
    ]
    logger.info("imported %d forward responses from %s", len(records), path)
    return records


def import_noise_bank(path: str, gate_times: Optional[np.ndarray] = None) -> np.ndarray:
    """recorded noise traces as a (K, T) array, optionally checked against a gate layout"""
    blocks = read_csv_blocks(path)
    if not blocks:
        return np.zeros((0, 0 if gate_times is None else len(gate_times)))
    reference = blocks[0][0] if gate_times is None else np.asarray(gate_times)
    for i, (t, _) in enumerate(blocks):
        if len(t) != len(reference) or not np.allclose(t, reference, rtol=1e-9):
            raise DatasetFormatError(f"{path}: noise trace {i} has a different gate layout")
    return np.stack([v for _, v in blocks])


def export_forward_csv(records: Sequence[SignalRecord], path: str, column: str = "clean"):
    """write records as ``time_s,value`` blocks at full precision"""
    buffer = io.StringIO()
    for i, record in enumerate(records):
        values = record.clean if column == "clean" else record.noisy
        if values is None:
            raise ValueError(f"record {i} has no {column} values")
        if i:
            buffer.write("\n")
        frame = pd.DataFrame({"time_s": record.gate_times, "value": values})
        frame.to_csv(buffer, index=False, float_format="%.17g")
    atomic_write_bytes(path, buffer.getvalue().encode())


def write_csv(frame: pd.DataFrame, path: str, float_format: Optional[str] = "%.17g"):
    """write a table atomically, without the index"""
    text = frame.to_csv(index=False, float_format=float_format)
    atomic_write_bytes(path, text.encode())
    logger.info("wrote %s (%d rows)", path, len(frame))
