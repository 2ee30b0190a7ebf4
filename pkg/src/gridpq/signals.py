"""Forecast/measurement difference signal, its frequency split, and storage sizing.

The difference between one-step-ahead forecast and current measurement is
separated into a low-frequency part (followable by dispatch and flexible
loads) and a high-frequency remainder whose signed energy integrates to
approximately zero, so a storage system tracking it needs almost no energy
reserve, only ramp capability.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FILTER_TAPS = 20
MINUTES_PER_HOUR = 60.0


def sigmoid_weights(taps: int = FILTER_TAPS) -> np.ndarray:
    """Decreasing sigmoid tail 1 - (1 + e^(-12k - 0.5))^-1, k = 1..taps,
    normalized to unit sum so the filter has unit DC gain.

    Evaluated as e/(1 + e) with e = exp(-12k - 0.5), which is the same
    expression without the catastrophic cancellation of the printed form.
    """
    k = np.arange(1, taps + 1, dtype=float)
    e = np.exp(-12.0 * k - 0.5)
    w = e / (1.0 + e)
    return w / w.sum()


@dataclass(frozen=True)
class FilterWeights:
    """Normalized, strictly positive, non-increasing FIR weights."""

    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if np.any(np.diff(w) > 0):
            raise ValueError("weights must be non-increasing")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def default(cls) -> "FilterWeights":
        return cls(sigmoid_weights())

    @property
    def taps(self) -> int:
        return int(self.w.size)


@dataclass(frozen=True)
class EssSizing:
    """Storage requirement to track a signal with zero net energy drift."""

    capacity_kwh: float
    max_ramp_kw: float
    signal_energy_kwh: float  # signed integral of the tracked signal


@dataclass(frozen=True)
class DifferenceSignal:
    """Minute-gridded difference signal with its additive decomposition."""

    minutes: np.ndarray
    d: np.ndarray
    d_l: np.ndarray
    d_h: np.ndarray

    def __post_init__(self) -> None:
        n = self.d.size
        if not (self.minutes.size == self.d_l.size == self.d_h.size == n):
            raise ValueError("series lengths differ")


def difference_signal(forecast: np.ndarray, measured: np.ndarray) -> np.ndarray:
    """d(t) = forecast(t+1) - measured(t) on aligned equal-length series.

    The final sample has no t+1 forecast; persistence (forecast equal to
    the last measurement) closes the series, so d ends at zero.
    """
    forecast = np.asarray(forecast, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if forecast.shape != measured.shape or forecast.ndim != 1:
        raise ValueError(
            f"series must align: forecast {forecast.shape}, measured {measured.shape}"
        )
    d = np.empty_like(measured)
    d[:-1] = forecast[1:] - measured[:-1]
    d[-1] = 0.0
    return d


def lowpass(d: np.ndarray, weights: FilterWeights | None = None) -> np.ndarray:
    """Causal weighted moving average d_l(t) = sum_k w_k d(t-k).

    The first samples lack full history; the available taps are
    renormalized so the warm-up keeps unit DC gain (the very first output
    passes the input through).
    """
    weights = weights or FilterWeights.default()
    d = np.asarray(d, dtype=float)
    w = weights.w
    taps = weights.taps
    kernel = np.concatenate([[0.0], w])  # delay of one sample before tap 1
    out = np.convolve(d, kernel)[: d.size]
    # warm-up: renormalize over the taps that exist
    partial = np.cumsum(w)
    limit = min(taps, d.size)
    for t in range(1, limit):
        out[t] /= partial[t - 1]
    if d.size:
        out[0] = d[0]
    return out


def split(
    d: np.ndarray, weights: FilterWeights | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Exact additive decomposition (d_l, d_h) with d_h = d - d_l."""
    d_l = lowpass(d, weights)
    d_h = np.asarray(d, dtype=float) - d_l
    return d_l, d_h


def decompose(
    forecast: np.ndarray,
    measured: np.ndarray,
    weights: FilterWeights | None = None,
    start_minute: int = 0,
) -> DifferenceSignal:
    d = difference_signal(forecast, measured)
    d_l, d_h = split(d, weights)
    minutes = np.arange(start_minute, start_minute + d.size)
    return DifferenceSignal(minutes, d, d_l, d_h)


def signal_energy(signal: np.ndarray, dt_hours: float = 1.0 / MINUTES_PER_HOUR) -> tuple[float, float]:
    """Signed and absolute energy (kWh) of a uniformly sampled kW series."""
    signal = np.asarray(signal, dtype=float)
    return float(signal.sum() * dt_hours), float(np.abs(signal).sum() * dt_hours)


def ess_capacity_for_signal(
    signal: np.ndarray, dt_hours: float = 1.0 / MINUTES_PER_HOUR
) -> EssSizing:
    """Storage sizing to track a kW signal.

    Capacity is the peak-to-peak swing of the running energy integral; a
    sinusoid of amplitude r kW at f cycles/hour therefore sizes to
    r/(pi f) kWh.  Max ramp is the largest sample-to-sample step.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.size == 0:
        return EssSizing(0.0, 0.0, 0.0)
    energy = np.concatenate([[0.0], np.cumsum(signal) * dt_hours])
    capacity = float(energy.max() - energy.min())
    ramp = float(np.abs(np.diff(signal)).max()) if signal.size > 1 else 0.0
    signed, _ = signal_energy(signal, dt_hours)
    return EssSizing(capacity, ramp, signed)


def cutoff_cycles_per_hour(
    weights: FilterWeights | None = None, dt_hours: float = 1.0 / MINUTES_PER_HOUR
) -> float:
    """Measured -3 dB point of the filter's magnitude response."""
    weights = weights or FilterWeights.default()
    w = weights.w
    freqs = np.linspace(0.0, 0.5 / dt_hours, 20001)  # up to Nyquist
    omega = 2.0 * np.pi * freqs * dt_hours
    k = np.arange(1, w.size + 1)
    response = np.abs(np.exp(-1j * np.outer(omega, k)) @ w)
    below = np.nonzero(response <= 1.0 / np.sqrt(2.0))[0]
    return float(freqs[below[0]]) if below.size else float(freqs[-1])


def signals_to_csv(ds: DifferenceSignal, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_min", "d_kw", "d_l_kw", "d_h_kw"])
        for m, a, b, c in zip(ds.minutes, ds.d, ds.d_l, ds.d_h):
            writer.writerow([int(m), repr(float(a)), repr(float(b)), repr(float(c))])
