"""Finite-state Markov chains for solar insolation and load profiles.

A chain is fit per calendar context (month for solar, weekday/month for
load).  The physical variation range of each hour of day is split into N
equal levels; level 1 is the top of the range and level N the bottom.
Forecasts use the conditional expectation of the future state under the
k-step transition matrix, mapped back to the level scale.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

HOURS_PER_DAY = 24


@dataclass(frozen=True)
class MarkovModel:
    """Transition matrix plus labeling; rows are current states."""

    n_states: int
    transition: np.ndarray
    label: str  # "solar" | "load"
    context: tuple[int, ...] = ()  # (month,) or (weekday, month)

    def __post_init__(self) -> None:
        if self.n_states < 2:
            raise ValueError("n_states must be >= 2")
        if self.label not in ("solar", "load"):
            raise ValueError(f"label must be 'solar' or 'load', got {self.label!r}")
        pi = np.asarray(self.transition, dtype=float)
        if pi.shape != (self.n_states, self.n_states):
            raise ValueError("transition matrix shape does not match n_states")
        if np.any(pi < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("every transition row must sum to 1")
        pi = pi.copy()
        pi.setflags(write=False)
        object.__setattr__(self, "transition", pi)
        object.__setattr__(self, "context", tuple(self.context))


@dataclass(frozen=True)
class VariationRange:
    """Per-hour (min, max) physical values; 24 entries."""

    hourly_min: np.ndarray
    hourly_max: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.hourly_min, dtype=float)
        hi = np.asarray(self.hourly_max, dtype=float)
        if lo.shape != (HOURS_PER_DAY,) or hi.shape != (HOURS_PER_DAY,):
            raise ValueError("variation range needs exactly 24 (min, max) entries")
        if np.any(lo > hi):
            raise ValueError("hourly min must not exceed hourly max")
        lo, hi = lo.copy(), hi.copy()
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "hourly_min", lo)
        object.__setattr__(self, "hourly_max", hi)

    def bounds(self, hour: int) -> tuple[float, float]:
        h = hour % HOURS_PER_DAY
        return float(self.hourly_min[h]), float(self.hourly_max[h])


@dataclass(frozen=True)
class FlexibleLoadEnvelope:
    """Hourly modulation band of a flexible load (kW)."""

    p_min: np.ndarray
    p_max: np.ndarray

    def bounds(self, hour: int) -> tuple[float, float]:
        h = hour % HOURS_PER_DAY
        return float(self.p_min[h]), float(self.p_max[h])


def state_of(value: float, lo: float, hi: float, n_states: int) -> int:
    """Level (1 = top subinterval, N = bottom) of a value within [lo, hi]."""
    width = (hi - lo) / n_states
    if width == 0.0:
        return 1
    state = int(np.floor((hi - value) / width)) + 1
    return min(max(state, 1), n_states)


def level_interval(state: int, lo: float, hi: float, n_states: int) -> tuple[float, float]:
    """Physical subinterval covered by a level."""
    width = (hi - lo) / n_states
    upper = hi - (state - 1) * width
    return upper - width, upper


def level_midpoint(state: float, lo: float, hi: float, n_states: int) -> float:
    width = (hi - lo) / n_states
    return hi - (state - 0.5) * width


def fit(
    values: np.ndarray,
    hours: np.ndarray,
    n_states: int,
    label: str,
    context: tuple[int, ...] = (),
) -> tuple[MarkovModel, VariationRange]:
    """Estimate transition probabilities and hourly ranges from a series.

    Samples are leveled against their own hour-of-day range; transitions
    are counted between consecutive samples and pooled over the whole
    series.  Rows never visited fall back to the uniform distribution.
    """
    if n_states < 2:
        raise ValueError("n_states must be >= 2")
    values = np.asarray(values, dtype=float)
    hours = np.asarray(hours, dtype=int)
    if values.size == 0:
        raise ValueError("series is empty")
    if values.shape != hours.shape:
        raise ValueError("values and hours must align")
    observed = set(int(h) % HOURS_PER_DAY for h in hours)
    missing = sorted(set(range(HOURS_PER_DAY)) - observed)
    if missing:
        raise ValueError(f"no observations for hours {missing}")

    lo = np.full(HOURS_PER_DAY, np.inf)
    hi = np.full(HOURS_PER_DAY, -np.inf)
    for h in range(HOURS_PER_DAY):
        sel = values[hours % HOURS_PER_DAY == h]
        lo[h], hi[h] = sel.min(), sel.max()
    vrange = VariationRange(lo, hi)

    states = np.empty(values.size, dtype=int)
    for k, (x, h) in enumerate(zip(values, hours % HOURS_PER_DAY)):
        states[k] = state_of(x, lo[h], hi[h], n_states)

    counts = np.zeros((n_states, n_states))
    for a, b in zip(states[:-1], states[1:]):
        counts[a - 1, b - 1] += 1.0
    row_totals = counts.sum(axis=1)
    pi = np.where(
        row_totals[:, None] > 0,
        counts / np.where(row_totals[:, None] > 0, row_totals[:, None], 1.0),
        1.0 / n_states,
    )
    return MarkovModel(n_states, pi, label, context), vrange


def simulate_with_states(
    model: MarkovModel,
    vrange: VariationRange,
    initial_state: int,
    hours: int,
    rng_seed: int,
    steps_per_state: int = 1,
    start_hour: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Physical trajectory plus the hourly level path that produced it."""
    if not 1 <= initial_state <= model.n_states:
        raise ValueError(f"initial_state {initial_state} outside 1..{model.n_states}")
    rng = np.random.default_rng(rng_seed)
    out = np.empty(hours * steps_per_state)
    states = np.empty(hours, dtype=int)
    state = initial_state
    pos = 0
    for h in range(hours):
        states[h] = state
        lo, hi = vrange.bounds(start_hour + h)
        lower, upper = level_interval(state, lo, hi, model.n_states)
        for _ in range(steps_per_state):
            out[pos] = rng.uniform(lower, upper) if upper > lower else lower
            pos += 1
        state = int(rng.choice(model.n_states, p=model.transition[state - 1])) + 1
    return out, states


def simulate(
    model: MarkovModel,
    vrange: VariationRange,
    initial_state: int,
    hours: int,
    rng_seed: int,
    steps_per_state: int = 1,
    start_hour: int = 0,
) -> np.ndarray:
    """Sample a physical trajectory; the level holds for one hour.

    With steps_per_state > 1 every hour produces that many uniform draws
    inside the level's subinterval (minute-scale noise on an hourly chain).
    Identical inputs and seed give an identical series.
    """
    return simulate_with_states(
        model, vrange, initial_state, hours, rng_seed, steps_per_state, start_hour
    )[0]


def forecast(
    model: MarkovModel,
    vrange: VariationRange,
    current_state: int,
    horizon: int,
    hour: int = 0,
) -> float:
    """Expected physical value k hours ahead given the current level.

    Uses E[X_{t+k} | X_t = i] from the k-step transition matrix and maps
    the expected level back through the inverted labeling (level 1 at the
    top of the hour's range); k = 0 returns the current level midpoint.
    """
    if not 1 <= current_state <= model.n_states:
        raise ValueError(f"current_state {current_state} outside 1..{model.n_states}")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    pk = np.linalg.matrix_power(model.transition, horizon)
    expected_state = float(pk[current_state - 1] @ np.arange(1, model.n_states + 1))
    lo, hi = vrange.bounds(hour + horizon)
    return level_midpoint(expected_state, lo, hi, model.n_states)


def flexible_envelope(model: MarkovModel, vrange: VariationRange) -> FlexibleLoadEnvelope:
    """Modulation band of a flexible load: the hourly variation extremes."""
    if model.label != "load":
        raise ValueError("flexible envelopes are defined for load models only")
    return FlexibleLoadEnvelope(vrange.hourly_min.copy(), vrange.hourly_max.copy())


# -- persistence and CSV ingest ----------------------------------------------


def save_model(model: MarkovModel, vrange: VariationRange, path: str | Path) -> None:
    payload = {
        "n_states": model.n_states,
        "label": model.label,
        "context": list(model.context),
        "transition": model.transition.tolist(),
        "hourly_min": vrange.hourly_min.tolist(),
        "hourly_max": vrange.hourly_max.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_model(path: str | Path) -> tuple[MarkovModel, VariationRange]:
    payload = json.loads(Path(path).read_text())
    model = MarkovModel(
        payload["n_states"],
        np.array(payload["transition"]),
        payload["label"],
        tuple(payload["context"]),
    )
    vrange = VariationRange(
        np.array(payload["hourly_min"]), np.array(payload["hourly_max"])
    )
    return model, vrange


def read_profile_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a (timestamp, value) CSV; returns (hour-of-day, value) arrays."""
    hours: list[int] = []
    values: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 2:
            raise ValueError(f"{path}: expected two columns (timestamp, value)")
        for row in reader:
            if not row:
                continue
            stamp = datetime.fromisoformat(row[0])
            hours.append(stamp.hour)
            values.append(float(row[1]))
    if not values:
        raise ValueError(f"{path}: no data rows")
    return np.array(hours, dtype=int), np.array(values)


def write_series_csv(
    path: str | Path, values: np.ndarray, column: str = "kw", start_minute: int = 0
) -> None:
    """Write a minute-indexed series as CSV with a t_min column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_min", column])
        for k, val in enumerate(values):
            writer.writerow([start_minute + k, repr(float(val))])
