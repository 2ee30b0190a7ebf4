"""Unbalanced multi-phase network model and admittance assembly.

The network is a collection of buses, phase-coupled line segments,
switched capacitor banks, tap-changing voltage regulators and generators.
Discrete controller positions (capacitor steps, regulator taps) enter the
nodal admittance matrix, so the matrix is assembled as a function of the
controller state vector.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GridModelError(Exception):
    """Malformed network data (bad phase reference, infeasible state, ...)."""


class TopologyError(GridModelError):
    """Network is not connected from the substation bus."""


class Phase(enum.IntEnum):
    """Phase identifier; ordering a < b < c is fixed and used for indexing."""

    A = 0
    B = 1
    C = 2

    @classmethod
    def from_letter(cls, letter: str) -> "Phase":
        try:
            return cls[letter.strip().upper()]
        except KeyError:
            raise GridModelError(f"unknown phase {letter!r}") from None

    @property
    def letter(self) -> str:
        return self.name.lower()


ALL_PHASES: tuple[Phase, ...] = (Phase.A, Phase.B, Phase.C)

# Balanced reference angles (rad) used for flat starts and the slack bus.
PHASE_REFERENCE_ANGLES: dict[Phase, float] = {
    Phase.A: 0.0,
    Phase.B: -2.0 * np.pi / 3.0,
    Phase.C: 2.0 * np.pi / 3.0,
}


def parse_phases(spec: str) -> tuple[Phase, ...]:
    """Parse a phase set such as ``"abc"`` or ``"bc"`` into ordered Phases."""
    phases = sorted({Phase.from_letter(ch) for ch in spec if not ch.isspace()})
    if not phases:
        raise GridModelError(f"empty phase specification {spec!r}")
    return tuple(phases)


@dataclass(frozen=True)
class Bus:
    index: int  # dense 1..n_B
    name: str
    phases: tuple[Phase, ...]
    kv_ll: float  # line-to-line voltage base of the bus's zone (kV)
    is_slack: bool = False

    def __post_init__(self) -> None:
        if self.index < 1:
            raise GridModelError(f"bus {self.name!r}: index must be >= 1")
        if tuple(sorted(self.phases)) != self.phases:
            object.__setattr__(self, "phases", tuple(sorted(self.phases)))
        if self.kv_ll <= 0:
            raise GridModelError(f"bus {self.name!r}: kv_ll must be positive")


def _frozen_matrix(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=complex)
    if out.shape != (3, 3):
        raise GridModelError("phase matrices must be 3x3 (absent phases zero)")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LineSegment:
    """Series/shunt phase-frame admittance of one branch, in per unit.

    ``y_series`` is the 3x3 phase-coupled series admittance; ``b_shunt`` is
    the total line-charging admittance (split half at each end during
    assembly).  Rows/columns of absent phases must be exactly zero.
    """

    name: str
    from_bus: int
    to_bus: int
    y_series: np.ndarray
    b_shunt: np.ndarray
    phases: tuple[Phase, ...]

    def __post_init__(self) -> None:
        if self.from_bus == self.to_bus:
            raise GridModelError(f"line {self.name!r}: from_bus == to_bus")
        object.__setattr__(self, "y_series", _frozen_matrix(self.y_series))
        object.__setattr__(self, "b_shunt", _frozen_matrix(self.b_shunt))
        object.__setattr__(self, "phases", tuple(sorted(self.phases)))
        absent = [p for p in ALL_PHASES if p not in self.phases]
        for m in (self.y_series, self.b_shunt):
            for p in absent:
                if np.any(m[p, :]) or np.any(m[:, p]):
                    raise GridModelError(
                        f"line {self.name!r}: nonzero matrix entry for absent phase {p.letter}"
                    )


@dataclass(frozen=True)
class CapacitorBank:
    """Single-phase switched shunt; susceptance current_step * step_susceptance.

    Range defects (step counts out of bounds) are reported by validate()
    rather than rejected at construction.
    """

    name: str
    bus: int
    phase: Phase
    step_susceptance: float  # p.u. per step
    num_steps: int
    current_step: int = 0


@dataclass(frozen=True)
class VoltageRegulator:
    """Per-phase ideal tap ratio on a line, bang-bang controlled in a deadband.

    The tap scales the regulated-side voltage by (1 + tap * volts_per_tap);
    the tap moves toward ``target`` at the monitored bus only when the
    voltage leaves the band target +/- deadband, at most one tap per step.
    """

    name: str
    line: str  # name of the LineSegment the regulator acts on
    bus: int  # monitored (regulated) bus; must be the line's to_bus
    phase: Phase
    tap: int = 0
    tap_min: int = -16
    tap_max: int = 16
    volts_per_tap: float = 0.00625
    deadband: float = 0.00833  # p.u., half-band
    target: float = 1.0

    def ratio(self, tap: int) -> float:
        """Voltage gain applied to the regulated side at the given tap."""
        return 1.0 + tap * self.volts_per_tap


class GeneratorKind(enum.Enum):
    RENEWABLE = "renewable"
    DISPATCHABLE = "dispatchable"


@dataclass(frozen=True)
class GeneratorSpec:
    """Aggregated generator at a bus; active power split evenly over phases.

    For renewable units the available power is non-curtailable (the minimum
    and maximum active limits coincide at every instant), so the dispatch
    only chooses reactive power within the apparent-power circle.
    """

    name: str
    bus: int
    phases: tuple[Phase, ...]
    s_kva: float  # apparent power limit, total over phases
    kind: GeneratorKind = GeneratorKind.RENEWABLE

    def __post_init__(self) -> None:
        if self.s_kva <= 0:
            raise GridModelError(f"generator {self.name!r}: s_kva must be positive")
        object.__setattr__(self, "phases", tuple(sorted(self.phases)))


@dataclass(frozen=True)
class DiscreteControllerState:
    """Integer positions of all discrete controllers: s(t).

    ``capacitor_steps`` aligns with GridModel.capacitors, ``regulator_taps``
    with GridModel.regulators.  Hashable so assembled matrices can be cached
    per state.
    """

    capacitor_steps: tuple[int, ...]
    regulator_taps: tuple[int, ...]

    def with_capacitor_steps(self, steps: tuple[int, ...]) -> "DiscreteControllerState":
        return DiscreteControllerState(tuple(steps), self.regulator_taps)

    def with_regulator_taps(self, taps: tuple[int, ...]) -> "DiscreteControllerState":
        return DiscreteControllerState(self.capacitor_steps, tuple(taps))


@dataclass(frozen=True, eq=False)
class GridModel:
    """Immutable unbalanced network; safe to share across workers."""

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    capacitors: tuple[CapacitorBank, ...] = ()
    regulators: tuple[VoltageRegulator, ...] = ()
    generators: tuple[GeneratorSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.base_mva <= 0:
            raise GridModelError("base_mva must be positive")
        object.__setattr__(self, "buses", tuple(sorted(self.buses, key=lambda b: b.index)))
        pairs: list[tuple[int, Phase]] = []
        for bus in self.buses:
            pairs.extend((bus.index, p) for p in bus.phases)
        object.__setattr__(self, "_node_pairs", tuple(pairs))
        object.__setattr__(
            self, "_node_index", {pair: i for i, pair in enumerate(pairs)}
        )
        object.__setattr__(self, "_bus_by_index", {b.index: b for b in self.buses})
        object.__setattr__(self, "_bus_by_name", {b.name: b for b in self.buses})
        object.__setattr__(self, "_line_by_name", {l.name: l for l in self.lines})

    # -- indexing ----------------------------------------------------------

    @property
    def node_pairs(self) -> tuple[tuple[int, Phase], ...]:
        """Deterministic (bus, phase) ordering of matrix rows/columns."""
        return self._node_pairs  # type: ignore[attr-defined]

    @property
    def n_nodes(self) -> int:
        return len(self.node_pairs)

    def node_index(self, bus: int, phase: Phase) -> int:
        try:
            return self._node_index[(bus, phase)]  # type: ignore[attr-defined]
        except KeyError:
            raise GridModelError(
                f"bus {bus} has no phase {phase.letter}"
            ) from None

    def bus(self, index: int) -> Bus:
        try:
            return self._bus_by_index[index]  # type: ignore[attr-defined]
        except KeyError:
            raise GridModelError(f"no bus with index {index}") from None

    def bus_named(self, name: str) -> Bus:
        try:
            return self._bus_by_name[name]  # type: ignore[attr-defined]
        except KeyError:
            raise GridModelError(f"no bus named {name!r}") from None

    def line_named(self, name: str) -> LineSegment:
        try:
            return self._line_by_name[name]  # type: ignore[attr-defined]
        except KeyError:
            raise GridModelError(f"no line named {name!r}") from None

    @property
    def slack_bus(self) -> Bus:
        slacks = [b for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            raise GridModelError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    def slack_node_indices(self) -> list[int]:
        slack = self.slack_bus
        return [self.node_index(slack.index, p) for p in slack.phases]

    # -- per-unit conversions ----------------------------------------------

    @property
    def s_base_kva_1ph(self) -> float:
        """Per-phase power base (kVA); per-phase kW / this = p.u. power."""
        return self.base_mva * 1000.0 / 3.0

    def kw_to_pu(self, kw: float) -> float:
        return kw / self.s_base_kva_1ph

    def pu_to_kw(self, pu: float) -> float:
        return pu * self.s_base_kva_1ph

    # -- controller state ----------------------------------------------------

    def default_state(self) -> DiscreteControllerState:
        return DiscreteControllerState(
            tuple(c.current_step for c in self.capacitors),
            tuple(r.tap for r in self.regulators),
        )

    def check_state(self, s: DiscreteControllerState) -> None:
        """Raise unless s lies in the feasible set of the discrete controllers."""
        if len(s.capacitor_steps) != len(self.capacitors):
            raise GridModelError(
                f"state has {len(s.capacitor_steps)} capacitor entries, grid has {len(self.capacitors)}"
            )
        if len(s.regulator_taps) != len(self.regulators):
            raise GridModelError(
                f"state has {len(s.regulator_taps)} regulator entries, grid has {len(self.regulators)}"
            )
        for cap, step in zip(self.capacitors, s.capacitor_steps):
            if not 0 <= step <= cap.num_steps:
                raise GridModelError(
                    f"capacitor {cap.name!r}: step {step} outside 0..{cap.num_steps}"
                )
        for reg, tap in zip(self.regulators, s.regulator_taps):
            if not reg.tap_min <= tap <= reg.tap_max:
                raise GridModelError(
                    f"regulator {reg.name!r}: tap {tap} outside [{reg.tap_min}, {reg.tap_max}]"
                )


def _connected_buses(grid: GridModel) -> set[int]:
    adjacency: dict[int, set[int]] = {b.index: set() for b in grid.buses}
    for line in grid.lines:
        if line.from_bus in adjacency and line.to_bus in adjacency:
            adjacency[line.from_bus].add(line.to_bus)
            adjacency[line.to_bus].add(line.from_bus)
    seen: set[int] = set()
    stack = [grid.slack_bus.index]
    while stack:
        bus = stack.pop()
        if bus in seen:
            continue
        seen.add(bus)
        stack.extend(adjacency.get(bus, ()) - seen)
    return seen


def assemble_admittance(grid: GridModel, s: DiscreteControllerState) -> sp.csr_matrix:
    """Build the nodal admittance matrix Y(s) over (bus, phase) pairs.

    Diagonal blocks collect capacitor susceptance plus, for every incident
    line, series admittance and half the line charging; off-diagonal blocks
    are the negated series admittance.  Regulator taps apply an ideal
    per-phase voltage ratio to their line's stamps.
    """
    grid.check_state(s)
    missing = {b.index for b in grid.buses} - _connected_buses(grid)
    if missing:
        names = ", ".join(grid.bus(i).name for i in sorted(missing))
        raise TopologyError(f"buses not connected to the substation: {names}")

    ratio_by_line_phase: dict[tuple[str, Phase], float] = {}
    for reg, tap in zip(grid.regulators, s.regulator_taps):
        ratio_by_line_phase[(reg.line, reg.phase)] = reg.ratio(tap)

    n = grid.n_nodes
    rows: list[int] = []
    cols: list[int] = []
    vals: list[complex] = []

    def stamp(i: int, j: int, v: complex) -> None:
        if v != 0:
            rows.append(i)
            cols.append(j)
            vals.append(v)

    for line in grid.lines:
        for bus_index in (line.from_bus, line.to_bus):
            bus = grid.bus(bus_index)
            for p in line.phases:
                if p not in bus.phases:
                    raise GridModelError(
                        f"line {line.name!r} uses phase {p.letter} absent at bus {bus.name!r}"
                    )
        phases = line.phases
        # Regulated-side voltage gain per phase (identity without a regulator).
        g = np.array(
            [ratio_by_line_phase.get((line.name, p), 1.0) for p in phases]
        )
        y = line.y_series[np.ix_(phases, phases)]
        b_half = 0.5 * line.b_shunt[np.ix_(phases, phases)]
        y_ff = (g[:, None] * y * g[None, :]) + b_half
        y_ft = -(g[:, None] * y)
        y_tf = -(y * g[None, :])
        y_tt = y + b_half
        f_idx = [grid.node_index(line.from_bus, p) for p in phases]
        t_idx = [grid.node_index(line.to_bus, p) for p in phases]
        for a, pa in enumerate(phases):
            for b, pb in enumerate(phases):
                stamp(f_idx[a], f_idx[b], y_ff[a, b])
                stamp(f_idx[a], t_idx[b], y_ft[a, b])
                stamp(t_idx[a], f_idx[b], y_tf[a, b])
                stamp(t_idx[a], t_idx[b], y_tt[a, b])

    for cap, step in zip(grid.capacitors, s.capacitor_steps):
        bus = grid.bus(cap.bus)
        if cap.phase not in bus.phases:
            raise GridModelError(
                f"capacitor {cap.name!r} on phase {cap.phase.letter} absent at bus {bus.name!r}"
            )
        idx = grid.node_index(cap.bus, cap.phase)
        stamp(idx, idx, 1j * step * cap.step_susceptance)

    y_matrix = sp.coo_matrix(
        (np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)
    ).tocsr()
    y_matrix.sum_duplicates()
    return y_matrix


def validate(grid: GridModel) -> list[str]:
    """Return a list of model defects; empty iff the grid is well formed."""
    defects: list[str] = []

    indices = [b.index for b in grid.buses]
    if len(set(indices)) != len(indices):
        defects.append("duplicate bus indices")
    if indices and sorted(indices) != list(range(1, len(indices) + 1)):
        defects.append("bus indices are not dense 1..n")
    names = [b.name for b in grid.buses]
    if len(set(names)) != len(names):
        defects.append("duplicate bus names")

    slacks = [b for b in grid.buses if b.is_slack]
    if len(slacks) != 1:
        defects.append(f"expected exactly one slack bus, found {len(slacks)}")

    known = {b.index for b in grid.buses}
    line_names = [l.name for l in grid.lines]
    if len(set(line_names)) != len(line_names):
        defects.append("duplicate line names")
    for line in grid.lines:
        for end, bus_index in (("from", line.from_bus), ("to", line.to_bus)):
            if bus_index not in known:
                defects.append(
                    f"line {line.name!r}: {end}_bus {bus_index} does not exist"
                )
                continue
            bus = grid.bus(bus_index)
            for p in line.phases:
                if p not in bus.phases:
                    defects.append(
                        f"line {line.name!r}: phase {p.letter} absent at bus {bus.name!r}"
                    )
        for label, m in (("y_series", line.y_series), ("b_shunt", line.b_shunt)):
            if not np.allclose(m, m.T):
                defects.append(f"line {line.name!r}: {label} not symmetric in phases")

    for cap in grid.capacitors:
        if cap.bus not in known:
            defects.append(f"capacitor {cap.name!r}: bus {cap.bus} does not exist")
        elif cap.phase not in grid.bus(cap.bus).phases:
            defects.append(
                f"capacitor {cap.name!r}: phase {cap.phase.letter} absent at bus "
                f"{grid.bus(cap.bus).name!r}"
            )
        if cap.num_steps < 1:
            defects.append(f"capacitor {cap.name!r}: num_steps must be >= 1")
        elif not 0 <= cap.current_step <= cap.num_steps:
            defects.append(
                f"capacitor {cap.name!r}: current_step {cap.current_step} outside 0..{cap.num_steps}"
            )

    line_names_set = set(line_names)
    for reg in grid.regulators:
        if reg.line not in line_names_set:
            defects.append(f"regulator {reg.name!r}: line {reg.line!r} does not exist")
            continue
        line = grid.line_named(reg.line)
        if reg.bus != line.to_bus:
            defects.append(
                f"regulator {reg.name!r}: monitored bus {reg.bus} is not the line's to_bus"
            )
        if reg.phase not in line.phases:
            defects.append(
                f"regulator {reg.name!r}: phase {reg.phase.letter} not on line {reg.line!r}"
            )
    for reg in grid.regulators:
        if reg.deadband <= 0:
            defects.append(f"regulator {reg.name!r}: deadband must be > 0")
        if not reg.tap_min <= reg.tap <= reg.tap_max:
            defects.append(
                f"regulator {reg.name!r}: tap {reg.tap} outside [{reg.tap_min}, {reg.tap_max}]"
            )

    for gen in grid.generators:
        if gen.bus not in known:
            defects.append(f"generator {gen.name!r}: bus {gen.bus} does not exist")
        else:
            for p in gen.phases:
                if p not in grid.bus(gen.bus).phases:
                    defects.append(
                        f"generator {gen.name!r}: phase {p.letter} absent at bus "
                        f"{grid.bus(gen.bus).name!r}"
                    )

    if len(slacks) == 1 and not defects:
        missing = known - _connected_buses(grid)
        if missing:
            bus_names = ", ".join(grid.bus(i).name for i in sorted(missing))
            defects.append(f"buses not connected to the substation: {bus_names}")

    return defects
