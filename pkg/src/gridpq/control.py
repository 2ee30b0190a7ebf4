"""Two-timescale Volt/VAR control.

Slow timescale: hourly capacitor configuration tracking the aggregate
reactive requirement.  Fast timescale: per-minute smart-inverter reactive
dispatch and flexible-load modulation minimizing technical losses plus
weighted squared voltage deviation, every candidate checked by a full
power-flow solve.  The IEEE-1547 baseline keeps inverters at unity power
factor and leaves flexible loads at their reference consumption.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .grid import DiscreteControllerState, GridModel, Phase, assemble_admittance
from .powerflow import (
    GeneratorDispatch,
    LoadModel,
    PowerFlowError,
    SolverOptions,
    SystemState,
    expected_load,
    injected_power,
    solve,
    technical_losses,
)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class ControlError(Exception):
    """Fast-timescale optimization failed; carries the best-known decision."""

    def __init__(self, message: str, decision: "ControlDecision | None" = None):
        super().__init__(message)
        self.decision = decision


@dataclass(frozen=True)
class InverterUnit:
    """Smart inverter at a bus; active power fixed, reactive dispatchable.

    The reactive range is the apparent-power circle at the available
    active power: |q| <= sqrt(s_kva^2 - p_kw^2).
    """

    name: str
    bus: int
    phases: tuple[Phase, ...]
    s_kva: float
    p_kw: float

    def q_max_kvar(self) -> float:
        head = self.s_kva**2 - self.p_kw**2
        return math.sqrt(head) if head > 0 else 0.0


@dataclass(frozen=True)
class FlexibleUnit:
    """Flexible load aggregate with an hourly modulation band.

    Active power is the decision; reactive power follows at a fixed power
    factor.  ``reference_kw`` is what the load would consume untouched.
    """

    name: str
    bus: int
    phases: tuple[Phase, ...]
    p_min_kw: float
    p_max_kw: float
    reference_kw: float
    power_factor: float = 0.95

    def q_for(self, p_kw: float) -> float:
        return p_kw * math.tan(math.acos(self.power_factor))

    def clipped_reference(self) -> float:
        return min(max(self.reference_kw, self.p_min_kw), self.p_max_kw)


@dataclass(frozen=True)
class FastControlOptions:
    gs_rel_tol: float = 1e-3  # golden-section interval tolerance, fraction of span
    max_sweeps: int = 3
    pv_seed: bool = True  # seed inverter q from a PV-bus solve
    optimize_flexible: bool = True
    improvement_tol: float = 1e-12


@dataclass
class FastControlProblem:
    """One fast-step decision problem: minimize losses + voltage deviation."""

    grid: GridModel
    s: DiscreteControllerState
    loads: tuple[LoadModel, ...]
    inverters: tuple[InverterUnit, ...]
    flexibles: tuple[FlexibleUnit, ...]
    alpha: np.ndarray | None = None  # per-node deviation weights
    v_nom: float = 1.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    options: FastControlOptions = field(default_factory=FastControlOptions)
    y: sp.spmatrix | None = None  # cached admittance for self.s

    def __post_init__(self) -> None:
        if self.alpha is None:
            self.alpha = default_alpha(self.grid, self.loads, self.flexibles)
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.shape != (self.grid.n_nodes,):
            raise ValueError("alpha must have one weight per (bus, phase) node")
        if np.any(self.alpha < 0):
            raise ValueError("alpha weights must be nonnegative")
        if self.y is None:
            self.y = assemble_admittance(self.grid, self.s)


@dataclass(frozen=True)
class ControlDecision:
    """Setpoints chosen for one fast step, with the realized cost."""

    q_inverter_kvar: tuple[float, ...]
    p_flexible_kw: tuple[float, ...]
    s: DiscreteControllerState
    cost: float


@dataclass
class QualityMetrics:
    """Power-quality counters for a run (or deltas between paired runs)."""

    starfi: float = 0.0
    tap_changes: int = 0
    losses_kwh: float = 0.0
    lost_capacity_kw: float = 0.0  # feeder-head peak reduction vs the baseline
    loss_reduction_kw: float = 0.0


@dataclass(frozen=True)
class ProfitWeights:
    k1: float = 1.0  # $/kW on lost capacity
    k2: float = 1.0  # $/kW on loss reduction
    k3: float = 1.0  # $/customer-count on the voltage-deviation index

    def __post_init__(self) -> None:
        if min(self.k1, self.k2, self.k3) < 0:
            raise ValueError("profit weights must be nonnegative")


def default_alpha(
    grid: GridModel,
    loads: tuple[LoadModel, ...] | list[LoadModel],
    flexibles: tuple[FlexibleUnit, ...] | list[FlexibleUnit] = (),
) -> np.ndarray:
    """Unit weight on load-serving nodes, zero on pass-through nodes."""
    alpha = np.zeros(grid.n_nodes)
    for load in loads:
        if load.p_nom_kw != 0.0 or load.q_nom_kvar != 0.0:
            alpha[grid.node_index(load.bus, load.phase)] = 1.0
    for flex in flexibles:
        for phase in flex.phases:
            alpha[grid.node_index(flex.bus, phase)] = 1.0
    return alpha


def fast_cost(state: SystemState, grid: GridModel, problem: FastControlProblem) -> float:
    """Technical losses (p.u.) plus weighted squared voltage deviations."""
    losses = technical_losses(state, grid, problem.s).total_pu
    deviation = float(problem.alpha @ (state.v - problem.v_nom) ** 2)
    return losses + deviation


def _candidate_case(
    problem: FastControlProblem, qs: tuple[float, ...], ps: tuple[float, ...]
) -> tuple[list[LoadModel], list[GeneratorDispatch]]:
    loads = list(problem.loads)
    for flex, p_kw in zip(problem.flexibles, ps):
        share = 1.0 / len(flex.phases)
        q_kvar = flex.q_for(p_kw)
        for phase in flex.phases:
            loads.append(
                LoadModel(flex.bus, phase, p_kw * share, q_kvar * share)
            )
    gens = [
        GeneratorDispatch(inv.bus, inv.phases, inv.p_kw, q_kvar)
        for inv, q_kvar in zip(problem.inverters, qs)
    ]
    return loads, gens


def _evaluate(
    problem: FastControlProblem,
    qs: tuple[float, ...],
    ps: tuple[float, ...],
    x0: SystemState | None,
) -> tuple[float, SystemState | None]:
    loads, gens = _candidate_case(problem, qs, ps)
    try:
        result = solve(
            problem.grid,
            problem.s,
            loads,
            gens,
            problem.solver,
            y=problem.y,
            x0=x0,
        )
    except PowerFlowError:
        return math.inf, None
    return fast_cost(result.state, problem.grid, problem), result.state


def _pv_seed_q(
    problem: FastControlProblem,
    index: int,
    qs: tuple[float, ...],
    ps: tuple[float, ...],
    x0: SystemState | None,
) -> float | None:
    """Reactive power an inverter would contribute holding 1.0 p.u. locally.

    Runs the candidate case with this inverter as a PV bus and reads the
    reactive injection it must supply, including the local load share.
    """
    inv = problem.inverters[index]
    loads, gens = _candidate_case(problem, qs, ps)
    gens[index] = GeneratorDispatch(inv.bus, inv.phases, inv.p_kw, mode="pv", v_set=1.0)
    try:
        result = solve(
            problem.grid, problem.s, loads, gens, problem.solver, y=problem.y, x0=x0
        )
    except PowerFlowError:
        return None
    _, q_inj = injected_power(result.state, problem.y)
    q_total_pu = 0.0
    for phase in inv.phases:
        node = problem.grid.node_index(inv.bus, phase)
        q_total_pu += q_inj[node]
        for load in loads:
            if load.bus == inv.bus and load.phase == phase:
                q_total_pu += problem.grid.kw_to_pu(
                    expected_load(load, result.state.v[node])[1]
                )
    return problem.grid.pu_to_kw(q_total_pu)


def _golden_section(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Minimize f on [lo, hi]; returns (x, f(x)) including the endpoints."""
    candidates = [(f(lo), lo), (f(hi), hi)]
    a, b = lo, hi
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while (b - a) > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)
    candidates.append((f1, x1) if f1 <= f2 else ((f2, x2)))
    best_f, best_x = min(candidates, key=lambda t: t[0])
    return best_x, best_f


def solve_fast(problem: FastControlProblem) -> tuple[ControlDecision, SystemState]:
    """Choose inverter reactive power and flexible-load setpoints.

    Coordinate descent with a golden-section line search per decision
    variable; every candidate is verified by a full power-flow solve, so
    the returned decision is feasible and never worse than doing nothing
    (q = 0, flexible loads at their reference).
    """
    opts = problem.options
    qs0 = tuple(0.0 for _ in problem.inverters)
    ps0 = tuple(f.clipped_reference() for f in problem.flexibles)
    cost0, state0 = _evaluate(problem, qs0, ps0, None)
    if state0 is None:
        raise ControlError(
            "power flow does not converge at the do-nothing decision",
            ControlDecision(qs0, ps0, problem.s, math.inf),
        )

    best = {"qs": qs0, "ps": ps0, "cost": cost0, "state": state0}

    def try_candidate(qs: tuple[float, ...], ps: tuple[float, ...]) -> float:
        cost, state = _evaluate(problem, qs, ps, best["state"])
        if cost < best["cost"] and state is not None:
            best.update(qs=qs, ps=ps, cost=cost, state=state)
        return cost

    if opts.pv_seed:
        for i, inv in enumerate(problem.inverters):
            q_cap = inv.q_max_kvar()
            if q_cap == 0.0:
                continue
            q_seed = _pv_seed_q(problem, i, best["qs"], best["ps"], best["state"])
            if q_seed is None:
                continue
            q_seed = min(max(q_seed, -q_cap), q_cap)
            qs = tuple(
                q_seed if k == i else q for k, q in enumerate(best["qs"])
            )
            try_candidate(qs, best["ps"])

    coords: list[tuple[str, int, float, float]] = []
    for i, inv in enumerate(problem.inverters):
        q_cap = inv.q_max_kvar()
        if q_cap > 0.0:
            coords.append(("q", i, -q_cap, q_cap))
    if opts.optimize_flexible:
        for j, flex in enumerate(problem.flexibles):
            if flex.p_max_kw > flex.p_min_kw:
                coords.append(("p", j, flex.p_min_kw, flex.p_max_kw))

    for _ in range(opts.max_sweeps):
        cost_at_sweep_start = best["cost"]
        for kind, index, lo, hi in coords:
            # 1-D slice through the incumbent at line-search start; the
            # incumbent itself only improves via try_candidate.
            base_qs, base_ps = best["qs"], best["ps"]

            def line(x: float, _kind=kind, _index=index, _qs=base_qs, _ps=base_ps) -> float:
                if _kind == "q":
                    qs = tuple(x if k == _index else q for k, q in enumerate(_qs))
                    return try_candidate(qs, _ps)
                ps = tuple(x if k == _index else p for k, p in enumerate(_ps))
                return try_candidate(_qs, ps)

            _golden_section(line, lo, hi, tol=(hi - lo) * opts.gs_rel_tol)
        if cost_at_sweep_start - best["cost"] < opts.improvement_tol:
            break

    decision = ControlDecision(best["qs"], best["ps"], problem.s, best["cost"])
    return decision, best["state"]


def ieee1547_baseline(problem: FastControlProblem) -> tuple[ControlDecision, SystemState]:
    """Unity-power-factor operation: zero inverter reactive power, flexible
    loads at their reference value.  Regulators and capacitor banks keep
    acting through their own local rules."""
    qs = tuple(0.0 for _ in problem.inverters)
    ps = tuple(f.clipped_reference() for f in problem.flexibles)
    cost, state = _evaluate(problem, qs, ps, None)
    if state is None:
        raise ControlError(
            "power flow does not converge at the IEEE-1547 baseline",
            ControlDecision(qs, ps, problem.s, math.inf),
        )
    return ControlDecision(qs, ps, problem.s, cost), state


def capacitor_q_kvar(grid: GridModel, steps: tuple[int, ...]) -> float:
    """Reactive power the banks supply at 1.0 p.u., in kvar."""
    total_pu = sum(
        step * cap.step_susceptance for cap, step in zip(grid.capacitors, steps)
    )
    return grid.pu_to_kw(total_pu)


def solve_slow(
    q_forecast_kvar: float,
    grid: GridModel,
    previous: DiscreteControllerState,
    max_combinations: int = 1_000_000,
) -> DiscreteControllerState:
    """Capacitor configuration for the next hour.

    Chooses the step vector whose nominal reactive output is nearest the
    aggregate reactive forecast; ties prefer fewer step changes from the
    previous hour, then fewer engaged steps, then the lexicographically
    smallest vector.  Regulator taps pass through unchanged.
    """
    ranges = [range(cap.num_steps + 1) for cap in grid.capacitors]
    total = math.prod(len(r) for r in ranges) if ranges else 1
    if total > max_combinations:
        raise ControlError(
            f"capacitor search space {total} exceeds {max_combinations} combinations"
        )
    best_steps = previous.capacitor_steps
    best_key: tuple[float, int, int, tuple[int, ...]] | None = None
    for combo in itertools.product(*ranges):
        q = capacitor_q_kvar(grid, combo)
        changes = sum(
            abs(a - b) for a, b in zip(combo, previous.capacitor_steps)
        )
        key = (abs(q_forecast_kvar - q), changes, sum(combo), combo)
        if best_key is None or key < best_key:
            best_key = key
            best_steps = combo
    return replace(previous, capacitor_steps=tuple(best_steps))


def starfi(
    voltages: np.ndarray, tolerance: float = 0.05, n_customers: int | None = None
) -> float:
    """Long-duration voltage-deviation index over an evaluation window.

    Counts (node, step) events with |v - 1| beyond the tolerance band and
    normalizes per customer node.  ``voltages`` is (steps, customer nodes).
    """
    if not 0.0 < tolerance <= 0.1:
        raise ValueError("tolerance must lie in (0, 0.1]")
    voltages = np.atleast_2d(np.asarray(voltages, dtype=float))
    events = int(np.count_nonzero(np.abs(voltages - 1.0) > tolerance))
    customers = n_customers if n_customers is not None else voltages.shape[1]
    if customers <= 0:
        raise ValueError("n_customers must be positive")
    return events / customers


def profit(metrics: QualityMetrics, weights: ProfitWeights) -> float:
    """Utility profit: K1 * lost-capacity gain + K2 * loss reduction
    - K3 * voltage-deviation index."""
    return (
        weights.k1 * metrics.lost_capacity_kw
        + weights.k2 * metrics.loss_reduction_kw
        - weights.k3 * metrics.starfi
    )


def regulator_step(
    state: SystemState, grid: GridModel, taps: tuple[int, ...]
) -> tuple[tuple[int, ...], int]:
    """Bang-bang tap logic: one tap toward target when outside the deadband.

    Returns the new tap vector and the number of taps that moved.
    """
    new_taps = list(taps)
    moves = 0
    for k, reg in enumerate(grid.regulators):
        v = state.v[grid.node_index(reg.bus, reg.phase)]
        if v < reg.target - reg.deadband and new_taps[k] < reg.tap_max:
            new_taps[k] += 1
            moves += 1
        elif v > reg.target + reg.deadband and new_taps[k] > reg.tap_min:
            new_taps[k] -= 1
            moves += 1
    return tuple(new_taps), moves
