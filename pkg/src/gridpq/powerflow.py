"""Newton-Raphson power flow for unbalanced multi-phase networks.

Solves the polar-form mismatch equations with voltage-dependent polynomial
(ZIP-style) loads and the analytic Jacobian, including the load-model
correction terms on the voltage-derivative diagonal.  The slack bus is the
substation head; PV nodes (fixed active power and voltage magnitude) are
supported for inverter capability studies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .grid import (
    PHASE_REFERENCE_ANGLES,
    DiscreteControllerState,
    GridModel,
    Phase,
)


class PowerFlowError(Exception):
    """Power-flow solution failure."""


class NonConvergenceError(PowerFlowError):
    """Mismatch did not drop below tolerance within the iteration budget."""

    def __init__(self, message: str, residual_history: list[tuple[float, float]]):
        super().__init__(message)
        self.residual_history = residual_history


class SingularJacobianError(PowerFlowError):
    """Jacobian factorization hit a zero pivot."""

    def __init__(self, message: str, pivot_label: str):
        super().__init__(message)
        self.pivot_label = pivot_label


@dataclass
class SystemState:
    """Per-(bus, phase) voltage magnitudes (p.u.) and angles (rad)."""

    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.v.shape != self.theta.shape:
            raise ValueError("v and theta must have identical shape")

    def copy(self) -> "SystemState":
        return SystemState(self.v.copy(), self.theta.copy())

    def phasors(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)


@dataclass(frozen=True)
class LoadModel:
    """Voltage-dependent polynomial load at one (bus, phase).

    ``p_components`` is a sequence of (fraction, exponent) pairs; fractions
    must each sum to one so the nominal power is recovered at v == v_nom.
    """

    bus: int
    phase: Phase
    p_nom_kw: float
    q_nom_kvar: float
    p_components: tuple[tuple[float, float], ...] = ((1.0, 0.0),)
    q_components: tuple[tuple[float, float], ...] = ((1.0, 0.0),)
    v_nom: float = 1.0

    def __post_init__(self) -> None:
        for label, comps in (("p", self.p_components), ("q", self.q_components)):
            if not comps:
                raise ValueError(f"{label}_components must be non-empty")
            total = sum(c for c, _ in comps)
            if abs(total - 1.0) > 1e-12:
                raise ValueError(
                    f"{label}_components fractions sum to {total!r}, expected 1"
                )
            if not all(np.isfinite(e) for _, e in comps):
                raise ValueError(f"{label}_components exponent not finite")
        if self.v_nom <= 0:
            raise ValueError("v_nom must be positive")


def expected_load(model: LoadModel, v: float) -> tuple[float, float]:
    """Expected (P, Q) of the load at voltage v, in kW/kvar."""
    if v <= 0:
        raise ValueError(f"voltage must be positive, got {v}")
    ratio = v / model.v_nom
    p = model.p_nom_kw * sum(a * ratio**n for a, n in model.p_components)
    q = model.q_nom_kvar * sum(b * ratio**n for b, n in model.q_components)
    return p, q


@dataclass(frozen=True)
class GeneratorDispatch:
    """Generator injection for one solve; totals split evenly over phases.

    mode "pq" injects fixed (p_kw, q_kvar); mode "pv" holds voltage at
    v_set on the generator's nodes while injecting p_kw.
    """

    bus: int
    phases: tuple[Phase, ...]
    p_kw: float
    q_kvar: float = 0.0
    mode: str = "pq"
    v_set: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("pq", "pv"):
            raise ValueError(f"mode must be 'pq' or 'pv', got {self.mode!r}")
        if not self.phases:
            raise ValueError("dispatch needs at least one phase")


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-6
    max_iterations: int = 25
    flat_start: bool = True

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class Mismatch:
    """Active/reactive scheduling residuals over the unknown nodes (p.u.)."""

    dp: np.ndarray
    dq: np.ndarray

    @property
    def inf_norm(self) -> float:
        parts = [np.abs(self.dp), np.abs(self.dq)]
        stacked = np.concatenate([p for p in parts if p.size])
        return float(stacked.max()) if stacked.size else 0.0


@dataclass
class PowerFlowResult:
    state: SystemState
    iterations: int
    residual_history: list[tuple[float, float]]
    converged: bool


@dataclass
class LossReport:
    """Series (technical) losses; per (line, phase) and totals."""

    per_line_kw: dict[tuple[str, Phase], float]
    total_kw: float
    total_pu: float


def _dense(y: sp.spmatrix | np.ndarray) -> np.ndarray:
    if sp.issparse(y):
        return y.toarray()
    return np.asarray(y, dtype=complex)


def flat_state(grid: GridModel) -> SystemState:
    """Unit magnitudes at the balanced reference angles."""
    n = grid.n_nodes
    v = np.ones(n)
    theta = np.array([PHASE_REFERENCE_ANGLES[p] for _, p in grid.node_pairs])
    return SystemState(v, theta)


def injected_power(state: SystemState, y: sp.spmatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Realized injections (P, Q) per node, p.u.

    Evaluates the polar-form sums over all buses and phases:
    P_i = V_i sum_j V_j (G_ij cos th_ij + B_ij sin th_ij) and the
    quadrature companion for Q.
    """
    yd = _dense(y)
    g, b = yd.real, yd.imag
    v, theta = state.v, state.theta
    dth = theta[:, None] - theta[None, :]
    cos_t, sin_t = np.cos(dth), np.sin(dth)
    p = v * ((g * cos_t + b * sin_t) @ v)
    q = v * ((g * sin_t - b * cos_t) @ v)
    return p, q


# -- internal vectorized load evaluation -------------------------------------


@dataclass
class _ZipRows:
    node: np.ndarray
    scale: np.ndarray  # nominal power, p.u.
    coef: np.ndarray
    exp: np.ndarray
    v_nom: np.ndarray


def _prepare_zip(grid: GridModel, loads: tuple[LoadModel, ...] | list[LoadModel]) -> tuple[_ZipRows, _ZipRows]:
    p_rows: list[tuple[int, float, float, float, float]] = []
    q_rows: list[tuple[int, float, float, float, float]] = []
    for load in loads:
        idx = grid.node_index(load.bus, load.phase)
        p_nom = grid.kw_to_pu(load.p_nom_kw)
        q_nom = grid.kw_to_pu(load.q_nom_kvar)
        for a, n_exp in load.p_components:
            p_rows.append((idx, p_nom, a, n_exp, load.v_nom))
        for b_frac, n_exp in load.q_components:
            q_rows.append((idx, q_nom, b_frac, n_exp, load.v_nom))

    def pack(rows: list[tuple[int, float, float, float, float]]) -> _ZipRows:
        if not rows:
            empty = np.empty(0)
            return _ZipRows(np.empty(0, dtype=int), empty, empty, empty, empty)
        arr = np.array(rows, dtype=float)
        return _ZipRows(arr[:, 0].astype(int), arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])

    return pack(p_rows), pack(q_rows)


def _zip_power(rows: _ZipRows, v: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    if rows.node.size:
        ratio = v[rows.node] / rows.v_nom
        np.add.at(out, rows.node, rows.scale * rows.coef * ratio**rows.exp)
    return out


def _zip_derivative(rows: _ZipRows, v: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    if rows.node.size:
        ratio = v[rows.node] / rows.v_nom
        np.add.at(
            out,
            rows.node,
            rows.scale * rows.coef * rows.exp * ratio ** (rows.exp - 1.0) / rows.v_nom,
        )
    return out


def _generator_injections(
    grid: GridModel, generators: tuple[GeneratorDispatch, ...] | list[GeneratorDispatch]
) -> tuple[np.ndarray, np.ndarray]:
    n = grid.n_nodes
    p_gen = np.zeros(n)
    q_gen = np.zeros(n)
    for gen in generators:
        share = 1.0 / len(gen.phases)
        for phase in gen.phases:
            idx = grid.node_index(gen.bus, phase)
            p_gen[idx] += grid.kw_to_pu(gen.p_kw) * share
            if gen.mode == "pq":
                q_gen[idx] += grid.kw_to_pu(gen.q_kvar) * share
    return p_gen, q_gen


def _pv_nodes(grid: GridModel, generators) -> dict[int, float]:
    pv: dict[int, float] = {}
    slack_index = grid.slack_bus.index
    for gen in generators:
        if gen.mode != "pv" or gen.bus == slack_index:
            continue
        for phase in gen.phases:
            pv[grid.node_index(gen.bus, phase)] = gen.v_set
    return pv


@dataclass
class _UnknownLayout:
    """Row/column bookkeeping for the reduced NR system."""

    p_nodes: np.ndarray  # theta unknowns (non-slack)
    q_nodes: np.ndarray  # V unknowns (non-slack, non-PV)

    @property
    def size(self) -> int:
        return len(self.p_nodes) + len(self.q_nodes)


def _layout(grid: GridModel, pv: dict[int, float]) -> _UnknownLayout:
    slack = set(grid.slack_node_indices())
    p_nodes = np.array([i for i in range(grid.n_nodes) if i not in slack], dtype=int)
    q_nodes = np.array(
        [i for i in range(grid.n_nodes) if i not in slack and i not in pv], dtype=int
    )
    return _UnknownLayout(p_nodes, q_nodes)


def mismatch(
    grid: GridModel,
    state: SystemState,
    y: sp.spmatrix | np.ndarray,
    loads: list[LoadModel] | tuple[LoadModel, ...] = (),
    generators: list[GeneratorDispatch] | tuple[GeneratorDispatch, ...] = (),
) -> Mismatch:
    """Scheduling residual [dP; dQ] = [P_exp; Q_exp] - [P; Q] off the slack.

    Expected power combines generator injections (positive) and the
    voltage-dependent loads (negative).  PV-node reactive rows are dropped.
    """
    p, q = injected_power(state, y)
    p_zip, q_zip = _prepare_zip(grid, loads)
    n = grid.n_nodes
    p_exp = _generator_injections(grid, generators)[0] - _zip_power(p_zip, state.v, n)
    q_exp = _generator_injections(grid, generators)[1] - _zip_power(q_zip, state.v, n)
    lay = _layout(grid, _pv_nodes(grid, generators))
    return Mismatch((p_exp - p)[lay.p_nodes], (q_exp - q)[lay.q_nodes])


def jacobian(
    grid: GridModel,
    state: SystemState,
    y: sp.spmatrix | np.ndarray,
    loads: list[LoadModel] | tuple[LoadModel, ...] = (),
    generators: list[GeneratorDispatch] | tuple[GeneratorDispatch, ...] = (),
) -> np.ndarray:
    """Analytic Jacobian [dP/dth dP/dV; dQ/dth dQ/dV] over the unknowns.

    Voltage-derivative diagonals carry the polynomial-load correction, so
    the matrix is the exact (negated) derivative of the mismatch vector.
    """
    yd = _dense(y)
    g, b = yd.real, yd.imag
    v, theta = state.v, state.theta
    n = grid.n_nodes
    dth = theta[:, None] - theta[None, :]
    cos_t, sin_t = np.cos(dth), np.sin(dth)
    a1 = g * cos_t + b * sin_t
    a2 = g * sin_t - b * cos_t
    p = v * (a1 @ v)
    q = v * (a2 @ v)

    p_zip, q_zip = _prepare_zip(grid, loads)
    # d(expected)/dV; generators are voltage-independent, loads enter negated.
    dpexp_dv = -_zip_derivative(p_zip, v, n)
    dqexp_dv = -_zip_derivative(q_zip, v, n)

    vv = v[:, None] * v[None, :]
    h_block = vv * a2
    np.fill_diagonal(h_block, -(v**2) * np.diag(b) - q)
    n_block = v[:, None] * a1
    np.fill_diagonal(n_block, v * np.diag(g) + p / v - dpexp_dv)
    m_block = -vv * a1
    np.fill_diagonal(m_block, -(v**2) * np.diag(g) + p)
    l_block = v[:, None] * a2
    np.fill_diagonal(l_block, -v * np.diag(b) + q / v - dqexp_dv)

    lay = _layout(grid, _pv_nodes(grid, generators))
    top = np.hstack(
        [h_block[np.ix_(lay.p_nodes, lay.p_nodes)], n_block[np.ix_(lay.p_nodes, lay.q_nodes)]]
    )
    bottom = np.hstack(
        [m_block[np.ix_(lay.q_nodes, lay.p_nodes)], l_block[np.ix_(lay.q_nodes, lay.q_nodes)]]
    )
    return np.vstack([top, bottom])


def _unknown_label(grid: GridModel, lay: _UnknownLayout, k: int) -> str:
    if k < len(lay.p_nodes):
        node = lay.p_nodes[k]
        kind = "theta"
    else:
        node = lay.q_nodes[k - len(lay.p_nodes)]
        kind = "V"
    bus, phase = grid.node_pairs[node]
    return f"{kind} unknown at bus {grid.bus(bus).name} phase {phase.letter}"


def solve(
    grid: GridModel,
    s: DiscreteControllerState | None = None,
    loads: list[LoadModel] | tuple[LoadModel, ...] = (),
    generators: list[GeneratorDispatch] | tuple[GeneratorDispatch, ...] = (),
    options: SolverOptions | None = None,
    *,
    y: sp.spmatrix | np.ndarray | None = None,
    x0: SystemState | None = None,
) -> PowerFlowResult:
    """Newton-Raphson solve; returns the state with mismatch below tolerance.

    The update solves J dx = [dP; dQ] and applies x <- x + dx; if a full
    step increases the residual it is halved up to four times.  Slack
    magnitudes/angles stay pinned at the reference, PV nodes at v_set.
    """
    options = options or SolverOptions()
    if y is None:
        from .grid import assemble_admittance

        y = assemble_admittance(grid, s if s is not None else grid.default_state())
    yd = _dense(y)
    g, b = yd.real, yd.imag
    n = grid.n_nodes

    pv = _pv_nodes(grid, generators)
    lay = _layout(grid, pv)
    p_zip, q_zip = _prepare_zip(grid, loads)
    p_gen, q_gen = _generator_injections(grid, generators)

    state = x0.copy() if x0 is not None else flat_state(grid)
    for idx in grid.slack_node_indices():
        state.v[idx] = 1.0
        state.theta[idx] = PHASE_REFERENCE_ANGLES[grid.node_pairs[idx][1]]
    for idx, v_set in pv.items():
        state.v[idx] = v_set

    def residual(st: SystemState) -> tuple[np.ndarray, float, float]:
        dth = st.theta[:, None] - st.theta[None, :]
        cos_t, sin_t = np.cos(dth), np.sin(dth)
        p = st.v * ((g * cos_t + b * sin_t) @ st.v)
        q = st.v * ((g * sin_t - b * cos_t) @ st.v)
        p_exp = p_gen - _zip_power(p_zip, st.v, n)
        q_exp = q_gen - _zip_power(q_zip, st.v, n)
        dp = (p_exp - p)[lay.p_nodes]
        dq = (q_exp - q)[lay.q_nodes]
        m = np.concatenate([dp, dq])
        dp_inf = float(np.abs(dp).max()) if dp.size else 0.0
        dq_inf = float(np.abs(dq).max()) if dq.size else 0.0
        return m, dp_inf, dq_inf

    history: list[tuple[float, float]] = []
    m, dp_inf, dq_inf = residual(state)
    for iteration in range(1, options.max_iterations + 2):
        history.append((dp_inf, dq_inf))
        r = max(dp_inf, dq_inf)
        if r < options.tolerance:
            return PowerFlowResult(state, iteration, history, True)
        if iteration > options.max_iterations:
            break

        jac = jacobian(grid, state, yd, loads, generators)
        try:
            step = np.linalg.solve(jac, m)
        except np.linalg.LinAlgError:
            lu, _ = scipy.linalg.lu_factor(jac, check_finite=False)
            diag = np.abs(np.diag(lu))
            pivot = int(np.argmin(diag))
            label = _unknown_label(grid, lay, pivot)
            raise SingularJacobianError(
                f"singular Jacobian (zero pivot at {label})", label
            ) from None

        scale = 1.0
        n_theta = len(lay.p_nodes)
        accepted = None
        for attempt in range(5):  # full step plus up to 4 halvings
            trial = state.copy()
            trial.theta[lay.p_nodes] += scale * step[:n_theta]
            trial.v[lay.q_nodes] += scale * step[n_theta:]
            if np.all(trial.v > 0):
                m_t, dp_t, dq_t = residual(trial)
                accepted = (trial, m_t, dp_t, dq_t)
                if max(dp_t, dq_t) <= r or attempt == 4:
                    break
            scale *= 0.5
        if accepted is None:
            raise NonConvergenceError(
                "step drives a voltage magnitude non-positive even after damping",
                history,
            )
        state, m, dp_inf, dq_inf = accepted

    raise NonConvergenceError(
        f"no convergence after {options.max_iterations} iterations "
        f"(last residual {max(dp_inf, dq_inf):.3e} p.u.)",
        history,
    )


def technical_losses(
    state: SystemState,
    grid: GridModel,
    s: DiscreteControllerState | None = None,
) -> LossReport:
    """Series losses per (line, phase) and in total.

    Computed from the same branch stamps used in assembly, so the total
    matches generation minus load from the nodal injections exactly.
    """
    s = s if s is not None else grid.default_state()
    ratio_by_line_phase: dict[tuple[str, Phase], float] = {}
    for reg, tap in zip(grid.regulators, s.regulator_taps):
        ratio_by_line_phase[(reg.line, reg.phase)] = reg.ratio(tap)

    phasors = state.phasors()
    per_line: dict[tuple[str, Phase], float] = {}
    total_pu = 0.0
    for line in grid.lines:
        phases = line.phases
        gvec = np.array([ratio_by_line_phase.get((line.name, p), 1.0) for p in phases])
        yser = line.y_series[np.ix_(phases, phases)]
        b_half = 0.5 * line.b_shunt[np.ix_(phases, phases)]
        v_f = np.array([phasors[grid.node_index(line.from_bus, p)] for p in phases])
        v_t = np.array([phasors[grid.node_index(line.to_bus, p)] for p in phases])
        i_f = ((gvec[:, None] * yser * gvec[None, :]) + b_half) @ v_f - (
            gvec[:, None] * yser
        ) @ v_t
        i_t = -(yser * gvec[None, :]) @ v_f + (yser + b_half) @ v_t
        loss = (v_f * np.conj(i_f) + v_t * np.conj(i_t)).real
        for k, p in enumerate(phases):
            per_line[(line.name, p)] = grid.pu_to_kw(float(loss[k]))
        total_pu += float(loss.sum())

    return LossReport(per_line, grid.pu_to_kw(total_pu), total_pu)
