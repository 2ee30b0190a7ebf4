"""End-to-end two-timescale simulation of a feeder day.

Hourly slow steps pick the capacitor configuration from the aggregate
reactive forecast; minute fast steps sample solar and load realizations
from the fitted chains, derive the forecast/measurement difference signal,
dispatch the controls for the selected mode and log power-quality metrics.
Identical seeds give identical stochastic draws in both modes, so paired
runs differ only through the control strategy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import markov, signals
from .control import (
    ControlDecision,
    FastControlOptions,
    FastControlProblem,
    FlexibleUnit,
    InverterUnit,
    ProfitWeights,
    QualityMetrics,
    _candidate_case,
    default_alpha,
    ieee1547_baseline,
    profit,
    regulator_step,
    solve_fast,
    solve_slow,
    starfi,
)
from .grid import DiscreteControllerState, GridModel, assemble_admittance
from .gridfile import GridCase, load_grid_file
from .powerflow import LoadModel, SolverOptions, injected_power, solve, technical_losses

MINUTES_PER_HOUR = 60

MODES = ("baseline", "fast_control")


class ScenarioError(Exception):
    """Bad scenario configuration or a failed step in a run."""


@dataclass
class ScenarioConfig:
    grid_file: Path
    profiles: dict[str, Path]  # load class -> per-unit profile CSV
    solar_profile: Path
    mode: str = "baseline"
    season: str = "summer"
    horizon_hours: int = 24
    slow_step_minutes: int = 60
    fast_step_minutes: int = 1
    seed: int = 7
    n_states: int = 10
    month: int = 7
    weekday: int = 2
    solar_bus: str = "634"
    solar_generator: str = "pv634"
    solar_peak_kw: float = 100.0
    flexible_bus: str = "671"
    flexible_class: str = "commercial"
    optimize_flexible: bool = True
    tolerance: float = 0.05
    weights: ProfitWeights = field(default_factory=ProfitWeights)
    control_options: FastControlOptions = field(default_factory=FastControlOptions)
    solver: SolverOptions = field(default_factory=SolverOptions)
    out_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.slow_step_minutes % self.fast_step_minutes:
            raise ScenarioError("fast step must divide the slow step")
        if (self.horizon_hours * MINUTES_PER_HOUR) % self.slow_step_minutes:
            raise ScenarioError("horizon must be a multiple of the slow step")


def scenario_from_yaml(path: str | Path, mode: str | None = None, seed: int | None = None) -> ScenarioConfig:
    """Read a scenario config; relative paths resolve against the file."""
    path = Path(path)
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: not a mapping document")
    base = path.parent

    def resolve(p) -> Path:
        p = Path(str(p))
        return p if p.is_absolute() else base / p

    control = doc.get("control", {}) or {}
    weights_raw = control.get("weights", {}) or {}
    solar = doc.get("solar", {}) or {}
    flexible = doc.get("flexible", {}) or {}
    config = ScenarioConfig(
        grid_file=resolve(doc["grid"]),
        profiles={str(k): resolve(v) for k, v in (doc.get("profiles", {}) or {}).items()},
        solar_profile=resolve(solar["profile"]),
        mode=str(mode if mode is not None else control.get("mode", "baseline")),
        season=str(doc.get("season", "summer")),
        horizon_hours=int(doc.get("horizon_hours", 24)),
        slow_step_minutes=int(doc.get("slow_step_minutes", 60)),
        fast_step_minutes=int(doc.get("fast_step_minutes", 1)),
        seed=int(seed if seed is not None else doc.get("seed", 7)),
        n_states=int(doc.get("markov_states", 10)),
        month=int(doc.get("month", 7)),
        weekday=int(doc.get("weekday", 2)),
        solar_bus=str(solar.get("bus", "634")),
        solar_generator=str(solar.get("generator", "pv634")),
        solar_peak_kw=float(solar.get("peak_kw", 100.0)),
        flexible_bus=str(flexible.get("bus", "671")),
        flexible_class=str(flexible.get("class", "commercial")),
        optimize_flexible=bool(flexible.get("optimize", True)),
        tolerance=float(control.get("tolerance", 0.05)),
        weights=ProfitWeights(
            float(weights_raw.get("k1", 1.0)),
            float(weights_raw.get("k2", 1.0)),
            float(weights_raw.get("k3", 1.0)),
        ),
        out_dir=Path(doc["output"]) if "output" in doc else None,
    )
    return config


# -- realizations shared by both modes ---------------------------------------


@dataclass
class DayRealization:
    """All stochastic draws for one simulated day, independent of mode."""

    solar_kw: np.ndarray  # minute series at the PV bus
    solar_forecast_kw: np.ndarray  # one-step-ahead forecast series
    class_factor: dict[str, np.ndarray]  # per-unit minute series per class
    class_forecast_hourly: dict[str, np.ndarray]  # per-unit, one per hour
    diff: signals.DifferenceSignal


def _minute_forecast(
    model: markov.MarkovModel,
    vrange: markov.VariationRange,
    states: np.ndarray,
    hours: int,
    steps_per_hour: int,
) -> np.ndarray:
    """Forecast of the next minute's value at each minute.

    Within an hour the level holds, so the forecast is the current level
    midpoint; on the last minute of an hour it is the one-hour-ahead
    conditional expectation mapped into the next hour's range.
    """
    out = np.empty(hours * steps_per_hour)
    for h in range(hours):
        lo, hi = vrange.bounds(h)
        mid = markov.level_midpoint(states[h], lo, hi, model.n_states)
        base = h * steps_per_hour
        out[base : base + steps_per_hour] = mid
        out[base + steps_per_hour - 1] = markov.forecast(
            model, vrange, int(states[h]), 1, hour=h
        )
    return out


def realize_day(
    config: ScenarioConfig,
    solar_fit: tuple[markov.MarkovModel, markov.VariationRange],
    class_fits: dict[str, tuple[markov.MarkovModel, markov.VariationRange]],
) -> DayRealization:
    """Draw the day's solar and load realizations from the chains."""
    steps_per_hour = MINUTES_PER_HOUR // config.fast_step_minutes
    hours = config.horizon_hours
    children = np.random.SeedSequence(config.seed).spawn(1 + len(class_fits))

    solar_model, solar_range = solar_fit
    start_state = (solar_model.n_states + 1) // 2
    raw, states = markov.simulate_with_states(
        solar_model,
        solar_range,
        start_state,
        hours,
        children[0],
        steps_per_state=steps_per_hour,
    )
    scale = config.solar_peak_kw / float(solar_range.hourly_max.max())
    solar_kw = raw * scale
    forecast_kw = (
        _minute_forecast(solar_model, solar_range, states, hours, steps_per_hour) * scale
    )
    diff = signals.decompose(forecast_kw, solar_kw)

    class_factor: dict[str, np.ndarray] = {}
    class_forecast: dict[str, np.ndarray] = {}
    for k, (cls, (model, vrange)) in enumerate(sorted(class_fits.items()), start=1):
        cls_start = (model.n_states + 1) // 2
        series, cls_states = markov.simulate_with_states(
            model, vrange, cls_start, hours, children[k], steps_per_state=steps_per_hour
        )
        class_factor[cls] = series
        fc = np.empty(hours)
        fc[0] = markov.forecast(model, vrange, int(cls_states[0]), 0, hour=0)
        for h in range(1, hours):
            fc[h] = markov.forecast(model, vrange, int(cls_states[h - 1]), 1, hour=h - 1)
        class_forecast[cls] = fc

    return DayRealization(solar_kw, forecast_kw, class_factor, class_forecast, diff)


# -- the run itself -----------------------------------------------------------


@dataclass
class RunReport:
    """Per-step series of one simulated day plus summary scalars."""

    mode: str
    seed: int
    fast_step_minutes: int
    node_labels: list[str]
    customer_nodes: list[int]
    minutes: np.ndarray
    losses_kw: np.ndarray
    feeder_head_kw: np.ndarray
    tap_changes_cum: np.ndarray
    starfi_events_cum: np.ndarray
    buses_in_band: np.ndarray
    cost: np.ndarray
    v_min: np.ndarray  # over customer nodes
    v_max: np.ndarray
    voltages: np.ndarray | None  # (steps, nodes)
    q_inverter_kvar: np.ndarray  # (steps, n_inverters)
    p_flexible_kw: np.ndarray  # (steps, n_flexibles)
    cap_steps: np.ndarray  # (steps, n_caps)
    reg_taps: np.ndarray  # (steps, n_regs)
    solar_kw: np.ndarray
    solar_forecast_kw: np.ndarray
    d_kw: np.ndarray
    d_l_kw: np.ndarray
    d_h_kw: np.ndarray
    n_load_buses: int

    @property
    def steps(self) -> int:
        return int(self.minutes.size)

    @property
    def n_customers(self) -> int:
        return len(self.customer_nodes)

    def total_losses_kwh(self) -> float:
        return float(self.losses_kw.sum() * self.fast_step_minutes / 60.0)

    def starfi_total(self) -> float:
        return float(self.starfi_events_cum[-1]) / self.n_customers

    def in_band_fraction(self, tolerance: float = 0.05) -> float:
        ok = (self.v_min >= 1.0 - tolerance) & (self.v_max <= 1.0 + tolerance)
        return float(ok.mean())


def _scaled_loads(
    case: GridCase,
    factors: dict[str, float],
    skip: set[int],
) -> list[LoadModel]:
    out: list[LoadModel] = []
    for k, (load, cls) in enumerate(zip(case.loads, case.classes)):
        if k in skip:
            continue
        f = factors.get(cls, 1.0)
        out.append(
            replace(load, p_nom_kw=load.p_nom_kw * f, q_nom_kvar=load.q_nom_kvar * f)
        )
    return out


def run(config: ScenarioConfig) -> RunReport:
    """Simulate one day under the configured control mode."""
    case = load_grid_file(config.grid_file)
    grid = case.grid

    from .grid import validate as validate_grid

    defects = validate_grid(grid)
    if defects:
        raise ScenarioError(f"grid file has defects: {defects}")

    class_fits = {
        cls: markov.fit(*_read_profile(path), config.n_states, "load", (config.weekday, config.month))
        for cls, path in sorted(config.profiles.items())
    }
    solar_hours, solar_values = _read_profile(config.solar_profile)
    solar_fit = markov.fit(
        solar_values, solar_hours, config.n_states, "solar", (config.month,)
    )
    day = realize_day(config, solar_fit, class_fits)

    # flexible block: loads of the flexible class at the flexible bus
    flex_bus = grid.bus_named(config.flexible_bus).index
    flex_idx = {
        k
        for k, (load, cls) in enumerate(zip(case.loads, case.classes))
        if cls == config.flexible_class and load.bus == flex_bus
    }
    if not flex_idx:
        raise ScenarioError(
            f"no {config.flexible_class!r} loads at bus {config.flexible_bus!r}"
        )
    flex_loads = [case.loads[k] for k in sorted(flex_idx)]
    flex_p_nom = sum(l.p_nom_kw for l in flex_loads)
    flex_q_nom = sum(l.q_nom_kvar for l in flex_loads)
    flex_phases = tuple(sorted({l.phase for l in flex_loads}))
    flex_pf = math.cos(math.atan2(flex_q_nom, flex_p_nom))
    flex_model, flex_range = class_fits[config.flexible_class]

    gen_spec = next(
        (g for g in grid.generators if g.name == config.solar_generator), None
    )
    if gen_spec is None:
        raise ScenarioError(f"grid has no generator named {config.solar_generator!r}")

    class_q_nom = {
        cls: sum(l.q_nom_kvar for l, c in zip(case.loads, case.classes) if c == cls)
        for cls in config.profiles
    }

    customer_nodes = sorted(
        {grid.node_index(l.bus, l.phase) for l in case.loads}
    )
    load_buses = sorted({l.bus for l in case.loads})
    bus_nodes = {
        b: [grid.node_index(l.bus, l.phase) for l in case.loads if l.bus == b]
        for b in load_buses
    }

    steps_per_hour = MINUTES_PER_HOUR // config.fast_step_minutes
    n_steps = config.horizon_hours * steps_per_hour
    minutes_per_slow = config.slow_step_minutes // config.fast_step_minutes

    alpha = default_alpha(grid, case.loads)
    y_cache: dict[DiscreteControllerState, object] = {}

    def y_for(s: DiscreteControllerState):
        if s not in y_cache:
            y_cache[s] = assemble_admittance(grid, s)
        return y_cache[s]

    n_caps = len(grid.capacitors)
    n_regs = len(grid.regulators)
    report = RunReport(
        mode=config.mode,
        seed=config.seed,
        fast_step_minutes=config.fast_step_minutes,
        node_labels=[f"{grid.bus(b).name}:{p.letter}" for b, p in grid.node_pairs],
        customer_nodes=customer_nodes,
        minutes=np.arange(n_steps) * config.fast_step_minutes,
        losses_kw=np.zeros(n_steps),
        feeder_head_kw=np.zeros(n_steps),
        tap_changes_cum=np.zeros(n_steps, dtype=int),
        starfi_events_cum=np.zeros(n_steps, dtype=int),
        buses_in_band=np.zeros(n_steps, dtype=int),
        cost=np.zeros(n_steps),
        v_min=np.zeros(n_steps),
        v_max=np.zeros(n_steps),
        voltages=np.zeros((n_steps, grid.n_nodes)),
        q_inverter_kvar=np.zeros((n_steps, 1)),
        p_flexible_kw=np.zeros((n_steps, 1)),
        cap_steps=np.zeros((n_steps, n_caps), dtype=int),
        reg_taps=np.zeros((n_steps, n_regs), dtype=int),
        solar_kw=day.solar_kw,
        solar_forecast_kw=day.solar_forecast_kw,
        d_kw=day.diff.d,
        d_l_kw=day.diff.d_l,
        d_h_kw=day.diff.d_h,
        n_load_buses=len(load_buses),
    )

    s = grid.default_state()
    slack_nodes = grid.slack_node_indices()
    tap_changes = 0
    starfi_events = 0
    warm: dict[str, object] = {"state": None}
    tol = config.tolerance

    for step in range(n_steps):
        hour = (step * config.fast_step_minutes) // MINUTES_PER_HOUR

        if step % minutes_per_slow == 0:
            q_forecast = sum(
                class_q_nom[cls] * day.class_forecast_hourly[cls][hour]
                for cls in config.profiles
            )
            s = solve_slow(q_forecast, grid, s)

        factors = {cls: float(day.class_factor[cls][step]) for cls in config.profiles}
        loads_t = _scaled_loads(case, factors, flex_idx)

        flex_realized = flex_p_nom * factors[config.flexible_class]
        env_lo, env_hi = flex_range.bounds(hour)
        p_lo, p_hi = env_lo * flex_p_nom, env_hi * flex_p_nom
        if config.mode == "fast_control":
            reference = min(max(flex_realized - day.diff.d_l[step], p_lo), p_hi)
            p_avail = float(day.solar_kw[step] + day.diff.d_h[step])
        else:
            reference = flex_realized
            p_avail = float(day.solar_kw[step])

        inverter = InverterUnit(
            gen_spec.name, gen_spec.bus, gen_spec.phases, gen_spec.s_kva, p_avail
        )
        flexible = FlexibleUnit(
            "flex", flex_bus, flex_phases, p_lo, p_hi, reference, flex_pf
        )
        problem = FastControlProblem(
            grid,
            s,
            tuple(loads_t),
            (inverter,),
            (flexible,),
            alpha=alpha,
            solver=config.solver,
            options=replace(
                config.control_options, optimize_flexible=config.optimize_flexible
            ),
            y=y_for(s),
        )
        try:
            if config.mode == "fast_control":
                decision, state = solve_fast(problem)
            else:
                decision, state = ieee1547_baseline(problem)
        except Exception as exc:
            if config.out_dir is not None:
                _truncate_and_write(report, step, config)
            raise ScenarioError(f"step {step} (minute {step * config.fast_step_minutes}): {exc}") from exc

        new_taps, moves = regulator_step(state, grid, s.regulator_taps)
        if moves:
            tap_changes += moves
            s = s.with_regulator_taps(new_taps)
            cand_loads, cand_gens = _candidate_case(
                problem, decision.q_inverter_kvar, decision.p_flexible_kw
            )
            try:
                state = solve(
                    grid, s, cand_loads, cand_gens, config.solver, y=y_for(s), x0=state
                ).state
            except Exception as exc:
                if config.out_dir is not None:
                    _truncate_and_write(report, step, config)
                raise ScenarioError(
                    f"step {step}: power flow failed after tap move: {exc}"
                ) from exc
        warm["state"] = state

        v = state.v
        cust_v = v[customer_nodes]
        events = int(np.count_nonzero(np.abs(cust_v - 1.0) > tol))
        starfi_events += events
        in_band = sum(
            1
            for b in load_buses
            if np.all(np.abs(v[bus_nodes[b]] - 1.0) <= tol)
        )
        losses = technical_losses(state, grid, s)
        p_inj, _ = injected_power(state, y_for(s))
        head_kw = grid.pu_to_kw(float(p_inj[slack_nodes].sum()))

        report.losses_kw[step] = losses.total_kw
        report.feeder_head_kw[step] = head_kw
        report.tap_changes_cum[step] = tap_changes
        report.starfi_events_cum[step] = starfi_events
        report.buses_in_band[step] = in_band
        report.cost[step] = decision.cost
        report.v_min[step] = float(cust_v.min())
        report.v_max[step] = float(cust_v.max())
        report.voltages[step] = v
        report.q_inverter_kvar[step] = decision.q_inverter_kvar
        report.p_flexible_kw[step] = decision.p_flexible_kw
        report.cap_steps[step] = s.capacitor_steps
        report.reg_taps[step] = s.regulator_taps

    if config.out_dir is not None:
        write_report(report, config.out_dir)
    return report


def _read_profile(path: Path) -> tuple[np.ndarray, np.ndarray]:
    hours, values = markov.read_profile_csv(path)
    return values, hours


def _truncate_and_write(report: RunReport, steps_done: int, config: ScenarioConfig) -> None:
    """Flush a partial report when a run dies mid-day."""
    partial = replace(
        report,
        minutes=report.minutes[:steps_done],
        losses_kw=report.losses_kw[:steps_done],
        feeder_head_kw=report.feeder_head_kw[:steps_done],
        tap_changes_cum=report.tap_changes_cum[:steps_done],
        starfi_events_cum=report.starfi_events_cum[:steps_done],
        buses_in_band=report.buses_in_band[:steps_done],
        cost=report.cost[:steps_done],
        v_min=report.v_min[:steps_done],
        v_max=report.v_max[:steps_done],
        voltages=report.voltages[:steps_done] if report.voltages is not None else None,
        q_inverter_kvar=report.q_inverter_kvar[:steps_done],
        p_flexible_kw=report.p_flexible_kw[:steps_done],
        cap_steps=report.cap_steps[:steps_done],
        reg_taps=report.reg_taps[:steps_done],
        solar_kw=report.solar_kw[:steps_done],
        solar_forecast_kw=report.solar_forecast_kw[:steps_done],
        d_kw=report.d_kw[:steps_done],
        d_l_kw=report.d_l_kw[:steps_done],
        d_h_kw=report.d_h_kw[:steps_done],
    )
    write_report(partial, config.out_dir, partial_steps=steps_done)


# -- persistence ---------------------------------------------------------------


def write_report(report: RunReport, out_dir: str | Path, partial_steps: int | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "t_min",
                "losses_kw",
                "feeder_head_kw",
                "tap_changes_cum",
                "starfi_events_cum",
                "buses_in_band",
                "cost",
                "v_min",
                "v_max",
            ]
        )
        for k in range(report.steps):
            w.writerow(
                [
                    int(report.minutes[k]),
                    repr(float(report.losses_kw[k])),
                    repr(float(report.feeder_head_kw[k])),
                    int(report.tap_changes_cum[k]),
                    int(report.starfi_events_cum[k]),
                    int(report.buses_in_band[k]),
                    repr(float(report.cost[k])),
                    repr(float(report.v_min[k])),
                    repr(float(report.v_max[k])),
                ]
            )

    if report.voltages is not None:
        with open(out / "voltages.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_min"] + report.node_labels)
            for k in range(report.steps):
                w.writerow(
                    [int(report.minutes[k])]
                    + [repr(float(x)) for x in report.voltages[k]]
                )

    with open(out / "decisions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_min", "q_inverter_kvar", "p_flexible_kw", "cap_steps", "reg_taps", "cost"])
        for k in range(report.steps):
            w.writerow(
                [
                    int(report.minutes[k]),
                    "/".join(repr(float(x)) for x in report.q_inverter_kvar[k]),
                    "/".join(repr(float(x)) for x in report.p_flexible_kw[k]),
                    "/".join(str(int(x)) for x in report.cap_steps[k]),
                    "/".join(str(int(x)) for x in report.reg_taps[k]),
                    repr(float(report.cost[k])),
                ]
            )

    with open(out / "signals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_min", "solar_kw", "solar_forecast_kw", "d_kw", "d_l_kw", "d_h_kw"])
        for k in range(report.steps):
            w.writerow(
                [
                    int(report.minutes[k]),
                    repr(float(report.solar_kw[k])),
                    repr(float(report.solar_forecast_kw[k])),
                    repr(float(report.d_kw[k])),
                    repr(float(report.d_l_kw[k])),
                    repr(float(report.d_h_kw[k])),
                ]
            )

    sizing = signals.ess_capacity_for_signal(report.d_h_kw)
    summary = {
        "mode": report.mode,
        "seed": report.seed,
        "steps": report.steps,
        "fast_step_minutes": report.fast_step_minutes,
        "partial_steps": partial_steps,
        "n_customers": report.n_customers,
        "n_load_buses": report.n_load_buses,
        "customer_nodes": report.customer_nodes,
        "node_labels": report.node_labels,
        "tap_changes_total": int(report.tap_changes_cum[-1]) if report.steps else 0,
        "starfi_events_total": int(report.starfi_events_cum[-1]) if report.steps else 0,
        "starfi_per_customer": report.starfi_total() if report.steps else 0.0,
        "losses_kwh": report.total_losses_kwh(),
        "v_min": float(report.v_min.min()) if report.steps else None,
        "v_max": float(report.v_max.max()) if report.steps else None,
        "in_band_fraction": report.in_band_fraction() if report.steps else None,
        "ess_capacity_kwh": sizing.capacity_kwh,
        "ess_max_ramp_kw": sizing.max_ramp_kw,
        "d_h_signed_energy_kwh": sizing.signal_energy_kwh,
        "d_signed_energy_kwh": signals.signal_energy(report.d_kw)[0],
        "d_l_signed_energy_kwh": signals.signal_energy(report.d_l_kw)[0],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def read_report(run_dir: str | Path) -> RunReport:
    """Rebuild the compare-relevant parts of a report from its files."""
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    rows = list(csv.DictReader(open(run_dir / "metrics.csv", newline="")))
    sig = list(csv.DictReader(open(run_dir / "signals.csv", newline="")))
    dec = list(csv.DictReader(open(run_dir / "decisions.csv", newline="")))

    def col(rows, name, cast=float):
        return np.array([cast(r[name]) for r in rows])

    steps = len(rows)
    return RunReport(
        mode=summary["mode"],
        seed=summary["seed"],
        fast_step_minutes=summary["fast_step_minutes"],
        node_labels=summary["node_labels"],
        customer_nodes=summary["customer_nodes"],
        minutes=col(rows, "t_min", int),
        losses_kw=col(rows, "losses_kw"),
        feeder_head_kw=col(rows, "feeder_head_kw"),
        tap_changes_cum=col(rows, "tap_changes_cum", int),
        starfi_events_cum=col(rows, "starfi_events_cum", int),
        buses_in_band=col(rows, "buses_in_band", int),
        cost=col(rows, "cost"),
        v_min=col(rows, "v_min"),
        v_max=col(rows, "v_max"),
        voltages=None,
        q_inverter_kvar=np.array(
            [[float(x) for x in r["q_inverter_kvar"].split("/")] for r in dec]
        )
        if steps
        else np.zeros((0, 1)),
        p_flexible_kw=np.array(
            [[float(x) for x in r["p_flexible_kw"].split("/")] for r in dec]
        )
        if steps
        else np.zeros((0, 1)),
        cap_steps=np.array(
            [[int(x) for x in r["cap_steps"].split("/")] for r in dec]
        )
        if steps
        else np.zeros((0, 0), dtype=int),
        reg_taps=np.array(
            [[int(x) for x in r["reg_taps"].split("/")] for r in dec]
        )
        if steps
        else np.zeros((0, 0), dtype=int),
        solar_kw=col(sig, "solar_kw"),
        solar_forecast_kw=col(sig, "solar_forecast_kw"),
        d_kw=col(sig, "d_kw"),
        d_l_kw=col(sig, "d_l_kw"),
        d_h_kw=col(sig, "d_h_kw"),
        n_load_buses=summary["n_load_buses"],
    )


# -- comparison ----------------------------------------------------------------


class ComparisonError(Exception):
    pass


@dataclass
class Comparison:
    """Side-by-side outcome of two runs over the same horizon."""

    label_a: str
    label_b: str
    rows: list[tuple[str, float, float, float]]  # metric, a, b, delta (a - b)
    profit_series: np.ndarray  # per-step profit of b against a

    @property
    def average_profit(self) -> float:
        return float(self.profit_series.mean()) if self.profit_series.size else 0.0

    def to_text(self) -> str:
        width = max(len(r[0]) for r in self.rows) + 2
        lines = [
            f"{'metric':<{width}}{self.label_a:>16}{self.label_b:>16}{'delta':>16}",
        ]
        for name, a, b, delta in self.rows:
            lines.append(f"{name:<{width}}{a:>16.4f}{b:>16.4f}{delta:>16.4f}")
        lines.append(f"{'average_profit':<{width}}{'':>16}{self.average_profit:>16.4f}")
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", self.label_a, self.label_b, "delta"])
            for name, a, b, delta in self.rows:
                w.writerow([name, repr(a), repr(b), repr(delta)])
            w.writerow(["average_profit", "", repr(self.average_profit), ""])


def compare(
    report_a: RunReport,
    report_b: RunReport,
    weights: ProfitWeights | None = None,
    tolerance: float = 0.05,
) -> Comparison:
    """Compare run A (reference, e.g. the IEEE-1547 baseline) against run B.

    The per-step profit of B combines the running peak-load reduction, the
    loss reduction, and B's own voltage-deviation penalty.
    """
    if report_a.steps != report_b.steps:
        raise ComparisonError(
            f"horizon mismatch: {report_a.steps} vs {report_b.steps} steps"
        )
    weights = weights or ProfitWeights()

    peak_a = np.maximum.accumulate(report_a.feeder_head_kw)
    peak_b = np.maximum.accumulate(report_b.feeder_head_kw)
    events_b = np.diff(report_b.starfi_events_cum, prepend=0)
    profit_series = np.array(
        [
            profit(
                QualityMetrics(
                    starfi=events_b[k] / report_b.n_customers,
                    lost_capacity_kw=float(peak_a[k] - peak_b[k]),
                    loss_reduction_kw=float(
                        report_a.losses_kw[k] - report_b.losses_kw[k]
                    ),
                ),
                weights,
            )
            for k in range(report_b.steps)
        ]
    )

    def pair(name: str, a: float, b: float) -> tuple[str, float, float, float]:
        return (name, float(a), float(b), float(a) - float(b))

    rows = [
        pair(
            "tap_changes",
            report_a.tap_changes_cum[-1],
            report_b.tap_changes_cum[-1],
        ),
        pair("losses_kwh", report_a.total_losses_kwh(), report_b.total_losses_kwh()),
        pair("starfi_per_customer", report_a.starfi_total(), report_b.starfi_total()),
        pair("v_min", report_a.v_min.min(), report_b.v_min.min()),
        pair("v_max", report_a.v_max.max(), report_b.v_max.max()),
        pair(
            "in_band_fraction",
            report_a.in_band_fraction(tolerance),
            report_b.in_band_fraction(tolerance),
        ),
        pair("peak_feeder_kw", report_a.feeder_head_kw.max(), report_b.feeder_head_kw.max()),
    ]
    return Comparison(report_a.mode, report_b.mode, rows, profit_series)
