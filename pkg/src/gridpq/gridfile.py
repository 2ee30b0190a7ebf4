"""Grid description files: buses, lines, devices and loads in YAML.

Lines can be given as a wire configuration (3x3 impedance in ohms/mile
plus a length) or as direct per-unit admittance matrices.  Transformers
become uncoupled series branches from their percent impedance; per-unit
conversion uses one system MVA base and per-zone voltage bases.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .grid import (
    Bus,
    CapacitorBank,
    GeneratorKind,
    GeneratorSpec,
    GridModel,
    GridModelError,
    LineSegment,
    Phase,
    VoltageRegulator,
    parse_phases,
)
from .powerflow import LoadModel

FEET_PER_MILE = 5280.0

# Pure-type polynomial mixes available without a zip_mixes block.
BUILTIN_ZIP = {
    "constant_power": (((1.0, 0.0),), ((1.0, 0.0),)),
    "constant_current": (((1.0, 1.0),), ((1.0, 1.0),)),
    "constant_impedance": (((1.0, 2.0),), ((1.0, 2.0),)),
}


@dataclass(frozen=True)
class GridCase:
    """A grid plus its attached nominal loads (with class tags)."""

    grid: GridModel
    loads: tuple[LoadModel, ...]
    classes: tuple[str, ...]  # per load; "" when untagged

    def loads_of_class(self, cls: str) -> tuple[LoadModel, ...]:
        return tuple(l for l, c in zip(self.loads, self.classes) if c == cls)


def bundled_data_path(name: str) -> Path:
    """Path of a data file shipped with the package."""
    return Path(resources.files("gridpq").joinpath("data", name))


def _matrix(raw, what: str) -> np.ndarray:
    m = np.array(raw, dtype=float)
    if m.shape != (3, 3):
        raise GridModelError(f"{what}: expected a 3x3 matrix, got shape {m.shape}")
    return m


def _series_admittance_from_config(
    cfg: dict, length_ft: float, z_base: float, what: str
) -> tuple[np.ndarray, np.ndarray, tuple[Phase, ...]]:
    phases = parse_phases(cfg["phases"])
    miles = length_ft / FEET_PER_MILE
    r = _matrix(cfg["r_ohm_per_mile"], what) * miles
    x = _matrix(cfg["x_ohm_per_mile"], what) * miles
    z = (r + 1j * x) / z_base
    idx = np.array([int(p) for p in phases])
    y = np.zeros((3, 3), dtype=complex)
    y[np.ix_(idx, idx)] = np.linalg.inv(z[np.ix_(idx, idx)])
    b = np.zeros((3, 3), dtype=complex)
    if "b_us_per_mile" in cfg:
        b_s = _matrix(cfg["b_us_per_mile"], what) * 1e-6 * miles
        b[np.ix_(idx, idx)] = 1j * b_s[np.ix_(idx, idx)] * z_base
    return y, b, phases


def load_grid_file(path: str | Path) -> GridCase:
    path = Path(path)
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict):
        raise GridModelError(f"{path}: not a mapping document")

    base_mva = float(doc.get("base_mva", 1.0))

    buses: list[Bus] = []
    index_of: dict[str, int] = {}
    for k, raw in enumerate(doc.get("buses", []), start=1):
        name = str(raw["name"])
        if name in index_of:
            raise GridModelError(f"{path}: duplicate bus {name!r}")
        index_of[name] = k
        buses.append(
            Bus(
                index=k,
                name=name,
                phases=parse_phases(raw["phases"]),
                kv_ll=float(raw["kv_ll"]),
                is_slack=bool(raw.get("slack", False)),
            )
        )

    def bus_index(name, what: str) -> int:
        try:
            return index_of[str(name)]
        except KeyError:
            raise GridModelError(f"{path}: {what} references unknown bus {name!r}") from None

    def zone_base(name: str) -> float:
        kv = buses[index_of[name] - 1].kv_ll
        return kv * kv / base_mva

    configs = doc.get("line_configs", {}) or {}
    lines: list[LineSegment] = []
    for raw in doc.get("lines", []) or []:
        name = str(raw["name"])
        from_name, to_name = str(raw["from"]), str(raw["to"])
        f = bus_index(from_name, f"line {name!r}")
        t = bus_index(to_name, f"line {name!r}")
        if buses[f - 1].kv_ll != buses[t - 1].kv_ll:
            raise GridModelError(
                f"{path}: line {name!r} spans voltage zones; use a transformer"
            )
        if "config" in raw:
            cfg_name = str(raw["config"])
            if cfg_name not in configs:
                raise GridModelError(f"{path}: line {name!r}: unknown config {cfg_name!r}")
            y, b, phases = _series_admittance_from_config(
                configs[cfg_name],
                float(raw["length_ft"]),
                zone_base(from_name),
                f"config {cfg_name!r}",
            )
        else:
            phases = parse_phases(raw["phases"])
            y = _matrix(raw["y_series_re"], f"line {name!r}") + 1j * _matrix(
                raw["y_series_im"], f"line {name!r}"
            )
            b = 1j * _matrix(raw.get("shunt_b", np.zeros((3, 3))), f"line {name!r}")
        lines.append(LineSegment(name, f, t, y, b, phases))

    for raw in doc.get("transformers", []) or []:
        name = str(raw["name"])
        f = bus_index(raw["from"], f"transformer {name!r}")
        t = bus_index(raw["to"], f"transformer {name!r}")
        phases = parse_phases(raw.get("phases", "abc"))
        z_pct = complex(float(raw["r_pct"]), float(raw["x_pct"])) / 100.0
        z_sys = z_pct * (base_mva * 1000.0 / float(raw["s_kva"]))
        y = np.zeros((3, 3), dtype=complex)
        for p in phases:
            y[p, p] = 1.0 / z_sys
        lines.append(LineSegment(name, f, t, y, np.zeros((3, 3)), phases))

    regulators = tuple(
        VoltageRegulator(
            name=str(raw["name"]),
            line=str(raw["line"]),
            bus=bus_index(raw["monitored"], f"regulator {raw['name']!r}"),
            phase=Phase.from_letter(str(raw["phase"])),
            tap=int(raw.get("tap", 0)),
            tap_min=int(raw.get("tap_min", -16)),
            tap_max=int(raw.get("tap_max", 16)),
            volts_per_tap=float(raw.get("volts_per_tap", 0.00625)),
            deadband=float(raw.get("deadband", 0.00833)),
            target=float(raw.get("target", 1.0)),
        )
        for raw in doc.get("regulators", []) or []
    )

    s_base_1ph = base_mva * 1000.0 / 3.0
    capacitors = tuple(
        CapacitorBank(
            name=str(raw["name"]),
            bus=bus_index(raw["bus"], f"capacitor {raw['name']!r}"),
            phase=Phase.from_letter(str(raw["phase"])),
            step_susceptance=float(raw["kvar_per_step"]) / s_base_1ph,
            num_steps=int(raw["steps"]),
            current_step=int(raw.get("initial_step", 0)),
        )
        for raw in doc.get("capacitors", []) or []
    )

    generators = tuple(
        GeneratorSpec(
            name=str(raw["name"]),
            bus=bus_index(raw["bus"], f"generator {raw['name']!r}"),
            phases=parse_phases(raw.get("phases", "abc")),
            s_kva=float(raw["s_kva"]),
            kind=GeneratorKind(str(raw.get("kind", "renewable"))),
        )
        for raw in doc.get("generators", []) or []
    )

    grid = GridModel(
        name=str(doc.get("name", path.stem)),
        base_mva=base_mva,
        buses=tuple(buses),
        lines=tuple(lines),
        capacitors=capacitors,
        regulators=regulators,
        generators=generators,
    )

    mixes: dict[str, tuple[tuple[tuple[float, float], ...], tuple[tuple[float, float], ...]]]
    mixes = dict(BUILTIN_ZIP)
    for mix_name, raw in (doc.get("zip_mixes", {}) or {}).items():
        p_comps = tuple((float(a), float(n)) for a, n in raw["p"])
        q_comps = tuple((float(b), float(n)) for b, n in raw["q"])
        mixes[str(mix_name)] = (p_comps, q_comps)

    loads: list[LoadModel] = []
    classes: list[str] = []
    for raw in doc.get("loads", []) or []:
        mix_name = str(raw.get("zip", "constant_power"))
        if mix_name not in mixes:
            raise GridModelError(f"{path}: load references unknown zip mix {mix_name!r}")
        p_comps, q_comps = mixes[mix_name]
        loads.append(
            LoadModel(
                bus=bus_index(raw["bus"], "load"),
                phase=Phase.from_letter(str(raw["phase"])),
                p_nom_kw=float(raw["p_kw"]),
                q_nom_kvar=float(raw["q_kvar"]),
                p_components=p_comps,
                q_components=q_comps,
                v_nom=float(raw.get("v_nom", 1.0)),
            )
        )
        classes.append(str(raw.get("class", "")))

    return GridCase(grid, tuple(loads), tuple(classes))
