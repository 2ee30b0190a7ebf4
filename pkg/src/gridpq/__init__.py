"""Power-quality control simulation for unbalanced distribution feeders."""

from .grid import (
    Bus,
    CapacitorBank,
    DiscreteControllerState,
    GeneratorKind,
    GeneratorSpec,
    GridModel,
    GridModelError,
    LineSegment,
    Phase,
    TopologyError,
    VoltageRegulator,
    assemble_admittance,
    validate,
)
from .powerflow import (
    GeneratorDispatch,
    LoadModel,
    Mismatch,
    NonConvergenceError,
    PowerFlowError,
    PowerFlowResult,
    SingularJacobianError,
    SolverOptions,
    SystemState,
    expected_load,
    flat_state,
    injected_power,
    jacobian,
    mismatch,
    solve,
    technical_losses,
)

__version__ = "0.1.0"
