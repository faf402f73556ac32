from .duct import (
    BlowupError,
    Budget,
    CirWaveform,
    DuctSolver,
    Mesh,
    PositivityError,
    ResolutionError,
    SolverError,
    SolverState,
    init_state,
    mass_budget,
    poiseuille,
    solve_cir,
)

__all__ = [
    "BlowupError", "Budget", "CirWaveform", "DuctSolver", "Mesh", "PositivityError",
    "ResolutionError", "SolverError", "SolverState", "init_state", "mass_budget",
    "poiseuille", "solve_cir",
]
