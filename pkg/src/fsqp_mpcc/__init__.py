"""Feasible sequential quadratic programming for contouring-control MPC.

The package contains the vehicle model, track representation, the optimal
control problem, a dense active-set QP solver, the feasible SQP solver with
RTI and run-to-convergence variants, offline terminal trajectories, the
receding-horizon controller and a closed-loop experiment harness.
"""

from .fsqp import Iterate, Mode, SolverSettings, SolveResult, Status, constraint_violation, full_solve, rti_solve, run, solve
from .mpc import Candidate, Controller, ControllerAbort, shift
from .ocp import OcpConfig, TrajectoryNlp, build_nlp
from .qp import QpSolver
from .terminal import TerminalSet, compute_terminal_set, load_terminal_set, save_terminal_set
from .track import Centerline, TrackSpline, fit_spline, load_track
from .vehicle import DT, VehicleParams, discrete_step, rk4_step

__version__ = "0.1.0"

__all__ = [
    "Candidate", "Centerline", "Controller", "ControllerAbort", "DT", "Iterate", "Mode", "OcpConfig",
    "QpSolver", "SolveResult", "SolverSettings", "Status", "TerminalSet", "TrackSpline", "TrajectoryNlp",
    "VehicleParams", "build_nlp", "compute_terminal_set", "constraint_violation", "discrete_step",
    "fit_spline", "full_solve", "load_terminal_set", "load_track", "rk4_step", "rti_solve", "run",
    "save_terminal_set", "shift", "solve",
]
