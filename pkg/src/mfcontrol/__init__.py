"""Mean-field control by particle FBSDEs."""

__version__ = "0.1.0"

from .analysis import (SolveContext, bellman_residual, evaluate_master, evaluate_value, gradient_identity,
                       master_residual, restart_check, sensitivity_check, terminal_gap, value_report)
from .bench import (LqParams, RiccatiSolution, convergence_study, deterministic_benchmark, lq_spec, riccati_oracle,
                    run_lq_benchmark, shooting_oracle)
from .errors import (BasisError, CapabilityError, ConfigError, ConvexityError, DivergenceError, GridError,
                     MeasureError, MfcError, SolverError, SpecificationError)
from .fbsde import (FbsdeSolution, SolverOptions, monotonicity_certificate, picard_solve, residuals, solve,
                    solve_linear_fbsde)
from .flows import gateaux_flow, measure_flow, measure_spatial_flow, spatial_jacobian
from .hamiltonian import backward_driver, hamiltonian, lagrangian, minimize_control
from .measure import ParticleEnsemble, perturb_dirac, pushforward, wasserstein2
from .model import LinearDynamics, ProblemSpec, load_config, lq_meanfield, quadratic_plus_quartic, validate_spec
from .paths import BrownianBundle, TimeGrid, make_grid, sample_increments

__all__ = [name for name in dir() if not name.startswith("_")]
