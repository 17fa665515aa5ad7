"""Grid-based dynamic programming for finite-horizon stochastic control.

Discretizes the state space (never the action space for the convex route),
pushes value tables backward with convex per-state programs or bilevel
cell programs, and evaluates policies interpolation-free by re-solving the
per-state program wherever a control is needed.
"""

from .backend import BACKEND_NAME, HAS_NUMBA, USE_NUMBA
from .envelope import ValueEnvelope, build_envelope
from .errors import (BoundsOffLattice, ConvexDPError, EmptyActionGrid,
                     EmptyActionSet, InclusionViolation, InfeasibleProgram,
                     NonNestedDomains, NotConvexEligible, ParseError,
                     PointOutsideCell, PointOutsideDomain, SolverFailure,
                     TreeTooLarge, ValidationError)
from .geometry import (Cell, InclusionReport, StagedDomain, StagedGrid,
                       build_staged_grid, multilinear_weights,
                       validate_inclusion)
from .operators import (AffineDynamics, BoxActionSet, ControlAffineDynamics,
                        ControlProblem, FiniteActionSet, FiniteDisturbance,
                        GeneralCost, GeneralDynamics, LinearIneqActionSet,
                        OperatorKind, QuadraticActionCost, ValueTable,
                        action_candidates, bilevel_bellman,
                        cell_lp_expectation, convex_bellman,
                        multilinear_interp, oracle_bellman, oracle_tables)
from .solver import (SolveResult, SolveStatus, SolverConfig,
                     StructuredProgram, inner_lp_weights, solve_lp,
                     solve_structured)
from .engine import (CostStats, EngineConfig, GapReport, LipschitzEstimate,
                     PolicyHandle, SolutionBundle, aposteriori_gap,
                     backward_induction, error_bound, estimate_lipschitz,
                     exact_policy_value, lipschitz_estimates,
                     policy_cost_tables, query_policy, read_value_csv,
                     rollout, save_bundle)
from .problems import (ProblemConfig, load_problem, make_dubins,
                       make_epidemic, make_linear_convex, problem_from_dict,
                       sample_support)

__version__ = "0.1.0"
