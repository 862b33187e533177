"""Safe screening of transport entries for unbalanced optimal transport."""
from .core import (ContractViolation, DegenerateError, DimensionError, IterateTrace, Penalty,
                   ProblemSpec, ScreeningState, UnsupportedError, UOTError, apply_X,
                   apply_X_transpose, compact, duality_gap, flat_index, pair_index,
                   primal_objective)
from .penalties import divergence, dual_from_primal, dual_value, link
from .projection import is_feasible, project, residuals_rescale, shifting_projection
from .regions import (BallRegion, BoxBounds, EllipseRegion, blockwise_metric, gap_ball,
                      gap_ellipse, kl_box, kl_low_bounds, sasvi_ball)
from .screening import (METHODS, SUPPORTED, Halfspace, HalfspacePair, ScreenReport,
                        check_supported, ctp_halfspaces, ctp_max, dome_halfspace,
                        max_over_ball, max_over_ellipse, region_max, screen_all)
from .solvers import SolveResult, SolverConfig, run_with_screening

__version__ = "0.1.0"
