"""Particle solver for mean-field type stochastic control problems.

Forward particle simulation with empirical-measure coupling, adjoint
backward equations by least-squares Monte Carlo, adjoint-gradient and
fixed-point solvers, derivative/convexity/monotonicity validators, and
Riccati reference solutions for linear-quadratic instances.
"""
from .adjoint import (AdjointEnsemble, RegressionBasis, gradient_field, optimality_residual,
                      pathwise_gradient, solve_adjoint, terminal_gradient)
from .coefficients import (LQSpec, ProblemSpec, Separable, check_convexity_B3,
                           check_monotonicity, inject_fault, lq_to_problem,
                           validate_measure_derivative, validate_pointwise_derivatives)
from .errors import *  # noqa: F401,F403
from .forward import (ControlField, Noise, PathEnsemble, TimeGrid, draw_noise,
                      evaluate_cost, moment_diagnostics, simulate_deterministic,
                      simulate_feedback, simulate_forward)
from .lagrangian import (AdjointPoint, eval_L, grad_v_L, grad_x_L_local,
                         meanfield_driver_terms)
from .lq_oracle import RiccatiSolution, solve_lq_mfc, solve_lq_mfg
from .measure import (EmpiricalMeasure, ensemble_norm, push_forward, wasserstein2_1d,
                      wasserstein2_smallN)
from .optimizer import (SolveConfig, SolveReport, check_cost_convexity, cost_gradient,
                        gradient_check, lambda_sweep, solve, solve_gradient_descent,
                        solve_mfg, solve_picard_fbsde)
from .problems import builtin_lq, get_problem, known_problems, register_problem

__version__ = "0.1.0"
