"""Green's functions of parabolic and elliptic systems with Robin boundary conditions."""
from .assembly import NodalField, RobinMatrix, SolverError, assemble_load, assemble_mass, \
    assemble_robin, assemble_stiffness, assemble_unit_stiffness, solve_spd
from .coeff import CatalogError, CoefficientField, RobinOperator, coefficient, robin, \
    validate_ellipticity, validate_theta
from .coercivity import CoercivityError, CoercivityReport, check_h1, estimate_theta0
from .green import (GreenColumn, KernelMatrixSample, adjoint_green_eval, averaged_green,
                    elliptic_green, green_eval, heat_kernel_column, represent_solution, steady_green)
from .mesh import Mesh, build_interval_mesh, build_lshape_mesh, build_rectangle_mesh, \
    parabolic_distance, refine
from .parabolic import RobinProblem, TimeGrid, Trajectory, solve_backward_adjoint, solve_forward, \
    tri_norm

__version__ = "0.1.0"
