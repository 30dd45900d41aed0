"""Multiscale P1 finite elements for Laplace problems on rough boundaries."""

from .geometry import (BoundaryProfile, TriMesh, ElementFrame, GeometryError,
                       MeshError, LocationError, ROUGH, DIRICHLET, T1, T2, T3,
                       cosine_profile, flat_profile, periodic_profile,
                       make_random_profile, build_coarse_mesh,
                       build_reference_mesh, build_cell_mesh, element_frame,
                       read_mesh, write_mesh)
from .femcore import (Field, SparseSystem, AssemblyError, ConstraintError,
                      ConvergenceError, assemble_stiffness, assemble_load,
                      assemble_edge_flux, impose_dirichlet, dirichlet_on_tagged,
                      cg, solve_cg, condition_number_2norm, error_norms)
from .msfem import (FluxSpec, MsBasis, FluxError, AUTO, GEOMETRY_ONLY,
                    GEOMETRY_AND_FLUX, solve_cell_basis, build_bases,
                    assemble_msfem, evaluate_solution)
from .homogenization import (HomogenizedCase, StripProblem, CompatibilityError,
                             effective_flux, solve_homogenized, solve_strip,
                             first_order_field, B0, B1, B2, B0_TILDE)

__version__ = "0.1.0"
