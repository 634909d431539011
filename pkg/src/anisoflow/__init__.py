"""Structure-preserving evolution of closed surfaces under anisotropic
surface diffusion, with a stabilizer toolkit and experiment harness."""

__version__ = "0.1.0"

from .anisotropy import (  # noqa: F401
    AnisotropyModel,
    Classification,
    Custom,
    Ellipsoidal,
    FourFold,
    Isotropic,
    LrNorm,
    RegularizedBGN,
    classify,
    fibonacci_sphere,
    gamma,
    gamma_ext,
    hessian,
    tangent_basis,
    xi,
)
from .errors import (  # noqa: F401
    AnisoflowError,
    ConfigError,
    GeometryError,
    ModelValidationError,
    NonconvergenceError,
    SolverError,
    StructureViolationError,
    TopologyError,
)
from .mesh import (  # noqa: F401
    SurfaceMesh,
    make_cuboid,
    make_ellipsoid,
    read_obj,
)
from .stabilizer import (  # noqa: F401
    StabilizerTable,
    build_table,
    f_k,
    k0_at,
    k_of,
    k_upper,
    model_hash,
    z_many,
    z_matrix,
)
from .solver import (  # noqa: F401
    EvolutionResult,
    EvolutionState,
    StepperConfig,
    evolve,
    initial_mu,
    n_half,
    step,
)
from .diagnostics import (  # noqa: F401
    CASES,
    ConvergenceReport,
    DistanceResult,
    Trajectory,
    convergence_suite,
    manifold_distance,
    numerical_error,
    run_snapshots,
)
