"""Shape optimization of integral functionals over subdomains of a box.

The optimal domain of min over subsets of D of the inner energy
min{integral of f(x,u,grad u) over the subset} is found as the support of
the minimizer of a single indicator-penalized problem on all of D.  The
package also builds source terms whose optimal domain is any prescribed
target (via torsion functions), and measures level-band / perimeter
quantities that certify finite perimeter of the optimum.
"""

from qshape.mesh import (
    GridSpec,
    ScalarField,
    DomainMask,
    CellGradientField,
    make_grid,
    gradient,
    integrate_cellwise,
    measure,
    restrict,
)
from qshape.integrand import (
    IntegrandSpec,
    GrowthCertificate,
    TheoremApplicability,
    dirichlet_energy,
    sobolev_exponent,
    check_condition,
    regularity_exponents_ok,
    applicable_theorems,
)
from qshape.state_solver import (
    SolveReport,
    minimize_on_support,
    torsion,
    eigen_estimate,
    kkt_residual,
)
from qshape.shape_solver import (
    AuxParams,
    AuxReport,
    RecoveryReport,
    auxiliary_energy,
    smoothed_energy,
    solve_auxiliary,
    extract_support,
    build_counterexample_source,
    verify_recovery,
)
from qshape.geometry import (
    GeometryReport,
    truncate,
    sublevel_band,
    level_set_perimeter,
    coarea_profile,
    finite_perimeter_diagnostic,
)

__version__ = "0.1.0"
