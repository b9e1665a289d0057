"""Numerical toolkit for distribution-dependent (McKean-Vlasov) SDEs.

Submodules:
  kernels       Gaussian kernel algebra, Hermite factors, Mittag-Leffler
  measures      particle clouds, density grids, flows, W2 / L1 / capped metrics
  coefficients  coefficient models with measure derivatives, validators
  parametrix    transition densities by the truncated parametrix series
  picard        fixed-point iteration on measure flows
  simulate      interacting / decoupled Euler-Maruyama particle systems
  lions         flat and lifted derivatives on the space of measures
  pde           Feynman-Kac solution and residual checks for the Cauchy problem
  cli           reproducible scenario runner
"""

__version__ = "0.1.0"

from .coefficients import (
    AssumptionReport,
    CoefficientModel,
    make_first_order,
    make_n_order,
    make_polynomial,
    make_scalar,
    validate_assumptions,
)
from .measures import (
    DensityGrid,
    EmpiricalMeasure,
    GridSpec,
    MeasureFlow,
    Mixture,
    d_eta,
    kde,
    l1_density_distance,
    moment2,
    wasserstein2,
)
from .parametrix import (
    ParametrixConfig,
    ProxySpec,
    TransitionDensity,
    density_of_law,
    density_series,
    parametrix_kernel,
    proxy_density,
    spacetime_convolve,
    verify_derivative_scaling,
    verify_gaussian_bound,
)
from .picard import (
    PicardConfig,
    PicardState,
    decoupled_flow_density,
    fitted_contraction_ratio,
    flow_distance,
    picard_map,
    picard_solve,
)
from .simulate import (
    ParticleEnsemble,
    SimConfig,
    chaos_convergence,
    euler_decoupled,
    euler_mv,
)
from .lions import (
    FlowComposition,
    MeasureFunctional,
    check_flat_lions_relation,
    composed_flow_derivative,
    composed_flow_time_derivative,
    flat_derivative_fd,
    lions_derivative_empirical,
)
from .pde import (
    CauchyData,
    FdConfig,
    SolveConfig,
    TestFunction,
    chain_rule_check,
    generator_apply,
    growth_bound_check,
    residual_check,
    solve_U,
)
