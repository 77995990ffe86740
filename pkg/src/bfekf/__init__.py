"""Joint state estimation and function learning with compactly supported
radial basis functions and a partitioned extended Kalman filter."""

from .basis import (ActiveSet, BasisConfig, CartesianGrid, active_exact, active_fast,
                    active_upper_bound, eval_active, eval_all, gaussian_value, kernel_value,
                    make_grid, product_eval_gaussian, wendland_derivative, wendland_value)
from .ekf import (FilterState, initial_state, measurement_update, memory_estimate, query_function,
                  time_update)
from .errors import BfekfError, ConfigError, DomainError, NumericalError, ShapeError
from .ssmodel import (STACKED, STAGGERED, AugmentedModel, LinearExpansionModel, TireFrictionModel,
                      VehicleParams, build_1d_models, build_cv_model, build_tire_model, eval_unknown,
                      jacobians)

__version__ = "0.1.0"
