"""
safetune: safe Bayesian optimization with multiple safety constraints.

The optimizer maximizes an unknown performance function over a finite
parameter domain while only evaluating parameters that satisfy all
(unknown) safety constraints with high probability, using a joint GP
model over performance and constraints. Includes brute-force reference
computations, synthetic and simulated-plant benchmarks, contextual
optimization, and a CLI experiment harness.
"""

from .gp_core import (
    MATERN32,
    SQUARED_EXPONENTIAL,
    Dataset,
    KernelSpec,
    NumericalError,
    Posterior,
    SurrogateGP,
    SurrogateKernelSpec,
    kernel_eval,
    posterior,
)
from .safeopt import (
    GP_DIRECT,
    LIPSCHITZ,
    AlgoConfig,
    BetaSchedule,
    ConfidenceState,
    NoCandidatesError,
    ParameterDomain,
    RunTrace,
    RunTraceEntry,
    SafeOptMC,
    SafeSets,
    gp_ucb_select,
)
from .contexts import ContextSpec, ContextualOptimizer, NoSafeSeedError

__version__ = "0.1.0"

__all__ = [
    "MATERN32",
    "SQUARED_EXPONENTIAL",
    "Dataset",
    "KernelSpec",
    "NumericalError",
    "Posterior",
    "SurrogateGP",
    "SurrogateKernelSpec",
    "kernel_eval",
    "posterior",
    "GP_DIRECT",
    "LIPSCHITZ",
    "AlgoConfig",
    "BetaSchedule",
    "ConfidenceState",
    "NoCandidatesError",
    "ParameterDomain",
    "RunTrace",
    "RunTraceEntry",
    "SafeOptMC",
    "SafeSets",
    "gp_ucb_select",
    "ContextSpec",
    "ContextualOptimizer",
    "NoSafeSeedError",
    "__version__",
]
