"""
Context-dependent safe optimization.

A context is an externally determined environment variable (for example a
reference speed). Multiplying the joint parameter/output kernel with a
kernel over contexts lets observations collected at one context inform
the posterior at nearby ones, so safety certificates can transfer without
ever being assumed across contexts: a new context's initial safe set must
be certified by the GP lower bounds, or supplied explicitly.
"""

import numpy as np
from dataclasses import dataclass, replace

from .gp_core import KernelSpec, SurrogateKernelSpec, surrogate_kernel_eval
from .safeopt import GP_DIRECT, ConfidenceState, ParameterDomain, SafeOptMC, safe_set


__all__ = [
    "ContextSpec",
    "NoSafeSeedError",
    "contextual_kernel_eval",
    "with_context",
    "ContextualOptimizer",
]


class NoSafeSeedError(RuntimeError):
    """No parameter can be certified safe at the requested context."""


@dataclass(frozen=True)
class ContextSpec:
    """
    Declaration of the context axis.

    Parameters
    ----------
    kernel : KernelSpec
        Covariance over context values; its dimension sets the number of
        context coordinates.
    labels : tuple of str, optional
        Human-readable name and unit per context coordinate.
    """

    kernel: KernelSpec
    labels: tuple = None

    def __post_init__(self):
        if self.labels is not None:
            labels = tuple(str(l) for l in self.labels)
            if len(labels) != self.kernel.dim:
                raise ValueError("need one label per context dimension")
            object.__setattr__(self, "labels", labels)

    @property
    def dim(self):
        return self.kernel.dim


def with_context(spec, context_spec, param_dim):
    """
    Extend a joint kernel with a multiplicative context kernel.

    Inputs to the returned spec are parameter coordinates followed by
    context coordinates.
    """
    if spec.context_kernel is not None:
        raise ValueError("spec already has a context kernel")
    return replace(spec, context_kernel=context_spec.kernel, param_dim=param_dim)


def contextual_kernel_eval(spec, query1, query2):
    """
    Joint kernel value for two (parameter, output, context) queries.

    Each query is a triple ``(a, i, z)``; the result is the parameter/
    output kernel value multiplied by the context kernel value.
    """
    (a, i, z), (b, j, z2) = query1, query2
    if spec.context_kernel is None:
        raise ValueError("spec has no context kernel")
    x1 = np.concatenate([np.atleast_1d(a), np.atleast_1d(z)]).astype(float)
    x2 = np.concatenate([np.atleast_1d(b), np.atleast_1d(z2)]).astype(float)
    return surrogate_kernel_eval(spec, (x1, i), (x2, j))


def _extend(points, z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return np.hstack([points, np.tile(z, (points.shape[0], 1))])


class ContextualOptimizer:
    """
    Safe optimizer over a parameter grid crossed with a scheduled context.

    The caller decides when the context changes; the optimizer only
    transfers knowledge through the product kernel. One shared model and
    one shared iteration counter persist across context switches, so the
    confidence schedule keeps tightening over the whole campaign.

    Parameters
    ----------
    model : SurrogateGP
        Built on a spec carrying a context kernel (see :func:`with_context`).
    param_domain : ParameterDomain
        The parameter grid; context coordinates are appended per slice.
    config : AlgoConfig
    initial_context : array_like
        Context value for the first slice.
    seed_indices : sequence of int
        Parameter indices known to be safe at the initial context.
    """

    def __init__(self, model, param_domain, config, initial_context, seed_indices):
        if model.spec.context_kernel is None:
            raise ValueError("model spec has no context kernel")
        if model.spec.param_dim != param_domain.dim:
            raise ValueError("param_dim does not match the parameter domain")
        self.model = model
        self.param_domain = param_domain
        self.config = config
        self.total_iterations = 0
        self.context = None
        self._slice = None
        self.fix_context(initial_context, seed_indices=seed_indices)

    def _slice_domain(self, z):
        weights = None
        if self.param_domain.metric_weights is not None:
            weights = tuple(self.param_domain.metric_weights) + (1.0,) * np.size(z)
        return ParameterDomain(
            _extend(self.param_domain.points, z), metric_weights=weights
        )

    def certified_slice_seeds(self, z):
        """
        Parameter indices whose constraint lower bounds are non-negative
        at context ``z`` under the current model and the next iteration's
        confidence scaling.
        """
        domain = self._slice_domain(z)
        n_outputs = self.model.spec.n_outputs
        n = self.total_iterations + 1
        beta_n = self.config.beta.beta(n, domain.size, n_outputs)
        means = np.empty((domain.size, n_outputs))
        stds = np.empty_like(means)
        for i in range(n_outputs):
            mean, var = self.model.posterior(domain.points, i)
            means[:, i] = mean
            stds[:, i] = np.sqrt(var)
        state = ConfidenceState(
            means - np.sqrt(beta_n) * stds, means + np.sqrt(beta_n) * stds
        )
        none_seed = np.zeros(domain.size, dtype=bool)
        mask = safe_set(state, none_seed, none_seed, None, 1.0, GP_DIRECT)
        return np.flatnonzero(mask)

    def fix_context(self, z, seed_indices=None):
        """
        Switch the optimization to context ``z``.

        Without explicit ``seed_indices`` the slice's initial safe set is
        certified from the GP lower bounds; raises
        :class:`NoSafeSeedError` when nothing certifies.

        Returns the slice optimizer (a :class:`SafeOptMC` over the
        context-extended domain).
        """
        self._sync()
        if seed_indices is None:
            seed_indices = self.certified_slice_seeds(z)
            if seed_indices.size == 0:
                raise NoSafeSeedError(
                    f"no parameter certifies as safe at context {z!r}; "
                    f"supply seeds or pick a context closer to existing data"
                )
        self.context = np.atleast_1d(np.asarray(z, dtype=float))
        self._slice = SafeOptMC(
            self.model,
            self._slice_domain(z),
            seed_indices,
            self.config,
            iteration_offset=self.total_iterations,
        )
        return self._slice

    def _sync(self):
        if self._slice is not None:
            self.model = self._slice.model
            self.total_iterations = self._slice.iteration

    def run_at_context(self, evaluator, max_iterations, width_tol=None,
                       violation_check=None, on_iteration=None):
        """
        Run the current slice. The evaluator receives the full
        (parameter, context) vector.
        """
        trace = self._slice.run(
            evaluator,
            max_iterations,
            width_tol=width_tol,
            violation_check=violation_check,
            on_iteration=on_iteration,
        )
        self._sync()
        return trace

    def best(self):
        """Pessimistic best of the current slice."""
        return self._slice.best()
