"""
Gaussian-process regression over an extended (parameter, output-index) domain.

A single scalar GP jointly models a performance function (output index 0)
and any number of safety constraints (indices 1..q). Each output has its
own stationary kernel and observation-noise level; optional cross-kernels
introduce covariance between outputs. With no cross terms the joint
covariance is block-diagonal and the outputs are independent.
"""

import numpy as np
from dataclasses import dataclass, field
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist


__all__ = [
    "MATERN32",
    "SQUARED_EXPONENTIAL",
    "KernelSpec",
    "SurrogateKernelSpec",
    "Dataset",
    "Posterior",
    "SurrogateGP",
    "NumericalError",
    "kernel_eval",
    "kernel_matrix",
    "surrogate_kernel_eval",
    "surrogate_gram",
    "posterior",
    "condition",
]


MATERN32 = "matern32"
SQUARED_EXPONENTIAL = "squared_exponential"

_FAMILIES = (MATERN32, SQUARED_EXPONENTIAL)

# Relative diagonal jitter applied once when a Cholesky factorization fails.
_JITTER_SCALE = 1e-10

# Predictive variances more negative than -_VARIANCE_DUST * prior variance
# indicate a genuinely broken solve rather than rounding noise.
_VARIANCE_DUST = 1e-12


class NumericalError(RuntimeError):
    """A linear solve failed even after the jitter retry."""


@dataclass(frozen=True)
class KernelSpec:
    """
    A stationary covariance function.

    Parameters
    ----------
    family : str
        Either ``"matern32"`` or ``"squared_exponential"``.
    variance : float
        Prior variance (the kernel value at zero distance).
    lengthscales : tuple of float
        One positive lengthscale per input dimension.
    """

    family: str
    variance: float
    lengthscales: tuple

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family: {self.family!r}")
        if not self.variance > 0:
            raise ValueError("kernel variance must be positive")
        ls = tuple(float(l) for l in np.atleast_1d(self.lengthscales))
        if not all(l > 0 for l in ls):
            raise ValueError("all lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def dim(self):
        return len(self.lengthscales)

    @property
    def prior_std(self):
        return float(np.sqrt(self.variance))


def _scaled_dists(spec, a, b):
    """Pairwise lengthscale-scaled Euclidean distances, shape (n, m)."""
    ls = np.asarray(spec.lengthscales, dtype=float)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != ls.size or b.shape[1] != ls.size:
        raise ValueError(
            f"input dimension {a.shape[1]}/{b.shape[1]} does not match "
            f"{ls.size} lengthscales"
        )
    return cdist(a / ls, b / ls)


def kernel_matrix(spec, a, b):
    """
    Evaluate the kernel on all pairs of rows of ``a`` and ``b``.

    Returns an (n, m) covariance matrix.
    """
    r = _scaled_dists(spec, a, b)
    if spec.family == MATERN32:
        s = np.sqrt(3.0) * r
        return spec.variance * (1.0 + s) * np.exp(-s)
    # squared exponential
    return spec.variance * np.exp(-0.5 * r * r)


def kernel_eval(spec, a, b):
    """Kernel value for a single pair of points."""
    return float(kernel_matrix(spec, np.atleast_2d(a), np.atleast_2d(b))[0, 0])


def _normalize_cross_terms(cross_terms):
    """Store cross kernels under sorted index pairs, rejecting diagonals."""
    out = {}
    for (i, j), spec in dict(cross_terms or {}).items():
        if i == j:
            raise ValueError("cross terms must couple two distinct outputs")
        key = (min(i, j), max(i, j))
        if key in out and out[key] is not spec:
            raise ValueError(f"conflicting cross terms for outputs {key}")
        out[key] = spec
    return out


@dataclass(frozen=True)
class SurrogateKernelSpec:
    """
    Joint kernel over (parameter, output-index) pairs.

    Output 0 is the performance function; outputs 1..q are constraints.
    The joint kernel is k_i(a, a') when the output indices agree, the
    cross kernel for (i, j) when one is declared, and zero otherwise.

    An optional context kernel turns every per-output (and cross) kernel
    into a product kernel: the leading ``param_dim`` input columns feed
    the parameter kernels and the remaining columns feed the context
    kernel.

    Parameters
    ----------
    per_output : tuple of KernelSpec
        One kernel per output, performance first.
    noise_std : tuple of float
        Observation-noise standard deviation per output.
    cross_terms : dict, optional
        Maps an output index pair (i, j), i != j, to a KernelSpec.
    context_kernel : KernelSpec, optional
        Kernel over the trailing context coordinates.
    param_dim : int, optional
        Number of leading parameter coordinates; required together with
        ``context_kernel``.
    """

    per_output: tuple
    noise_std: tuple
    cross_terms: dict = field(default_factory=dict)
    context_kernel: KernelSpec = None
    param_dim: int = None

    def __post_init__(self):
        object.__setattr__(self, "per_output", tuple(self.per_output))
        if not self.per_output:
            raise ValueError("need at least one output kernel")
        noise = tuple(float(s) for s in np.atleast_1d(self.noise_std))
        if len(noise) == 1:
            noise = noise * len(self.per_output)
        if len(noise) != len(self.per_output):
            raise ValueError("need one noise level per output")
        if not all(s > 0 for s in noise):
            raise ValueError("noise standard deviations must be positive")
        object.__setattr__(self, "noise_std", noise)
        object.__setattr__(
            self, "cross_terms", _normalize_cross_terms(self.cross_terms)
        )
        if (self.context_kernel is None) != (self.param_dim is None):
            raise ValueError("context_kernel and param_dim go together")
        if self.param_dim is not None and self.param_dim < 1:
            raise ValueError("param_dim must be at least 1")

    @property
    def n_outputs(self):
        return len(self.per_output)

    @property
    def prior_variances(self):
        """Prior variance of the joint kernel per output (context included)."""
        scale = 1.0 if self.context_kernel is None else self.context_kernel.variance
        return np.array([k.variance * scale for k in self.per_output])

    def block_kernel(self, i, j):
        """Parameter kernel for the output pair (i, j), or None."""
        if i == j:
            return self.per_output[i]
        return self.cross_terms.get((min(i, j), max(i, j)))

    def _split(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.context_kernel is None:
            return x, None
        return x[:, : self.param_dim], x[:, self.param_dim :]


def surrogate_gram(spec, x, i, x2=None, i2=None):
    """
    Joint covariance matrix between two extended-point sets.

    Parameters
    ----------
    spec : SurrogateKernelSpec
    x : ndarray, shape (n, d)
        Input locations (parameter columns first, context columns last).
    i : ndarray of int, shape (n,)
        Output index per row of ``x``.
    x2, i2 : optional
        Second point set; defaults to the first.

    Returns
    -------
    ndarray, shape (n, m)
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    i = np.asarray(i, dtype=int)
    if x2 is None:
        x2, i2 = x, i
    else:
        x2 = np.atleast_2d(np.asarray(x2, dtype=float))
        i2 = np.asarray(i2, dtype=int)

    xp, xc = spec._split(x)
    xp2, xc2 = spec._split(x2)

    out = np.zeros((x.shape[0], x2.shape[0]))
    for a in range(spec.n_outputs):
        rows = np.flatnonzero(i == a)
        if rows.size == 0:
            continue
        for b in range(spec.n_outputs):
            cols = np.flatnonzero(i2 == b)
            if cols.size == 0:
                continue
            kern = spec.block_kernel(a, b)
            if kern is None:
                continue
            block = kernel_matrix(kern, xp[rows], xp2[cols])
            if spec.context_kernel is not None:
                block = block * kernel_matrix(
                    spec.context_kernel, xc[rows], xc2[cols]
                )
            out[np.ix_(rows, cols)] = block
    return out


def surrogate_kernel_eval(spec, query1, query2):
    """
    Joint kernel value for two (point, output-index) queries.

    Each query is a pair ``(a, i)`` with ``a`` a parameter (or
    parameter-plus-context) vector and ``i`` an output index.
    """
    (a, i), (b, j) = query1, query2
    for idx in (i, j):
        if not 0 <= idx < spec.n_outputs:
            raise ValueError(f"output index {idx} out of range")
    g = surrogate_gram(spec, np.atleast_2d(a), [i], np.atleast_2d(b), [j])
    return float(g[0, 0])


@dataclass(frozen=True)
class Dataset:
    """
    Noisy observations of the surrogate function.

    Rows are (parameter vector, output index, observed value).
    """

    points: np.ndarray
    outputs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        outputs = np.asarray(self.outputs, dtype=int).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if self.size and not (len(outputs) == len(values) == points.shape[0]):
            raise ValueError("points, outputs and values must align")
        if np.any(outputs < 0):
            raise ValueError("output indices must be non-negative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "values", values)

    @classmethod
    def empty(cls, dim):
        return cls(np.empty((0, dim)), np.empty(0, dtype=int), np.empty(0))

    @property
    def size(self):
        return np.asarray(self.points).shape[0] if np.ndim(self.points) else 0

    def append(self, point, output, value):
        """New dataset with one extra observation row."""
        return Dataset(
            np.vstack([self.points, np.atleast_2d(np.asarray(point, float))]),
            np.append(self.outputs, int(output)),
            np.append(self.values, float(value)),
        )


@dataclass(frozen=True)
class Posterior:
    """Predictive mean and variance at one extended-domain query."""

    mean: float
    variance: float


def _gram_with_noise(spec, data, jitter=0.0):
    k = surrogate_gram(spec, data.points, data.outputs)
    noise = np.asarray(spec.noise_std, dtype=float)[data.outputs] ** 2
    diag = noise
    if jitter:
        diag = diag + jitter * spec.prior_variances[data.outputs]
    k[np.diag_indices_from(k)] += diag
    return k


def _cholesky_with_retry(spec, data):
    """Lower Cholesky factor of the noisy Gram matrix, one jitter retry."""
    try:
        return np.linalg.cholesky(_gram_with_noise(spec, data))
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(_gram_with_noise(spec, data, _JITTER_SCALE))
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"Gram matrix of {data.size} observations is not positive "
            f"definite even after jitter"
        ) from None


class SurrogateGP:
    """
    Exact GP posterior over the extended (parameter, output) domain.

    The model is immutable: :meth:`condition` returns a new instance, so a
    frozen model can serve concurrent posterior queries while an updated
    copy is built elsewhere.

    Parameters
    ----------
    spec : SurrogateKernelSpec
    data : Dataset, optional
        Starts from the prior when omitted.
    """

    def __init__(self, spec, data=None, _factor=None):
        self.spec = spec
        if data is None:
            dim = spec.per_output[0].dim
            if spec.context_kernel is not None:
                dim += spec.context_kernel.dim
            data = Dataset.empty(dim)
        self.data = data
        if data.size and np.max(data.outputs) >= spec.n_outputs:
            raise ValueError("observation output index out of range")
        if _factor is not None:
            self._chol = _factor
        elif data.size:
            self._chol = _cholesky_with_retry(spec, data)
        else:
            self._chol = None
        if self._chol is not None:
            tmp = solve_triangular(self._chol, data.values, lower=True)
            self._alpha = solve_triangular(
                self._chol, tmp, lower=True, trans="T"
            )
        else:
            self._alpha = None

    @property
    def n_observations(self):
        return self.data.size

    def posterior(self, points, outputs):
        """
        Predictive mean and variance at a batch of queries.

        Parameters
        ----------
        points : ndarray, shape (m, d)
        outputs : int or ndarray of int, shape (m,)

        Returns
        -------
        mean, variance : ndarray, shape (m,)
        """
        spec = self.spec
        points = np.atleast_2d(np.asarray(points, dtype=float))
        outputs = np.broadcast_to(
            np.asarray(outputs, dtype=int), (points.shape[0],)
        )
        # Stationary kernels: the prior variance only depends on the output.
        prior = spec.prior_variances[outputs]
        if self._chol is None:
            return np.zeros(points.shape[0]), prior.copy()
        k_star = surrogate_gram(
            spec, self.data.points, self.data.outputs, points, outputs
        )
        mean = np.einsum("nm,n->m", k_star, self._alpha)
        v = solve_triangular(self._chol, k_star, lower=True)
        var = prior - np.einsum("nm,nm->m", v, v)
        bad = var < -_VARIANCE_DUST * spec.prior_variances[outputs]
        if np.any(bad):
            raise NumericalError(
                "negative predictive variance beyond rounding tolerance"
            )
        return mean, np.maximum(var, 0.0)

    def posterior_single(self, point, output):
        mean, var = self.posterior(np.atleast_2d(point), [output])
        return Posterior(float(mean[0]), float(var[0]))

    def condition(self, point, output, value):
        """
        New model with one extra noisy observation.

        Extends the existing Cholesky factor by one row; falls back to a
        full refactorization (with the jitter retry) when the appended
        pivot is not positive.
        """
        data = self.data.append(point, output, value)
        if self._chol is None:
            return SurrogateGP(self.spec, data)
        pt = np.atleast_2d(np.asarray(point, dtype=float))
        k_vec = surrogate_gram(
            self.spec, self.data.points, self.data.outputs, pt, [output]
        )[:, 0]
        kappa = (
            surrogate_gram(self.spec, pt, [output])[0, 0]
            + self.spec.noise_std[output] ** 2
        )
        b = solve_triangular(self._chol, k_vec, lower=True)
        pivot = kappa - b @ b
        if pivot <= 0:
            return SurrogateGP(self.spec, data)
        n = self.data.size
        chol = np.zeros((n + 1, n + 1))
        chol[:n, :n] = self._chol
        chol[n, :n] = b
        chol[n, n] = np.sqrt(pivot)
        return SurrogateGP(self.spec, data, _factor=chol)


def posterior(spec, data, queries):
    """
    Exact GP posterior for a batch of (point, output-index) queries.

    Functional form of :meth:`SurrogateGP.posterior`; returns one
    :class:`Posterior` per query, independent of query order.
    """
    model = SurrogateGP(spec, data)
    return [model.posterior_single(a, i) for (a, i) in queries]


def condition(model, observation):
    """Return ``model`` updated with one (point, output, value) row."""
    point, output, value = observation
    return model.condition(point, output, value)
