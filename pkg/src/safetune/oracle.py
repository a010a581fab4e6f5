"""
Brute-force reference computations for tests and acceptance runs.

Everything here is deliberately naive: explicit matrix inversion, nested
Python loops, no factorization tricks and no jitter. These routines are
the ground truth the fast implementations are checked against, so they
share as little code with them as possible.

All set routines operate on synthetic truth tables only; there is no way
to point them at a live evaluator.
"""

import math

import numpy as np
from dataclasses import dataclass

from .gp_core import MATERN32, SQUARED_EXPONENTIAL, Posterior


__all__ = [
    "GroundTruth",
    "reach_operator",
    "reach_closure",
    "baseline_optimum",
    "dense_posterior",
    "exhaustive_safe_set",
    "exhaustive_maximizers",
    "exhaustive_expanders",
]


@dataclass(frozen=True)
class GroundTruth:
    """
    Tabulated true performance and constraint values on a finite domain.

    Parameters
    ----------
    performance : ndarray, shape (m,)
    constraints : ndarray, shape (q, m)
    """

    performance: np.ndarray
    constraints: np.ndarray

    def __post_init__(self):
        for name in ("performance", "constraints"):
            value = getattr(self, name)
            if callable(value):
                raise TypeError(
                    f"{name} must be a table of precomputed values, not a "
                    f"callable; ground truth only exists for synthetic "
                    f"benchmarks"
                )
        perf = np.asarray(self.performance, dtype=float).ravel()
        cons = np.atleast_2d(np.asarray(self.constraints, dtype=float))
        if cons.shape[1] != perf.size:
            raise ValueError("constraint tables must cover the full domain")
        if not (np.all(np.isfinite(perf)) and np.all(np.isfinite(cons))):
            raise ValueError("truth tables must be finite everywhere")
        object.__setattr__(self, "performance", perf)
        object.__setattr__(self, "constraints", cons)

    @property
    def n_constraints(self):
        return self.constraints.shape[0]


def _per_constraint(lipschitz, q):
    l = np.asarray(lipschitz, dtype=float).ravel()
    if l.size == 1:
        return np.full(q, l[0])
    if l.size == q + 1:
        # Per-output constants including the performance output; the
        # reachability definitions only use the constraint entries.
        return l[1:]
    if l.size == q:
        return l
    raise ValueError("lipschitz must be scalar, per-constraint or per-output")


def reach_operator(safe, truth, lipschitz, epsilon, dists):
    """
    One step of Lipschitz expansion from a set known up to ``epsilon``.

    A point joins the expansion when, for every constraint, some member
    of the current set has enough true margin to certify it:
    ``g_i(a') - epsilon - L_i * ||a - a'|| >= 0``.

    Parameters
    ----------
    safe : boolean ndarray, shape (m,)
    truth : GroundTruth
    lipschitz : float or sequence
    epsilon : float
    dists : ndarray, shape (m, m)
        Pairwise domain distances.

    Returns
    -------
    boolean ndarray, shape (m,) — always a superset of ``safe``.
    """
    safe = np.asarray(safe, dtype=bool)
    m = safe.size
    lips = _per_constraint(lipschitz, truth.n_constraints)
    result = safe.copy()
    support = np.flatnonzero(safe)
    for a in range(m):
        if result[a]:
            continue
        ok = True
        for i in range(truth.n_constraints):
            gi = truth.constraints[i]
            if not any(
                gi[s] - epsilon - lips[i] * dists[s, a] >= 0 for s in support
            ):
                ok = False
                break
        result[a] = ok
    return result


def reach_closure(seed, truth, lipschitz, epsilon, dists):
    """
    Fixed point of :func:`reach_operator` starting from ``seed``.

    Terminates after at most m applications since the set only grows.
    """
    current = np.asarray(seed, dtype=bool).copy()
    if not current.any():
        raise ValueError("seed set must be non-empty")
    for _ in range(current.size):
        nxt = reach_operator(current, truth, lipschitz, epsilon, dists)
        if np.array_equal(nxt, current):
            return nxt
        current = nxt
    return current


def baseline_optimum(seed, truth, lipschitz, epsilon, dists):
    """Best true performance over the safely reachable closure."""
    closure = reach_closure(seed, truth, lipschitz, epsilon, dists)
    return float(np.max(truth.performance[closure]))


def _scalar_kernel(spec, a, b):
    r2 = 0.0
    for x, y, l in zip(a, b, spec.lengthscales):
        r2 += ((x - y) / l) ** 2
    r = math.sqrt(r2)
    if spec.family == MATERN32:
        return spec.variance * (1.0 + math.sqrt(3.0) * r) * math.exp(
            -math.sqrt(3.0) * r
        )
    if spec.family == SQUARED_EXPONENTIAL:
        return spec.variance * math.exp(-0.5 * r * r)
    raise ValueError(spec.family)


def _scalar_joint_kernel(spec, a, i, b, j):
    if spec.context_kernel is not None:
        d = spec.param_dim
        ctx = _scalar_kernel(spec.context_kernel, a[d:], b[d:])
        a, b = a[:d], b[:d]
    else:
        ctx = 1.0
    if i == j:
        return ctx * _scalar_kernel(spec.per_output[i], a, b)
    cross = spec.cross_terms.get((min(i, j), max(i, j)))
    if cross is None:
        return 0.0
    return ctx * _scalar_kernel(cross, a, b)


def dense_posterior(spec, data, queries):
    """
    GP posterior via explicit inversion of the noisy Gram matrix.

    Same contract as :func:`safetune.gp_core.posterior`, but computed with
    scalar kernel loops and ``np.linalg.inv``. No jitter: a singular
    system raises ``numpy.linalg.LinAlgError``.
    """
    n = data.size
    pts = [tuple(p) for p in np.atleast_2d(data.points)]
    outs = list(np.asarray(data.outputs, dtype=int))
    if n:
        gram = np.empty((n, n))
        for r in range(n):
            for c in range(n):
                gram[r, c] = _scalar_joint_kernel(
                    spec, pts[r], outs[r], pts[c], outs[c]
                )
            gram[r, r] += spec.noise_std[outs[r]] ** 2
        inv = np.linalg.inv(gram)
        weights = inv @ np.asarray(data.values, dtype=float)

    results = []
    for a, i in queries:
        a = tuple(np.atleast_1d(np.asarray(a, dtype=float)))
        prior = _scalar_joint_kernel(spec, a, i, a, i)
        if not n:
            results.append(Posterior(0.0, prior))
            continue
        k_star = np.array(
            [_scalar_joint_kernel(spec, pts[r], outs[r], a, i) for r in range(n)]
        )
        mean = float(k_star @ weights)
        var = float(prior - k_star @ inv @ k_star)
        results.append(Posterior(mean, var))
    return results


def exhaustive_safe_set(lower, seed, prev_safe, dists, lipschitz, mode):
    """
    Literal triple-loop evaluation of the safe-set definition.

    ``mode="lipschitz"``: a point is safe when, for every constraint, some
    member of the previous safe set certifies it through its lower bound
    and the Lipschitz constant. ``mode="gp_direct"``: a point is safe when
    all its constraint lower bounds are non-negative. The seed set is
    always included.
    """
    lower = np.asarray(lower, dtype=float)
    m, n_out = lower.shape
    seed = np.asarray(seed, dtype=bool)
    result = np.zeros(m, dtype=bool)
    if mode == "gp_direct":
        for a in range(m):
            result[a] = seed[a] or all(
                lower[a, i] >= 0 for i in range(1, n_out)
            )
        return result
    if mode != "lipschitz":
        raise ValueError(mode)
    lips = _per_constraint(lipschitz, n_out - 1)
    prev = np.asarray(prev_safe, dtype=bool)
    for a in range(m):
        ok = True
        for i in range(1, n_out):
            if not any(
                prev[s] and lower[s, i] - lips[i - 1] * dists[s, a] >= 0
                for s in range(m)
            ):
                ok = False
                break
        result[a] = ok or seed[a]
    return result


def exhaustive_maximizers(lower_f, upper_f, safe):
    """Safe points whose upper bound reaches the best safe lower bound."""
    safe = np.asarray(safe, dtype=bool)
    best = max(lower_f[a] for a in range(len(lower_f)) if safe[a])
    out = np.zeros_like(safe)
    for a in range(len(lower_f)):
        out[a] = safe[a] and upper_f[a] >= best
    return out


def exhaustive_expanders(upper, safe, dists, lipschitz):
    """
    Count, per safe point, the outside points its optimistic constraint
    bounds could certify; expanders are those with a positive count.
    """
    upper = np.asarray(upper, dtype=float)
    m, n_out = upper.shape
    safe = np.asarray(safe, dtype=bool)
    lips = _per_constraint(lipschitz, n_out - 1)
    counts = np.zeros(m, dtype=int)
    for a in range(m):
        if not safe[a]:
            continue
        for b in range(m):
            if safe[b]:
                continue
            if any(
                upper[a, i] - lips[i - 1] * dists[a, b] >= 0
                for i in range(1, n_out)
            ):
                counts[a] += 1
    return counts > 0, counts
