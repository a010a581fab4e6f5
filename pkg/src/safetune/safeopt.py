"""
Safe Bayesian optimization with multiple safety constraints.

The optimizer maintains confidence intervals for a jointly modeled
performance function and constraint set over a finite parameter domain.
Each iteration it certifies a safe set from the constraint lower bounds,
identifies candidate maximizers and safe-set expanders, and evaluates the
most uncertain candidate. Safety comes in two flavors:

* ``"lipschitz"`` — iteratively intersected ("contained") confidence
  intervals plus Lipschitz-continuity certificates. This is the variant
  whose exploration guarantees can be analyzed.
* ``"gp_direct"`` — raw confidence intervals; a point is safe when all
  its constraint lower bounds are non-negative. More practical, since the
  certificates come from the GP alone.

Expander counting uses the Lipschitz constant in both modes.
"""

import math

import numpy as np
from dataclasses import dataclass, field, replace
from scipy.spatial.distance import cdist


__all__ = [
    "LIPSCHITZ",
    "GP_DIRECT",
    "ParameterDomain",
    "BetaSchedule",
    "ConfidenceState",
    "SafeSets",
    "AlgoConfig",
    "RunTraceEntry",
    "RunTrace",
    "NoCandidatesError",
    "beta",
    "update_confidence",
    "safe_set",
    "maximizers",
    "expanders",
    "select_next",
    "best_estimate",
    "SafeOptMC",
    "gp_ucb_select",
    "run_gp_ucb",
]


LIPSCHITZ = "lipschitz"
GP_DIRECT = "gp_direct"

_PI_QUADRATIC = "n2pi2over6"
_PI_FINITE_HORIZON = "finite_horizon"


class NoCandidatesError(RuntimeError):
    """Maximizer and expander sets are both empty."""


@dataclass(frozen=True)
class ParameterDomain:
    """
    Finite, ordered set of candidate parameter vectors.

    The row order is fixed for a run and breaks all argmax ties, which
    makes every selection deterministic.

    Parameters
    ----------
    points : ndarray, shape (m, d)
    metric_weights : sequence of float, optional
        Per-dimension divisors for the distance metric; omit for plain
        Euclidean distances.
    """

    points: np.ndarray
    metric_weights: tuple = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(np.unique(pts, axis=0)) != pts.shape[0]:
            raise ValueError("domain points must be unique")
        object.__setattr__(self, "points", pts)
        if self.metric_weights is not None:
            w = tuple(float(v) for v in self.metric_weights)
            if len(w) != pts.shape[1] or not all(v > 0 for v in w):
                raise ValueError("need one positive weight per dimension")
            object.__setattr__(self, "metric_weights", w)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def distances(self):
        """Pairwise (m, m) distance matrix under the domain metric."""
        pts = self.points
        if self.metric_weights is not None:
            pts = pts / np.asarray(self.metric_weights)
        return cdist(pts, pts)


@dataclass(frozen=True)
class BetaSchedule:
    """
    Confidence-interval scaling per iteration.

    ``mode="constant"`` keeps ``beta_sqrt**2`` at every iteration.
    ``mode="lemma1"`` sets ``beta_n = 2 log(n_outputs * n_points * pi_n /
    delta)`` where ``pi_n`` follows either the quadratic rule
    ``n^2 pi^2 / 6`` or the finite-horizon rule ``pi_n = t_max``. Either
    rule keeps all intervals valid simultaneously with probability at
    least ``1 - delta`` when the truth is drawn from the modeled prior.
    """

    mode: str = "constant"
    beta_sqrt: float = 2.0
    delta: float = None
    pi_rule: str = _PI_QUADRATIC
    t_max: int = None

    def __post_init__(self):
        if self.mode not in ("constant", "lemma1"):
            raise ValueError(f"unknown beta mode: {self.mode!r}")
        if self.mode == "constant":
            if not (self.beta_sqrt and self.beta_sqrt > 0):
                raise ValueError("constant mode needs beta_sqrt > 0")
        else:
            if self.delta is None or not 0 < self.delta < 1:
                raise ValueError("lemma1 mode needs delta in (0, 1)")
            if self.pi_rule not in (_PI_QUADRATIC, _PI_FINITE_HORIZON):
                raise ValueError(f"unknown pi rule: {self.pi_rule!r}")
            if self.pi_rule == _PI_FINITE_HORIZON and not (
                self.t_max and self.t_max >= 1
            ):
                raise ValueError("finite_horizon rule needs t_max >= 1")

    def beta(self, n, n_points, n_outputs):
        """Interval scaling beta_n for iteration ``n`` (1-based)."""
        if n < 1:
            raise ValueError("iterations are 1-based")
        if self.mode == "constant":
            return float(self.beta_sqrt) ** 2
        if self.pi_rule == _PI_QUADRATIC:
            pi_n = n * n * math.pi**2 / 6.0
        else:
            pi_n = float(self.t_max)
        return 2.0 * math.log(n_outputs * n_points * pi_n / self.delta)


def beta(schedule, n, n_points, n_outputs):
    """Functional form of :meth:`BetaSchedule.beta`."""
    return schedule.beta(n, n_points, n_outputs)


@dataclass(frozen=True)
class ConfidenceState:
    """
    Lower/upper confidence bounds per (domain point, output).

    ``misspec_events`` counts contained-interval intersections that came
    up empty (a sign the model or beta schedule is misspecified); such
    intervals collapse to the midpoint of the crossed bounds instead of
    aborting the run.
    """

    lower: np.ndarray
    upper: np.ndarray
    iteration: int = 0
    misspec_events: int = 0

    @classmethod
    def initial(cls, n_points, n_outputs, seed_mask):
        """
        Prior state: seed points start with [0, inf) intervals for every
        output (they are asserted safe), everything else unbounded.
        """
        lower = np.full((n_points, n_outputs), -np.inf)
        upper = np.full((n_points, n_outputs), np.inf)
        lower[np.asarray(seed_mask, dtype=bool), :] = 0.0
        return cls(lower, upper)

    @property
    def widths(self):
        return self.upper - self.lower


def update_confidence(state, mean, std, beta_n, mode):
    """
    Fold the iteration-n GP bounds ``mean +- sqrt(beta_n) * std`` into the
    state.

    Lipschitz (theoretical) mode intersects with the previous intervals so
    consecutive intervals are nested; gp_direct mode replaces them.

    Returns the updated :class:`ConfidenceState`.
    """
    scale = math.sqrt(beta_n)
    q_low = mean - scale * std
    q_high = mean + scale * std
    events = state.misspec_events
    if mode == GP_DIRECT:
        lower, upper = q_low.copy(), q_high.copy()
    else:
        lower = np.maximum(state.lower, q_low)
        upper = np.minimum(state.upper, q_high)
        crossed = lower > upper
        if crossed.any():
            mid = 0.5 * (lower[crossed] + upper[crossed])
            lower[crossed] = mid
            upper[crossed] = mid
            events += int(np.count_nonzero(crossed))
    return ConfidenceState(lower, upper, state.iteration + 1, events)


def _per_constraint_lipschitz(lipschitz, n_outputs):
    l = np.asarray(lipschitz, dtype=float).ravel()
    if l.size == 1:
        l = np.full(n_outputs, l[0])
    elif l.size == n_outputs - 1:
        l = np.concatenate([[l[0]], l])
    elif l.size != n_outputs:
        raise ValueError("lipschitz must be scalar, per-constraint or per-output")
    if not np.all(l > 0):
        raise ValueError("Lipschitz constants must be positive")
    return l[1:]


def safe_set(state, seed_mask, prev_safe, dists, lipschitz, mode):
    """
    Certified-safe subset of the domain.

    Lipschitz mode: a point is safe when every constraint is certified by
    some previously safe point through ``l_i(a) - L_i * d(a, a') >= 0``.
    gp_direct mode: a point is safe when all its own constraint lower
    bounds are non-negative. Both always retain the seed set.

    Returns a boolean mask over the domain.
    """
    lower = state.lower
    n_outputs = lower.shape[1]
    seed_mask = np.asarray(seed_mask, dtype=bool)
    if mode == GP_DIRECT:
        if n_outputs > 1:
            safe = np.all(lower[:, 1:] >= 0.0, axis=1)
        else:
            safe = np.zeros(lower.shape[0], dtype=bool)
        return safe | seed_mask
    if mode != LIPSCHITZ:
        raise ValueError(f"unknown mode: {mode!r}")
    prev = np.asarray(prev_safe, dtype=bool)
    if not prev.any():
        raise ValueError("previous safe set must be non-empty")
    lips = _per_constraint_lipschitz(lipschitz, n_outputs)
    safe = np.ones(lower.shape[0], dtype=bool)
    support = dists[prev]
    for i in range(1, n_outputs):
        margin = lower[prev, i][:, None] - lips[i - 1] * support
        safe &= np.any(margin >= 0.0, axis=0)
    return safe | seed_mask


def maximizers(state, safe):
    """Safe points whose upper performance bound beats the best safe lower bound."""
    safe = np.asarray(safe, dtype=bool)
    if not safe.any():
        raise ValueError("safe set must be non-empty")
    best_lower = np.max(state.lower[safe, 0])
    out = np.zeros(safe.size, dtype=bool)
    out[safe] = state.upper[safe, 0] >= best_lower
    return out


def expanders(state, safe, dists, lipschitz):
    """
    Safe points that could certify at least one currently unsafe point.

    The score of a safe point counts the distinct unsafe points reachable
    from it when its constraint values are taken at their upper bounds.

    Returns
    -------
    mask : boolean ndarray — the expander set
    counts : int ndarray — per-point optimistic certification counts
    """
    upper = state.upper
    m, n_outputs = upper.shape
    safe = np.asarray(safe, dtype=bool)
    counts = np.zeros(m, dtype=int)
    if safe.all() or n_outputs == 1:
        return np.zeros(m, dtype=bool), counts
    lips = _per_constraint_lipschitz(lipschitz, n_outputs)
    outside = ~safe
    reach = np.zeros((int(safe.sum()), int(outside.sum())), dtype=bool)
    span = dists[np.ix_(safe, outside)]
    for i in range(1, n_outputs):
        reach |= upper[safe, i][:, None] - lips[i - 1] * span >= 0.0
    counts[safe] = reach.sum(axis=1)
    return counts >= 1, counts


def select_next(state, candidates, scaling=None):
    """
    Most uncertain (point, output) pair among the candidate points.

    Parameters
    ----------
    state : ConfidenceState
    candidates : boolean ndarray
        Union of the maximizer and expander sets.
    scaling : ndarray, optional
        Per-output divisors (prior standard deviations) applied to the
        interval widths before the argmax.

    Returns
    -------
    (point index, output index, selection width). Ties break on domain
    order, then output order.
    """
    candidates = np.asarray(candidates, dtype=bool)
    if not candidates.any():
        raise NoCandidatesError("no maximizers or expanders to evaluate")
    widths = state.widths
    if scaling is not None:
        widths = widths / np.asarray(scaling, dtype=float)
    masked = np.where(candidates[:, None], widths, -np.inf)
    flat = int(np.argmax(masked))
    idx, out = divmod(flat, widths.shape[1])
    return idx, out, float(masked[idx, out])


def best_estimate(state, safe):
    """Index of the pessimistic best: argmax of the performance lower bound."""
    safe = np.asarray(safe, dtype=bool)
    if not safe.any():
        raise ValueError("safe set must be non-empty")
    lower_f = np.where(safe, state.lower[:, 0], -np.inf)
    return int(np.argmax(lower_f))


@dataclass(frozen=True)
class SafeSets:
    """Safe, maximizer and expander masks plus expander scores."""

    safe: np.ndarray
    maximizers: np.ndarray
    expanders: np.ndarray
    expander_scores: np.ndarray

    @property
    def candidates(self):
        return self.maximizers | self.expanders


@dataclass(frozen=True)
class AlgoConfig:
    """
    Optimizer configuration.

    Parameters
    ----------
    mode : str
        ``"lipschitz"`` or ``"gp_direct"``.
    lipschitz : float or sequence
        Lipschitz constant(s); scalar, one per constraint, or one per
        output. Used for safety certificates in Lipschitz mode and for
        expander counting in both modes.
    epsilon : float
        Accuracy slack. Only used by the stopping rule (and by baseline
        comparisons); it never enters the set definitions.
    beta : BetaSchedule
    per_output_scaling : bool or sequence of bool
        Divide interval widths by the output's prior standard deviation
        before selecting the most uncertain candidate.
    seed : int
        Root seed recorded for reproducibility of the surrounding
        experiment; the optimizer itself draws no random numbers.
    """

    mode: str = GP_DIRECT
    lipschitz: object = 1.0
    epsilon: float = 0.0
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    per_output_scaling: object = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (LIPSCHITZ, GP_DIRECT):
            raise ValueError(f"unknown mode: {self.mode!r}")
        lips = np.asarray(self.lipschitz, dtype=float).ravel()
        if not np.all(lips > 0):
            raise ValueError("Lipschitz constants must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def scaling_vector(self, prior_stds):
        """Per-output width divisors, or None when scaling is fully off."""
        flags = np.asarray(self.per_output_scaling, dtype=bool).ravel()
        if flags.size == 1:
            flags = np.repeat(flags, len(prior_stds))
        if flags.size != len(prior_stds):
            raise ValueError("need one scaling flag per output")
        if not flags.any():
            return None
        return np.where(flags, np.asarray(prior_stds, dtype=float), 1.0)


@dataclass(frozen=True)
class RunTraceEntry:
    """One optimizer iteration: what was selected, observed and certified."""

    iteration: int
    point_index: int
    point: tuple
    output: int
    width: float
    observations: tuple
    n_safe: int
    n_maximizers: int
    n_expanders: int
    best_index: int
    best_point: tuple
    best_lower: float
    misspec_events: int
    violation: bool = None


@dataclass
class RunTrace:
    """Ordered record of an optimization run."""

    entries: list = field(default_factory=list)
    stop_reason: str = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, entry):
        self.entries.append(entry)


@dataclass(frozen=True)
class Proposal:
    """A pending evaluation request produced by :meth:`SafeOptMC.propose`."""

    iteration: int
    point_index: int
    output: int
    width: float
    sets: SafeSets
    best_index: int


class SafeOptMC:
    """
    Safe optimizer over a finite domain with a joint surrogate model.

    Parameters
    ----------
    model : SurrogateGP
        Joint model of the performance function and all constraints.
    domain : ParameterDomain
    seed_indices : sequence of int
        Domain indices known to be safe a priori. Must be non-empty.
    config : AlgoConfig
    iteration_offset : int, optional
        Starting value of the iteration counter; lets a caller continue a
        confidence schedule across several optimizer instances.

    The evaluation loop is sequential by design; hold the instance
    exclusively while stepping it.
    """

    def __init__(self, model, domain, seed_indices, config, iteration_offset=0):
        seed_indices = np.asarray(seed_indices, dtype=int).ravel()
        if seed_indices.size == 0:
            raise ValueError("need at least one initial safe point")
        if np.any(seed_indices < 0) or np.any(seed_indices >= domain.size):
            raise ValueError("seed index out of domain range")
        self.model = model
        self.domain = domain
        self.config = config
        self.n_outputs = model.spec.n_outputs
        self.seed_mask = np.zeros(domain.size, dtype=bool)
        self.seed_mask[seed_indices] = True
        self.state = ConfidenceState.initial(
            domain.size, self.n_outputs, self.seed_mask
        )
        self.state = replace(self.state, iteration=iteration_offset)
        self.safe = self.seed_mask.copy()
        self._dists = domain.distances()
        self._scaling = config.scaling_vector(
            np.sqrt(model.spec.prior_variances)
        )
        self._pending = None
        self.safe_set_shrank = 0

    @property
    def iteration(self):
        return self.state.iteration

    def _posterior_grid(self):
        pts = self.domain.points
        means = np.empty((pts.shape[0], self.n_outputs))
        stds = np.empty_like(means)
        for i in range(self.n_outputs):
            mean, var = self.model.posterior(pts, i)
            means[:, i] = mean
            stds[:, i] = np.sqrt(var)
        return means, stds

    def propose(self):
        """
        Advance the confidence state one iteration and pick the next
        evaluation point. Idempotent until :meth:`observe` is called.
        """
        if self._pending is not None:
            return self._pending
        n = self.state.iteration + 1
        beta_n = self.config.beta.beta(n, self.domain.size, self.n_outputs)
        mean, std = self._posterior_grid()
        self.state = update_confidence(
            self.state, mean, std, beta_n, self.config.mode
        )
        new_safe = safe_set(
            self.state,
            self.seed_mask,
            self.safe,
            self._dists,
            self.config.lipschitz,
            self.config.mode,
        )
        if not np.all(new_safe[self.safe]):
            self.safe_set_shrank += 1
        self.safe = new_safe
        m_mask = maximizers(self.state, self.safe)
        g_mask, scores = expanders(
            self.state, self.safe, self._dists, self.config.lipschitz
        )
        sets = SafeSets(self.safe.copy(), m_mask, g_mask, scores)
        idx, out, width = select_next(self.state, sets.candidates, self._scaling)
        self._pending = Proposal(
            n, idx, out, width, sets, best_estimate(self.state, self.safe)
        )
        return self._pending

    def observe(self, values):
        """
        Condition the model on noisy measurements of every output at the
        pending proposal's point, one observation row per output.
        """
        if self._pending is None:
            raise RuntimeError("no pending proposal; call propose() first")
        values = np.asarray(values, dtype=float).ravel()
        if values.size != self.n_outputs:
            raise ValueError(
                f"expected {self.n_outputs} observed values, got {values.size}"
            )
        point = self.domain.points[self._pending.point_index]
        model = self.model
        for i in range(self.n_outputs):
            model = model.condition(point, i, values[i])
        self.model = model
        self._pending = None

    def _entry(self, proposal, values, violation):
        best_idx = proposal.best_index
        return RunTraceEntry(
            iteration=proposal.iteration,
            point_index=proposal.point_index,
            point=tuple(self.domain.points[proposal.point_index]),
            output=proposal.output,
            width=proposal.width,
            observations=tuple(float(v) for v in values),
            n_safe=int(proposal.sets.safe.sum()),
            n_maximizers=int(proposal.sets.maximizers.sum()),
            n_expanders=int(proposal.sets.expanders.sum()),
            best_index=best_idx,
            best_point=tuple(self.domain.points[best_idx]),
            best_lower=float(self.state.lower[best_idx, 0]),
            misspec_events=self.state.misspec_events,
            violation=violation,
        )

    def step(self, evaluator, violation_check=None):
        """
        Run one full iteration: propose, evaluate, condition, record.

        ``evaluator`` maps a parameter vector to the q+1 noisy output
        values (performance first). ``violation_check``, when given, maps
        the evaluated point to a ground-truth safety verdict that is
        stored on the trace entry.
        """
        proposal = self.propose()
        point = self.domain.points[proposal.point_index]
        values = evaluator(point)
        violation = None if violation_check is None else bool(violation_check(point))
        self.observe(values)
        return self._entry(proposal, values, violation)

    def run(self, evaluator, max_iterations, width_tol=None, violation_check=None,
            on_iteration=None):
        """
        Iterate :meth:`step` until the iteration cap or until the selected
        width drops below ``width_tol`` (the candidate is then left
        unevaluated).

        ``on_iteration(optimizer, entry)`` is invoked after each recorded
        iteration; acceptance suites use it to audit invariants.
        """
        trace = RunTrace()
        for _ in range(max_iterations):
            try:
                proposal = self.propose()
            except NoCandidatesError:
                trace.stop_reason = "no_candidates"
                return trace
            if width_tol is not None and proposal.width < width_tol:
                trace.stop_reason = "width_converged"
                return trace
            point = self.domain.points[proposal.point_index]
            values = evaluator(point)
            violation = (
                None if violation_check is None else bool(violation_check(point))
            )
            self.observe(values)
            entry = self._entry(proposal, values, violation)
            trace.append(entry)
            if on_iteration is not None:
                on_iteration(self, entry)
        trace.stop_reason = "max_iterations"
        return trace

    def best(self):
        """Current pessimistic best: (index, point, performance lower bound)."""
        idx = best_estimate(self.state, self.safe)
        return idx, tuple(self.domain.points[idx]), float(self.state.lower[idx, 0])


def gp_ucb_select(model, beta_n, domain):
    """
    Upper-confidence-bound acquisition over the full domain, performance
    output only. No safety mechanism; serves as the unsafe baseline.
    """
    mean, var = model.posterior(domain.points, 0)
    ucb = mean + math.sqrt(beta_n) * np.sqrt(var)
    return int(np.argmax(ucb))


def run_gp_ucb(model, domain, evaluator, schedule, max_iterations,
               violation_check=None):
    """
    Plain UCB optimization loop used for safe-vs-unsafe comparisons.

    Evaluates all outputs at each selected point (conditioning the model
    on every one), like the safe loop, but selects purely by the
    performance UCB. Returns (final model, list of evaluated indices,
    list of ground-truth violation flags or Nones).
    """
    n_outputs = model.spec.n_outputs
    chosen, flags = [], []
    for n in range(1, max_iterations + 1):
        beta_n = schedule.beta(n, domain.size, n_outputs)
        idx = gp_ucb_select(model, beta_n, domain)
        point = domain.points[idx]
        values = np.asarray(evaluator(point), dtype=float).ravel()
        for i in range(n_outputs):
            model = model.condition(point, i, values[i])
        chosen.append(idx)
        flags.append(
            None if violation_check is None else bool(violation_check(point))
        )
    return model, chosen, flags
