"""
Benchmark objectives for exercising the safe optimizer.

Two families:

* Synthetic instances — true performance/constraint tables drawn from the
  exact joint GP prior on a finite grid, so optimizer guarantees can be
  checked against brute-force baselines.
* A simulated tracking plant — a second-order position controller with
  actuation lag and disturbance noise, exposing the classic tuning
  trade-off: faster gains track better until they amplify noise past a
  commanded-tilt-rate limit.

The plant is a desk-scale analog of a quadrotor position loop, not a
vehicle model; all its constants are artifact choices, collected in
:data:`DEFAULT_PLANT`.
"""

import math
from functools import lru_cache

import numpy as np
from dataclasses import dataclass, field, replace

from .gp_core import NumericalError, SurrogateKernelSpec, surrogate_gram
from .oracle import GroundTruth


__all__ = [
    "SyntheticInstance",
    "sample_synthetic",
    "sample_safety_instance",
    "empirical_lipschitz",
    "TableEvaluator",
    "PlantSpec",
    "EvaluationResult",
    "DEFAULT_PLANT",
    "INITIAL_PARAMETERS",
    "simulate_step",
    "simulate_circle",
    "baseline_cost",
    "PlantEvaluator",
    "seed_streams",
]


_JITTER_SCALE = 1e-10

# Beyond this position magnitude (meters) a rollout counts as diverged.
_BLOWUP_LIMIT = 100.0


def seed_streams(root_seed, *names):
    """
    Independent child generators split from one root seed.

    Splitting is positional: the k-th name always receives the k-th child
    stream, so each component's randomness is reproducible on its own.
    """
    children = np.random.SeedSequence(root_seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def empirical_lipschitz(points, values, dists=None):
    """
    Largest finite-difference slope |v(a) - v(b)| / ||a - b|| over all
    point pairs; the exact Lipschitz constant of the table on the grid.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    if dists is None:
        from scipy.spatial.distance import cdist

        dists = cdist(points, points)
    diffs = np.abs(values[:, None] - values[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        slopes = np.where(dists > 0, diffs / dists, 0.0)
    return float(slopes.max())


@dataclass(frozen=True)
class SyntheticInstance:
    """
    A fully known benchmark: truth tables sampled from the GP prior.

    ``tables`` holds one row per output (performance first). The recorded
    ``lipschitz`` entries are the empirical per-output constants of the
    tables; ``safe_seed_indices`` are the chosen starting points and
    ``unsafe_fraction`` the measured share of grid points violating some
    constraint.
    """

    points: np.ndarray
    spec: SurrogateKernelSpec
    tables: np.ndarray
    lipschitz: np.ndarray
    seed: int
    safe_seed_indices: tuple = ()
    unsafe_fraction: float = None

    @property
    def n_outputs(self):
        return self.tables.shape[0]

    def truth(self):
        return GroundTruth(self.tables[0], self.tables[1:])

    def violation_check(self):
        """Callable flagging points whose true constraint values dip below 0."""
        index = _PointIndex(self.points)

        def check(point):
            k = index.lookup(point)
            return bool(np.any(self.tables[1:, k] < 0.0))

        return check

    def evaluator(self, noise_seed):
        return TableEvaluator(self, noise_seed)


class _PointIndex:
    """Exact lookup from parameter vector to grid row."""

    def __init__(self, points):
        self._map = {tuple(p): k for k, p in enumerate(np.atleast_2d(points))}

    def lookup(self, point):
        key = tuple(np.atleast_1d(np.asarray(point, dtype=float)))
        try:
            return self._map[key]
        except KeyError:
            raise KeyError(f"point {key} is not on the benchmark grid") from None


class TableEvaluator:
    """
    Noisy oracle for a synthetic instance.

    Each call returns all true output values at the queried grid point
    plus independent Gaussian noise at the spec's per-output levels.
    """

    def __init__(self, instance, noise_seed):
        self.instance = instance
        self._index = _PointIndex(instance.points)
        self._rng = np.random.default_rng(noise_seed)

    def __call__(self, point):
        k = self._index.lookup(point)
        noise = self._rng.standard_normal(self.instance.n_outputs)
        return self.instance.tables[:, k] + noise * np.asarray(
            self.instance.spec.noise_std
        )

    def true_values(self, point):
        return self.instance.tables[:, self._index.lookup(point)].copy()


def _joint_prior_sample(spec, points, rng):
    """One draw of all outputs from the exact joint prior on the grid."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = points.shape[0]
    q1 = spec.n_outputs
    x = np.tile(points, (q1, 1))
    idx = np.repeat(np.arange(q1), m)
    gram = surrogate_gram(spec, x, idx)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        jitter = _JITTER_SCALE * spec.prior_variances[idx]
        try:
            chol = np.linalg.cholesky(gram + np.diag(jitter))
        except np.linalg.LinAlgError:
            raise NumericalError(
                "prior Gram matrix is not positive definite even after jitter"
            ) from None
    flat = chol @ rng.standard_normal(m * q1)
    return flat.reshape(q1, m)


def sample_synthetic(seed, spec, points):
    """
    Draw a synthetic instance from the joint GP prior.

    Parameters
    ----------
    seed : int
    spec : SurrogateKernelSpec
    points : ndarray, shape (m, d)
        Evaluation grid; dense sampling is only feasible for m under
        roughly 10^4 points.

    Returns
    -------
    SyntheticInstance
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] > 10_000:
        raise ValueError("grid too large for dense prior sampling")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tables = _joint_prior_sample(spec, points, rng)
    from scipy.spatial.distance import cdist

    dists = cdist(points, points)
    lips = np.array(
        [empirical_lipschitz(points, t, dists) for t in tables]
    )
    return SyntheticInstance(points, spec, tables, lips, seed)


def sample_safety_instance(
    seed,
    spec,
    points,
    unsafe_range=(0.25, 0.55),
    seed_margin=0.3,
    max_tries=200,
    require_unsafe_optimum=False,
):
    """
    Rejection-sample an instance suitable for safety experiments.

    Redraws from the prior until the fraction of grid points violating
    some constraint falls inside ``unsafe_range`` and a usable starting
    point exists: all constraints at least ``seed_margin`` and a
    non-negative performance value (the optimizer asserts performance
    bounds start at [0, inf) on seeds). With ``require_unsafe_optimum``
    the unconstrained performance argmax must lie in the unsafe region,
    which makes the instance informative for safe-vs-unsafe contrasts.

    The chosen starting point is the qualifying point with the largest
    worst-case constraint margin.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    for attempt in range(max_tries):
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(attempt,))
        )
        tables = _joint_prior_sample(spec, points, rng)
        unsafe = np.any(tables[1:] < 0.0, axis=0)
        frac = float(unsafe.mean())
        if not unsafe_range[0] <= frac <= unsafe_range[1]:
            continue
        margins = tables[1:].min(axis=0)
        eligible = (margins >= seed_margin) & (tables[0] >= 0.0)
        if not eligible.any():
            continue
        if require_unsafe_optimum and not unsafe[int(np.argmax(tables[0]))]:
            continue
        seed_idx = int(np.argmax(np.where(eligible, margins, -np.inf)))
        from scipy.spatial.distance import cdist

        dists = cdist(points, points)
        lips = np.array(
            [empirical_lipschitz(points, t, dists) for t in tables]
        )
        return SyntheticInstance(
            points,
            spec,
            tables,
            lips,
            seed,
            safe_seed_indices=(seed_idx,),
            unsafe_fraction=frac,
        )
    raise RuntimeError(
        f"no instance matching the safety profile in {max_tries} draws"
    )


# --------------------------------------------------------------------------
# Simulated tracking plant
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantSpec:
    """
    Planar second-order tracking plant with actuation lag, acceleration
    saturation, cross-axis coupling and disturbances.

    The closed-loop law commands accelerations per axis from position and
    velocity errors with shared parameters a = (tau, zeta). Commands
    saturate at ``accel_limit``, pass through a first-order actuation lag,
    and a fraction ``cross_coupling`` of the first axis' applied
    acceleration leaks into the second (an airframe-asymmetry stand-in).
    Zero-mean Gaussian disturbance accelerations act on both axes.

    The tilt angle per axis is the lagged applied acceleration over
    gravity (small-angle). The rate signal guarded by the safety
    constraint is the finite-difference tilt rate *orthogonal to the
    commanded motion*: the cross axis for the step reference, the
    body-frame deviation for the circle. Perfect tracking keeps it at
    zero; aggressive gains amplify coupling and noise into it.

    All numeric defaults are artifact choices for the desk-scale analog.
    """

    reference: str = "step"
    duration: float = 5.0
    n_samples: int = 350
    step_amplitude: float = 1.0
    circle_radius: float = 1.0
    warmup_samples: int = 0
    actuation_lag: float = 0.15
    disturbance_std: float = 0.3
    accel_limit: float = 3.0
    cross_coupling: float = 0.5
    gravity: float = 9.81
    rate_limit: float = 0.5
    rmse_limit: float = 0.2

    def __post_init__(self):
        if self.reference not in ("step", "circle"):
            raise ValueError(f"unknown reference: {self.reference!r}")
        if self.duration <= 0 or self.n_samples < 2:
            raise ValueError("need a positive horizon with at least 2 samples")
        if self.warmup_samples < 0:
            raise ValueError("warmup_samples must be non-negative")
        if self.actuation_lag < 0 or self.disturbance_std < 0:
            raise ValueError("lag and disturbance must be non-negative")
        if self.accel_limit is not None and self.accel_limit <= 0:
            raise ValueError("accel_limit must be positive when set")

    @property
    def dt(self):
        return self.duration / self.n_samples


@dataclass(frozen=True)
class EvaluationResult:
    """Outcome of one simulated experiment."""

    performance: float
    constraints: tuple
    cost: float
    max_rate: float
    unstable: bool = False
    trajectory: np.ndarray = None

    @property
    def values(self):
        """Observation vector: performance first, then constraints."""
        return np.array([self.performance, *self.constraints])


# Starting controller parameters (tau, zeta) for the tuning experiments.
INITIAL_PARAMETERS = (0.9, 0.8)

DEFAULT_PLANT = PlantSpec()


def _reference(plant, speed, k, dt):
    """Reference position and velocity (2-vector each) at sample k."""
    t = k * dt
    if plant.reference == "step":
        return (
            np.array([plant.step_amplitude, 0.0]),
            np.zeros(2),
        )
    omega = speed / plant.circle_radius
    c, s = math.cos(omega * t), math.sin(omega * t)
    r = plant.circle_radius
    return (
        np.array([r * c, r * s]),
        np.array([-r * omega * s, r * omega * c]),
    )


def _guarded_tilt(plant, tilt, k, dt, speed):
    """Tilt components whose rate the safety constraint watches."""
    if plant.reference == "step":
        # Motion is commanded along the first axis; the guarded rate is
        # the cross-axis tilt, which perfect tracking keeps at zero.
        return tilt[1:]
    # Circle: rotate into the heading frame (the vehicle points at the
    # center); steady circular tracking then holds the tilt constant.
    phi = (speed / plant.circle_radius) * (k * dt)
    c, s = math.cos(phi), math.sin(phi)
    return np.array([c * tilt[0] + s * tilt[1], -s * tilt[0] + c * tilt[1]])


def _simulate(plant, a, rng, speed=0.0, keep_trajectory=False):
    tau, zeta = float(a[0]), float(a[1])
    if tau <= 0 or zeta <= 0:
        raise ValueError("tau and zeta must be positive")
    dt = plant.dt
    n = plant.n_samples
    warmup = plant.warmup_samples
    if plant.reference == "circle":
        # Start on the reference with the centripetal acceleration already
        # applied; the warmup window lets the loop settle into its true
        # steady orbit before cost and rate are scored.
        ref0, dref0 = _reference(plant, speed, 0, dt)
        pos, vel = ref0.copy(), dref0.copy()
        applied = np.array([-(speed**2) / plant.circle_radius, 0.0])
    else:
        pos, vel = np.zeros(2), np.zeros(2)
        applied = np.zeros(2)
    guarded_prev = _guarded_tilt(plant, applied / plant.gravity, 0, dt, speed)
    sq_err = 0.0
    max_rate = 0.0
    traj = np.empty((n, 2)) if keep_trajectory else None
    total = warmup + n
    noise = (
        rng.standard_normal((total, 2)) * plant.disturbance_std
        if rng is not None and plant.disturbance_std > 0
        else None
    )
    unstable = False
    for k in range(total):
        ref_pos, ref_vel = _reference(plant, speed, k, dt)
        err = ref_pos - pos
        cmd = err / tau**2 + (2.0 * zeta / tau) * (ref_vel - vel)
        if plant.accel_limit is not None:
            cmd = np.clip(cmd, -plant.accel_limit, plant.accel_limit)
        if plant.actuation_lag > 0:
            applied = applied + (dt / plant.actuation_lag) * (cmd - applied)
        else:
            applied = cmd
        tilt = applied / plant.gravity
        guarded = _guarded_tilt(plant, tilt, k, dt, speed)
        scored = k >= warmup
        if scored:
            max_rate = max(
                max_rate, float(np.max(np.abs(guarded - guarded_prev))) / dt
            )
        guarded_prev = guarded
        accel = applied.copy()
        accel[1] += plant.cross_coupling * applied[0]
        if noise is not None:
            accel += noise[k]
        pos = pos + dt * vel
        vel = vel + dt * accel
        if scored:
            sq_err += float(err @ err)
            if keep_trajectory:
                traj[k - warmup] = pos
        if not np.all(np.isfinite(pos)) or np.max(np.abs(pos)) > _BLOWUP_LIMIT:
            unstable = True
            break
    if unstable:
        # Saturated worst case: finite, deterministic, clearly terrible.
        ref_scale = plant.step_amplitude if plant.reference == "step" else (
            plant.circle_radius
        )
        return 10.0 * ref_scale, 10.0 / dt, True, traj
    cost = math.sqrt(sq_err) / math.sqrt(n)
    return cost, max_rate, False, traj


@lru_cache(maxsize=None)
def baseline_cost(plant, speed=0.0):
    """Noise-free cost of the initial parameters; the tuning reference."""
    cost, _, _, _ = _simulate(plant, INITIAL_PARAMETERS, None, speed=speed)
    return cost


def _performance(cost, ref_cost, sign_convention):
    if sign_convention == "improvement":
        return 0.75 * ref_cost - cost
    if sign_convention == "cost_delta":
        return cost - 0.75 * ref_cost
    raise ValueError(f"unknown sign convention: {sign_convention!r}")


def simulate_step(plant, a, rng=None, sign_convention="improvement",
                  keep_trajectory=False):
    """
    Simulate the step-reference tuning experiment at parameters ``a``.

    Pass a ``numpy.random.Generator`` for a noisy rollout or None for the
    deterministic one. Performance is the cost measured against 75% of
    the initial parameters' cost; the default ``"improvement"`` sign
    convention makes lower cost score higher (``"cost_delta"`` gives the
    raw difference instead). One constraint: the commanded-tilt-rate
    margin.

    Diverging rollouts return a saturated, finite worst case flagged
    ``unstable`` instead of raising.
    """
    if plant.reference != "step":
        raise ValueError("plant is not configured for the step reference")
    cost, max_rate, unstable, traj = _simulate(
        plant, a, rng, keep_trajectory=keep_trajectory
    )
    perf = _performance(cost, baseline_cost(plant), sign_convention)
    return EvaluationResult(
        performance=perf,
        constraints=(plant.rate_limit - max_rate,),
        cost=cost,
        max_rate=max_rate,
        unstable=unstable,
        trajectory=traj,
    )


def simulate_circle(plant, a, speed, rng=None, sign_convention="improvement",
                    reference_speed=1.0, keep_trajectory=False):
    """
    Simulate circular tracking at the given speed (the context variable).

    Two constraints: the tracking-error margin ``rmse_limit - cost`` and
    the tilt-rate margin. The performance reference is the initial
    parameters' noise-free cost at ``reference_speed`` so that
    performance values are comparable across contexts.
    """
    if plant.reference != "circle":
        raise ValueError("plant is not configured for the circle reference")
    cost, max_rate, unstable, traj = _simulate(
        plant, a, rng, speed=speed, keep_trajectory=keep_trajectory
    )
    perf = _performance(
        cost, baseline_cost(plant, reference_speed), sign_convention
    )
    return EvaluationResult(
        performance=perf,
        constraints=(plant.rmse_limit - cost, plant.rate_limit - max_rate),
        cost=cost,
        max_rate=max_rate,
        unstable=unstable,
        trajectory=traj,
    )


class PlantEvaluator:
    """
    Sequential noisy evaluator for optimizer runs on the plant.

    Observations combine two noise sources: the plant's process
    disturbance during the rollout and additive measurement noise per
    output (position-sensing and timing scatter folded into the recorded
    cost and peak rate). Each call uses a fresh child stream from the
    root seed, so a run's k-th evaluation is reproducible regardless of
    which parameters earlier iterations chose.

    For the circle reference the evaluator receives (tau, zeta, speed)
    vectors — the trailing coordinate is the context.
    """

    def __init__(self, plant, root_seed, sign_convention="improvement",
                 reference_speed=1.0, measurement_noise=None):
        self.plant = plant
        self.sign_convention = sign_convention
        self.reference_speed = reference_speed
        if measurement_noise is None:
            ref_cost = baseline_cost(
                plant, reference_speed if plant.reference == "circle" else 0.0
            )
            measurement_noise = (0.045 * ref_cost,) + (0.08,) * (
                self.n_outputs - 1
            )
        self.measurement_noise = tuple(float(s) for s in measurement_noise)
        if len(self.measurement_noise) != self.n_outputs:
            raise ValueError("need one measurement-noise level per output")
        self._seq = np.random.SeedSequence(root_seed)
        self._count = 0

    @property
    def n_outputs(self):
        return 2 if self.plant.reference == "step" else 3

    def _evaluate(self, point, rng):
        if self.plant.reference == "step":
            return simulate_step(
                self.plant, point[:2], rng, self.sign_convention
            )
        return simulate_circle(
            self.plant,
            point[:2],
            float(point[2]),
            rng,
            self.sign_convention,
            reference_speed=self.reference_speed,
        )

    def __call__(self, point):
        child = np.random.SeedSequence(
            entropy=self._seq.entropy, spawn_key=(self._count,)
        )
        self._count += 1
        rng = np.random.default_rng(child)
        result = self._evaluate(point, rng)
        jitter = rng.standard_normal(self.n_outputs) * np.asarray(
            self.measurement_noise
        )
        return result.values + jitter

    def true_values(self, point):
        """Noise-free output values at ``point``."""
        return self._evaluate(point, None).values

    def violation_check(self):
        def check(point):
            return bool(np.any(self.true_values(point)[1:] < 0.0))

        return check
