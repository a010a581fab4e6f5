"""Tests for the safe optimization loop and its set computations."""

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from safetune import bench, oracle, safeopt
from safetune.gp_core import MATERN32, KernelSpec, SurrogateGP, SurrogateKernelSpec
from safetune.safeopt import (
    GP_DIRECT,
    LIPSCHITZ,
    AlgoConfig,
    BetaSchedule,
    ConfidenceState,
    NoCandidatesError,
    ParameterDomain,
    SafeOptMC,
    best_estimate,
    expanders,
    gp_ucb_select,
    maximizers,
    run_gp_ucb,
    safe_set,
    select_next,
    update_confidence,
)

# Frozen from a direct evaluation of 2*log(|I| * |A| * pi_n / delta) with
# |I|=2, |A|=100, delta=0.05 and pi_n = n^2 pi^2 / 6.
LEMMA1_BETA_N1 = 17.583499885145546
LEMMA1_BETA_N2 = 20.356088607385328


def state_from(lower, upper, **kw):
    return ConfidenceState(
        np.asarray(lower, dtype=float), np.asarray(upper, dtype=float), **kw
    )


def toy_instance(seed=0, n=50, lengthscale=0.25, noise=0.02):
    spec = SurrogateKernelSpec(
        (
            KernelSpec(MATERN32, 1.0, (lengthscale,)),
            KernelSpec(MATERN32, 1.0, (lengthscale,)),
        ),
        (noise, noise),
    )
    pts = np.linspace(0.0, 1.0, n)[:, None]
    return bench.sample_safety_instance(seed, spec, pts)


class TestBetaSchedule:
    def test_constant_mode(self):
        sched = BetaSchedule(mode="constant", beta_sqrt=2.0)
        for n in (1, 5, 100):
            assert sched.beta(n, 100, 2) == 4.0

    def test_lemma1_value(self):
        sched = BetaSchedule(mode="lemma1", delta=0.05)
        assert sched.beta(1, 100, 2) == pytest.approx(LEMMA1_BETA_N1, abs=1e-12)
        assert sched.beta(2, 100, 2) == pytest.approx(LEMMA1_BETA_N2, abs=1e-12)

    def test_lemma1_monotone(self):
        sched = BetaSchedule(mode="lemma1", delta=0.05)
        values = [sched.beta(n, 50, 3) for n in range(1, 30)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_finite_horizon_rule(self):
        sched = BetaSchedule(
            mode="lemma1", delta=0.1, pi_rule="finite_horizon", t_max=40
        )
        expected = 2.0 * np.log(2 * 100 * 40 / 0.1)
        assert sched.beta(1, 100, 2) == pytest.approx(expected, rel=1e-12)
        assert sched.beta(17, 100, 2) == sched.beta(1, 100, 2)

    def test_invalid_delta(self):
        with pytest.raises(ValueError, match="delta"):
            BetaSchedule(mode="lemma1", delta=1.5)
        with pytest.raises(ValueError, match="delta"):
            BetaSchedule(mode="lemma1", delta=None)

    def test_iterations_one_based(self):
        with pytest.raises(ValueError, match="1-based"):
            BetaSchedule().beta(0, 10, 2)


class TestUpdateConfidence:
    def test_intersection_with_seed_prior(self):
        state = ConfidenceState.initial(1, 1, [True])
        new = update_confidence(
            state, np.array([[1.0]]), np.array([[0.5]]), 1.0, LIPSCHITZ
        )
        assert new.lower[0, 0] == 0.5
        assert new.upper[0, 0] == 1.5

    def test_plain_intersection(self):
        state = state_from([[0.0]], [[2.0]])
        new = update_confidence(
            state, np.array([[2.0]]), np.array([[1.0]]), 1.0, LIPSCHITZ
        )
        assert (new.lower[0, 0], new.upper[0, 0]) == (1.0, 2.0)

    def test_gp_direct_ignores_history(self):
        state = state_from([[0.0]], [[2.0]])
        new = update_confidence(
            state, np.array([[5.0]]), np.array([[1.0]]), 4.0, GP_DIRECT
        )
        assert (new.lower[0, 0], new.upper[0, 0]) == (3.0, 7.0)

    def test_empty_intersection_collapses_and_counts(self):
        state = state_from([[0.0]], [[1.0]])
        new = update_confidence(
            state, np.array([[5.0]]), np.array([[1.0]]), 1.0, LIPSCHITZ
        )
        # old [0, 1] against [4, 6]: crossed bounds collapse to midpoint.
        assert new.misspec_events == 1
        assert new.lower[0, 0] == new.upper[0, 0] == 2.5

    def test_contained_property(self):
        rng = np.random.default_rng(0)
        state = ConfidenceState.initial(20, 2, rng.random(20) < 0.3)
        events = 0
        for _ in range(10):
            mean = rng.standard_normal((20, 2))
            std = rng.uniform(0.1, 2.0, (20, 2))
            scale = np.sqrt(4.0)
            crossed = np.maximum(state.lower, mean - scale * std) > np.minimum(
                state.upper, mean + scale * std
            )
            events += int(crossed.sum())
            new = update_confidence(state, mean, std, 4.0, LIPSCHITZ)
            # Containment holds everywhere the intersection was non-empty;
            # crossed entries collapse (and are counted) instead.
            assert np.all(new.lower[~crossed] >= state.lower[~crossed])
            assert np.all(new.upper[~crossed] <= state.upper[~crossed])
            assert np.all(new.lower <= new.upper)
            assert new.misspec_events == events
            state = new


class TestSafeSet:
    def test_lipschitz_neighbor_within_margin(self):
        # l1(a1) = 0.5, L = 1, neighbor at 0.4 qualifies; at 0.6 it does not.
        pts = np.array([[0.0], [0.4], [0.6]])
        dists = cdist(pts, pts)
        state = state_from(
            [[0.0, 0.5], [0.0, -1.0], [0.0, -1.0]],
            [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]],
        )
        seed = np.array([True, False, False])
        out = safe_set(state, seed, seed, dists, 1.0, LIPSCHITZ)
        assert out.tolist() == [True, True, False]

    def test_gp_direct_definition(self):
        state = state_from(
            [[0.0, 0.2], [0.0, -0.1], [9.0, 0.0]],
            [[1.0, 1.0], [1.0, 1.0], [9.5, 1.0]],
        )
        seed = np.array([False, True, False])
        out = safe_set(state, seed, seed, None, 1.0, GP_DIRECT)
        # first point certified by bounds, second by seed, third boundary.
        assert out.tolist() == [True, True, True]

    def test_seed_always_retained(self):
        state = state_from([[0.0, -5.0]], [[1.0, -4.0]])
        seed = np.array([True])
        for mode in (LIPSCHITZ, GP_DIRECT):
            assert safe_set(state, seed, seed, np.zeros((1, 1)), 1.0, mode)[0]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(42)
        for trial in range(20):
            m = int(rng.integers(5, 60))
            pts = np.sort(rng.uniform(0, 1, m))[:, None]
            dists = cdist(pts, pts)
            lower = rng.standard_normal((m, 3))
            upper = lower + rng.uniform(0, 2, (m, 3))
            state = state_from(lower, upper)
            seed = np.zeros(m, dtype=bool)
            seed[rng.integers(0, m)] = True
            prev = seed | (rng.random(m) < 0.3)
            lips = float(rng.uniform(0.5, 5.0))
            mode = LIPSCHITZ if trial % 2 == 0 else GP_DIRECT
            fast = safe_set(state, seed, prev, dists, lips, mode)
            slow = oracle.exhaustive_safe_set(lower, seed, prev, dists, lips, mode)
            assert np.array_equal(fast, slow)


class TestMaximizers:
    def test_upper_bound_must_reach_best_lower(self):
        state = state_from(
            [[0.6, 0.0], [0.1, 0.0]], [[0.9, 0.0], [0.5, 0.0]]
        )
        safe = np.array([True, True])
        out = maximizers(state, safe)
        assert out.tolist() == [True, False]

    def test_identical_intervals_select_everything(self):
        state = state_from([[0.2, 0.0]] * 4, [[0.8, 0.0]] * 4)
        safe = np.ones(4, dtype=bool)
        assert maximizers(state, safe).tolist() == [True] * 4

    def test_best_lower_point_always_member(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = int(rng.integers(2, 40))
            lower = rng.standard_normal((m, 1))
            state = state_from(lower, lower + rng.uniform(0, 2, (m, 1)))
            safe = rng.random(m) < 0.5
            safe[rng.integers(0, m)] = True
            out = maximizers(state, safe)
            best = np.argmax(np.where(safe, state.lower[:, 0], -np.inf))
            assert out[best]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            m = int(rng.integers(2, 50))
            lower = rng.standard_normal((m, 2))
            state = state_from(lower, lower + rng.uniform(0, 2, (m, 2)))
            safe = rng.random(m) < 0.4
            safe[rng.integers(0, m)] = True
            fast = maximizers(state, safe)
            slow = oracle.exhaustive_maximizers(
                state.lower[:, 0], state.upper[:, 0], safe
            )
            assert np.array_equal(fast, slow)


class TestExpanders:
    def test_everything_safe_means_no_expanders(self):
        state = state_from([[0.0, 0.5]] * 3, [[1.0, 1.5]] * 3)
        safe = np.ones(3, dtype=bool)
        mask, counts = expanders(state, safe, np.zeros((3, 3)), 1.0)
        assert not mask.any()
        assert counts.tolist() == [0, 0, 0]

    def test_single_reachable_outside_point(self):
        pts = np.array([[0.0], [0.9]])
        dists = cdist(pts, pts)
        state = state_from(
            [[0.0, 0.0], [0.0, -2.0]], [[1.0, 1.0], [1.0, -1.0]]
        )
        safe = np.array([True, False])
        mask, counts = expanders(state, safe, dists, 1.0)
        assert mask.tolist() == [True, False]
        assert counts.tolist() == [1, 0]

    def test_out_of_reach_outside_point(self):
        pts = np.array([[0.0], [1.1]])
        dists = cdist(pts, pts)
        state = state_from(
            [[0.0, 0.0], [0.0, -2.0]], [[1.0, 1.0], [1.0, -1.0]]
        )
        safe = np.array([True, False])
        mask, counts = expanders(state, safe, dists, 1.0)
        assert not mask.any()

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            m = int(rng.integers(3, 50))
            pts = rng.uniform(0, 1, (m, 2))
            dists = cdist(pts, pts)
            lower = rng.standard_normal((m, 3))
            state = state_from(lower, lower + rng.uniform(0, 2, (m, 3)))
            safe = rng.random(m) < 0.5
            safe[rng.integers(0, m)] = True
            lips = rng.uniform(0.5, 4.0, size=2)
            fast_mask, fast_counts = expanders(state, safe, dists, lips)
            slow_mask, slow_counts = oracle.exhaustive_expanders(
                state.upper, safe, dists, lips
            )
            assert np.array_equal(fast_mask, slow_mask)
            assert np.array_equal(fast_counts, slow_counts)


class TestSelectNext:
    def test_single_candidate(self):
        state = state_from([[0.0, 0.0], [0.0, 0.0]], [[0.1, 0.1], [9.0, 9.0]])
        candidates = np.array([True, False])
        idx, out, width = select_next(state, candidates)
        assert (idx, out) == (0, 0)

    def test_argmax_across_outputs(self):
        state = state_from(
            [[0.0, 0.0], [0.0, 0.0]], [[0.4, 0.1], [0.2, 0.7]]
        )
        candidates = np.array([True, True])
        idx, out, width = select_next(state, candidates)
        assert (idx, out) == (1, 1)
        assert width == pytest.approx(0.7)

    def test_per_output_scaling_flips_choice(self):
        # Raw widths (0.8, 0.3); prior stds (2, 0.5) scale them to
        # (0.4, 0.6), so the constraint output wins.
        state = state_from([[0.0, 0.0]], [[0.8, 0.3]])
        candidates = np.array([True])
        idx, out, width = select_next(
            state, candidates, scaling=np.array([2.0, 0.5])
        )
        assert (idx, out) == (0, 1)
        assert width == pytest.approx(0.6)
        idx2, out2, _ = select_next(state, candidates, scaling=None)
        assert (idx2, out2) == (0, 0)

    def test_tie_break_domain_then_output(self):
        state = state_from([[0.0, 0.0], [0.0, 0.0]], [[0.5, 0.5], [0.5, 0.5]])
        candidates = np.array([True, True])
        assert select_next(state, candidates)[:2] == (0, 0)

    def test_no_candidates_raises(self):
        state = state_from([[0.0, 0.0]], [[1.0, 1.0]])
        with pytest.raises(NoCandidatesError):
            select_next(state, np.array([False]))


class TestBestEstimate:
    def test_argmax_lower_bound(self):
        state = state_from(
            [[0.1, 0], [0.9, 0], [0.3, 0]], [[1, 0], [1, 0], [1, 0]]
        )
        assert best_estimate(state, np.ones(3, dtype=bool)) == 1

    def test_tie_breaks_to_first(self):
        state = state_from([[0.5, 0]] * 3, [[1, 0]] * 3)
        assert best_estimate(state, np.ones(3, dtype=bool)) == 0

    def test_restricted_to_safe(self):
        state = state_from(
            [[0.1, 0], [0.9, 0], [0.3, 0]], [[1, 0], [1, 0], [1, 0]]
        )
        assert best_estimate(state, np.array([True, False, True])) == 2


def make_optimizer(instance, config=None, seed=0):
    model = SurrogateGP(instance.spec)
    domain = ParameterDomain(instance.points)
    if config is None:
        config = AlgoConfig(
            mode=LIPSCHITZ,
            lipschitz=instance.lipschitz,
            epsilon=0.1,
            beta=BetaSchedule(mode="lemma1", delta=0.05),
            seed=seed,
        )
    return SafeOptMC(model, domain, instance.safe_seed_indices, config)


class TestSafeOptLoop:
    def test_first_selection_is_a_seed(self):
        inst = toy_instance(seed=1)
        opt = make_optimizer(inst)
        proposal = opt.propose()
        assert proposal.point_index in inst.safe_seed_indices
        assert proposal.sets.safe[proposal.point_index]

    def test_selection_always_inside_safe_set(self):
        inst = toy_instance(seed=2)
        opt = make_optimizer(inst)
        evaluator = inst.evaluator(noise_seed=2)
        for _ in range(10):
            proposal = opt.propose()
            assert proposal.sets.safe[proposal.point_index]
            opt.observe(evaluator(inst.points[proposal.point_index]))

    def test_candidates_contained_in_safe(self):
        inst = toy_instance(seed=3)
        opt = make_optimizer(inst)
        evaluator = inst.evaluator(noise_seed=3)
        for _ in range(10):
            proposal = opt.propose()
            sets = proposal.sets
            assert np.all(sets.safe[sets.maximizers])
            assert np.all(sets.safe[sets.expanders])
            opt.observe(evaluator(inst.points[proposal.point_index]))

    def test_monotone_safe_set_in_lipschitz_mode(self):
        inst = toy_instance(seed=4)
        opt = make_optimizer(inst)
        evaluator = inst.evaluator(noise_seed=4)
        prev = opt.safe.copy()
        for _ in range(12):
            entry = opt.step(evaluator)
            assert np.all(opt.safe[prev]), "safe set lost a member"
            prev = opt.safe.copy()
        assert opt.safe_set_shrank == 0

    def test_trace_length_and_fields(self):
        inst = toy_instance(seed=5)
        opt = make_optimizer(inst)
        trace = opt.run(inst.evaluator(noise_seed=5), max_iterations=7)
        assert len(trace) == 7
        assert trace.stop_reason == "max_iterations"
        entry = trace.entries[-1]
        assert entry.iteration == 7
        assert len(entry.observations) == 2
        assert entry.n_safe >= 1

    def test_width_stopping_contract(self):
        inst = toy_instance(seed=6)
        opt = make_optimizer(inst)
        tol = 1.0
        trace = opt.run(
            inst.evaluator(noise_seed=6), max_iterations=60, width_tol=tol
        )
        assert trace.stop_reason == "width_converged"
        assert all(e.width >= tol for e in trace.entries)
        # the proposal that triggered the stop is below tolerance
        assert opt.propose().width < tol

    def test_deterministic_runs(self):
        inst = toy_instance(seed=7)
        t1 = make_optimizer(inst).run(inst.evaluator(noise_seed=7), 10)
        t2 = make_optimizer(inst).run(inst.evaluator(noise_seed=7), 10)
        assert t1.entries == t2.entries

    def test_step_records_violation_flag(self):
        inst = toy_instance(seed=8)
        opt = make_optimizer(inst)
        entry = opt.step(
            inst.evaluator(noise_seed=8), violation_check=inst.violation_check()
        )
        assert entry.violation is False

    def test_gp_direct_mode_runs(self):
        inst = toy_instance(seed=9)
        config = AlgoConfig(
            mode=GP_DIRECT,
            lipschitz=inst.lipschitz,
            beta=BetaSchedule(mode="constant", beta_sqrt=2.0),
        )
        opt = make_optimizer(inst, config=config)
        trace = opt.run(inst.evaluator(noise_seed=9), max_iterations=10)
        assert len(trace) == 10
        assert np.all(opt.safe[list(inst.safe_seed_indices)])

    def test_needs_at_least_one_seed(self):
        inst = toy_instance(seed=10)
        model = SurrogateGP(inst.spec)
        domain = ParameterDomain(inst.points)
        with pytest.raises(ValueError, match="safe point"):
            SafeOptMC(model, domain, [], AlgoConfig())


class TestGpUcb:
    def test_prior_tie_breaks_to_first_point(self):
        inst = toy_instance(seed=11)
        model = SurrogateGP(inst.spec)
        domain = ParameterDomain(inst.points)
        assert gp_ucb_select(model, 4.0, domain) == 0

    def test_strong_observation_attracts_selection(self):
        inst = toy_instance(seed=12)
        model = SurrogateGP(inst.spec)
        domain = ParameterDomain(inst.points)
        k = 25
        model = model.condition(inst.points[k], 0, 5.0)
        pick = gp_ucb_select(model, 4.0, domain)
        # the chosen point is in the neighborhood of the big observation
        assert abs(inst.points[pick, 0] - inst.points[k, 0]) < 0.15

    def test_run_gp_ucb_counts_violations(self):
        inst = toy_instance(seed=13)
        model = SurrogateGP(inst.spec)
        domain = ParameterDomain(inst.points)
        sched = BetaSchedule(mode="lemma1", delta=0.05)
        _, chosen, flags = run_gp_ucb(
            model,
            domain,
            inst.evaluator(noise_seed=13),
            sched,
            10,
            violation_check=inst.violation_check(),
        )
        assert len(chosen) == len(flags) == 10
        assert all(isinstance(f, bool) for f in flags)


class TestParameterDomain:
    def test_unique_points_enforced(self):
        with pytest.raises(ValueError, match="unique"):
            ParameterDomain(np.array([[0.0], [0.0]]))

    def test_metric_weights_scale_distances(self):
        dom = ParameterDomain(
            np.array([[0.0, 0.0], [1.0, 2.0]]), metric_weights=(1.0, 2.0)
        )
        d = dom.distances()
        assert d[0, 1] == pytest.approx(np.sqrt(2.0))
