"""Acceptance suite: twelve end-to-end checks at pinned tolerances.

Each test prints one PASS/FAIL line so the suite doubles as a report.
"""

import math
import time

import numpy as np

from wflow.fields import (
    barycentric_field,
    eval_on_measure,
    lambda_transform,
    linear_field,
    profile,
    pw_functional,
    total_dissipativity_check,
)
from wflow.flows import (
    ImplicitScheme,
    contraction_check,
    empirical_sampler,
    evi_residual,
    evolve,
    jko_step,
    mean_field_study,
)
from wflow.measures import Coupling, DiscreteMeasure, LagrangianVector, interpolate
from wflow.operators import (
    LagrangianOperator,
    exponential_semigroup,
    minimal_selection_estimate,
)
from wflow.transport import (
    geodesic_decompose,
    perturb_for_injectivity,
    verify_injectivity_family,
    w2_bruteforce,
    w2_exact,
)


def _report(number, ok, detail):
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {number}: {detail}"


def _random_measure(rng, denominator, dim):
    n_atoms = int(rng.integers(1, denominator + 1))
    mults = np.ones(n_atoms, dtype=np.int64)
    for _ in range(denominator - n_atoms):
        mults[int(rng.integers(n_atoms))] += 1
    return DiscreteMeasure(rng.normal(size=(n_atoms, dim)), mults)


def test_criterion_01_exact_distance_matches_enumeration():
    # 500 random pairs, dims 1-3, common denominator <= 7, agreement 1e-12
    rng = np.random.default_rng(101)
    denominators = [
        (a, b) for a in range(1, 8) for b in range(1, 8) if math.lcm(a, b) <= 7
    ]
    start = time.perf_counter()
    worst = 0.0
    for k in range(500):
        dim = 1 + k % 3
        da, db = denominators[int(rng.integers(len(denominators)))]
        mu = _random_measure(rng, da, dim)
        nu = _random_measure(rng, db, dim)
        fast = w2_exact(mu, nu).distance
        brute = w2_bruteforce(mu, nu)
        worst = max(worst, abs(fast - brute) / max(1.0, brute))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 10.0
    _report(1, ok, f"worst relative gap {worst:.3e} over 500 pairs in {elapsed:.2f}s")


def test_criterion_02_resolvent_power_error_rate():
    # n-fold resolvent of f(x) = -x at t=1: error <= 2/sqrt(n), slope ~ -1
    op = LagrangianOperator.from_velocity_field(linear_field(-np.eye(1), np.zeros(1)))
    x0 = LagrangianVector(np.array([[1.0]]))
    ns = [4, 16, 64, 256]
    errors = []
    ok = True
    for n in ns:
        value = float(exponential_semigroup(op, 1.0, x0, n).particles[0, 0])
        closed = (1.0 + 1.0 / n) ** (-n)
        ok = ok and abs(value - closed) <= 1e-9
        err = abs(value - math.exp(-1.0))
        errors.append(err)
        ok = ok and err <= 2.0 / math.sqrt(n)
    slope = float(np.polyfit(np.log(ns), np.log(errors), 1)[0])
    ok = ok and -1.2 <= slope <= -0.8
    _report(2, ok, f"errors {['%.2e' % e for e in errors]}, log-log slope {slope:.3f}")


def test_criterion_03_implicit_step_measure_error_bound():
    # attractive pairwise quadratic energy on (1/2)(d_0 + d_2): closed form 1 -+ e^{-t}
    phi = pw_functional(profile("zero"), profile("quadratic"))
    mu0 = DiscreteMeasure.from_points(np.array([[0.0], [2.0]]))
    speed0 = eval_on_measure(phi.subgradient_field, mu0).l2_norm
    horizon = 1.0
    exact = DiscreteMeasure.from_points(
        np.array([[1.0 - math.exp(-horizon)], [1.0 + math.exp(-horizon)]])
    )
    start = time.perf_counter()
    ok = True
    details = []
    for n in (4, 16, 64):
        flow = evolve(phi, mu0, ImplicitScheme(horizon / n), T=horizon, record_times=[horizon])
        err = w2_exact(flow.measures[-1], exact).distance
        bound = 2.0 * horizon * speed0 / math.sqrt(n)
        ok = ok and err <= bound
        details.append(f"n={n}: {err:.2e}<={bound:.2e}")
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 5.0
    _report(3, ok, f"{'; '.join(details)}; runtime {elapsed:.2f}s")


def test_criterion_04_contraction_under_barycentric_attraction():
    field = barycentric_field(1.0, np.zeros(2))
    rng = np.random.default_rng(104)
    worst = 0.0
    for _ in range(50):
        mu = DiscreteMeasure.from_points(rng.normal(size=(2, 2)))
        nu = DiscreteMeasure.from_points(rng.normal(size=(2, 2)))
        ratios = contraction_check(field, mu, nu, 0.0, [0.5, 1.0, 2.0], ImplicitScheme(1e-3))
        worst = max(worst, max(ratios))
    ok = worst <= 1.0 + 1e-3
    _report(4, ok, f"worst distance ratio {worst:.6f} over 50 pairs at t in {{0.5, 1, 2}}")


def test_criterion_05_sticky_collision_time_and_persistence():
    phi = pw_functional(profile("zero"), profile("abs"))
    mu0 = DiscreteMeasure.from_points(np.array([[-1.0], [1.0]]))
    flow = evolve(phi, mu0, ImplicitScheme(1e-3), T=3.0, merge_eps=1e-6)
    cards = [m.support_cardinality for m in flow.measures]
    drop = next((k for k, c in enumerate(cards) if c == 1), None)
    if drop is None:
        _report(5, False, "support never dropped to one atom")
        return
    t_drop = flow.times[drop]
    ok = 1.95 <= t_drop <= 2.05 and all(c == 1 for c in cards[drop:])
    _report(5, ok, f"support drops 2->1 at t={t_drop:.3f} and stays merged through t=3")


def test_criterion_06_dissipativity_verifier_and_transform():
    attract = barycentric_field(1.0, np.zeros(2))
    expand_field = linear_field(np.eye(2), np.zeros(2))
    shifted = lambda_transform(expand_field, 1.0)
    rng = np.random.default_rng(106)
    worst_attract = -math.inf
    all_ok = True
    for _ in range(100):
        card = int(rng.integers(1, 7))
        a = DiscreteMeasure.from_points(rng.normal(size=(card, 2)))
        b = DiscreteMeasure.from_points(rng.normal(size=(card, 2)))
        rep = total_dissipativity_check(attract, a, b, 0.0)
        worst_attract = max(worst_attract, rep.worst_gap)
        all_ok = all_ok and rep.passes and rep.worst_gap <= 1e-9
        rep_bad = total_dissipativity_check(expand_field, a, b, 0.0)
        all_ok = all_ok and (not rep_bad.passes) and rep_bad.witness is not None
        # shifting the field by -x moves the dissipativity level by exactly one
        rep_one = total_dissipativity_check(expand_field, a, b, 1.0)
        rep_shift = total_dissipativity_check(shifted, a, b, 0.0)
        all_ok = all_ok and abs(rep_one.worst_gap - rep_shift.worst_gap) <= 1e-9
    _report(6, all_ok, f"attraction worst gap {worst_attract:.2e}; expansion refuted with witnesses")


def test_criterion_07_yosida_norms_monotone_and_convergent():
    grid = [2.0**-k for k in range(1, 7)]
    rng = np.random.default_rng(107)
    ok = True
    details = []
    linear_op = LagrangianOperator.from_velocity_field(linear_field(-np.eye(1), np.zeros(1)))
    quartic_op = LagrangianOperator.from_functional(
        pw_functional(profile("zero"), profile("quartic", 1.0))
    )
    # small positions keep the quartic's curvature mild at the coarsest step
    states = [
        (linear_op, LagrangianVector(rng.normal(size=(3, 1)))),
        (quartic_op, LagrangianVector(np.array([[-0.1], [0.15]]))),
    ]
    for op, x in states:
        est = minimal_selection_estimate(op, x, grid)
        monotone = all(b >= a - 1e-8 for a, b in zip(est.norms, est.norms[1:]))
        gap = abs(est.limit_norm - op.apply(x).norm())
        ok = ok and monotone and gap <= 1e-3
        details.append(f"limit gap {gap:.2e}")
    _report(7, ok, f"corrected norms nondecreasing on both fields; {', '.join(details)}")


def _crossing_coupling():
    mu = DiscreteMeasure.from_points(np.array([[0.0, 0.0], [1.0, 1.0]]))
    nu = DiscreteMeasure.from_points(np.array([[1.0, -1.0], [2.0, 0.0]]))
    mass = np.zeros((2, 2), dtype=int)
    for i, atom in enumerate(mu.atoms):
        j = 1 if np.allclose(atom, [0.0, 0.0]) else 0
        mass[i, j] = 1
    return Coupling(mu, nu, mass)


def test_criterion_08_geodesic_segmentation():
    gamma = _crossing_coupling()
    breakpoints = geodesic_decompose(gamma)
    segments = len(breakpoints) - 1
    ok = segments >= 2
    speed = math.sqrt(gamma.cost())
    for k in range(segments):
        lo, hi = breakpoints[k], breakpoints[k + 1]
        base = interpolate(gamma, lo)
        for frac in (0.25, 0.5, 0.75, 1.0):
            t = lo + frac * (hi - lo)
            dist = w2_exact(base, interpolate(gamma, t)).distance
            ok = ok and abs(dist - speed * (t - lo)) <= 1e-6 * speed
    rng = np.random.default_rng(108)
    single = True
    for _ in range(50):
        dim = int(rng.integers(1, 4))
        mu = _random_measure(rng, int(rng.integers(1, 7)), dim)
        nu = _random_measure(rng, int(rng.integers(1, 7)), dim)
        bps = geodesic_decompose(w2_exact(mu, nu).plan)
        single = single and bps == [0.0, 1.0]
    ok = ok and single
    _report(8, ok, f"crossing plan splits into {segments} constant-speed segments; optimal plans stay whole")


def test_criterion_09_minimizing_movement_matches_resolvent():
    phi = pw_functional(profile("quadratic"), profile("quadratic", 0.5))
    rng = np.random.default_rng(109)
    beats = True
    for _ in range(20):
        card = int(rng.integers(2, 5))
        mu = DiscreteMeasure.from_points(rng.normal(size=(card, 2)))
        tau = float(rng.uniform(0.05, 0.4))
        out = jko_step(phi, mu, tau)

        def objective(nu):
            return w2_exact(mu, nu).distance ** 2 / (2.0 * tau) + phi.phi(nu)

        base = objective(out)
        for _ in range(100):
            competitor = DiscreteMeasure(
                mu.atoms + rng.normal(scale=0.3, size=mu.atoms.shape), mu.multiplicities
            )
            beats = beats and base <= objective(competitor) + 1e-9

    quad = pw_functional(profile("quadratic"), profile("zero"))
    worst_prox = 0.0
    for _ in range(5):
        mu = DiscreteMeasure.from_points(rng.normal(size=(3, 2)))
        tau = float(rng.uniform(0.05, 0.5))
        out = jko_step(quad, mu, tau)
        worst_prox = max(worst_prox, float(np.max(np.abs(out.atoms - mu.atoms / (1.0 + tau)))))
    ok = beats and worst_prox <= 1e-8
    _report(9, ok, f"beats 100 competitors on 20 instances; prox mismatch {worst_prox:.2e}")


def test_criterion_10_evi_residual_bound():
    phi = pw_functional(profile("quadratic"), profile("quadratic"))
    mu0 = DiscreteMeasure.from_points(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]]))
    tau, dt = 1e-3, 1e-2
    horizon = 0.2
    record = [k * dt for k in range(int(round(horizon / dt)) + 1)]
    flow = evolve(phi, mu0, ImplicitScheme(tau), T=horizon, record_times=record)
    lam = phi.subgradient_field.lambda_claim
    rng = np.random.default_rng(110)
    ok = True
    worst_margin = -math.inf
    for _ in range(50):
        card = int(rng.integers(1, 4))
        nu = DiscreteMeasure.from_points(rng.normal(size=(card, 2)))
        rep = evi_residual(flow, phi.subgradient_field, lam, nu)
        bound = 5.0 * (tau + dt**2) * (1.0 + nu.second_moment() + mu0.second_moment())
        margin = max(rep.residuals) - bound
        worst_margin = max(worst_margin, margin)
        ok = ok and margin <= 0.0
    _report(10, ok, f"50 comparison measures, worst residual-minus-bound {worst_margin:.2e}")


def test_criterion_11_injectivity_perturbation():
    ok = True
    for seed in range(100):
        rng = np.random.default_rng(5000 + seed)
        a = rng.normal(size=(int(rng.integers(2, 11)), 2))
        b = rng.normal(size=(int(rng.integers(2, 11)), 2))
        b_prime = perturb_for_injectivity(a, b, 1e-3, seed)
        ok = ok and verify_injectivity_family(a, b, b_prime)
        ok = ok and float(np.max(np.linalg.norm(b_prime - b, axis=1))) < 1e-3
    _report(11, ok, "100 seeded instances produce verified safe perturbations within radius")


def test_criterion_12_mean_field_transfer():
    field = barycentric_field(1.0, np.zeros(2))
    mu0 = DiscreteMeasure.from_points(
        np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    )
    ok = True
    worst_excess = -math.inf
    for seed in range(20):
        sampler = empirical_sampler(mu0, 1200 + seed)
        rows = mean_field_study(
            field, mu0, sampler, [8, 16, 32], t=1.0, lam=0.0,
            scheme=ImplicitScheme(1e-2), slack=1e-6,
        )
        for row in rows:
            worst_excess = max(worst_excess, row.final_error - row.bound)
            ok = ok and row.passes
    _report(12, ok, f"60 sampled flows, worst final-error excess over bound {worst_excess:.2e}")
