import json
import math

import numpy as np
import pytest
from scipy import integrate, special

from conestable.geometry import circular_cone, halfspace, punctured_space
from conestable.rng import RngStream
from conestable.stable import (
    WOS_APEX_STALL,
    WOS_EXITED,
    WOS_MAX_STEPS,
    ApexStallError,
    MaxStepsError,
    PathGrid,
    StableParams,
    c_alpha,
    killed_min_radius,
    killed_paths_full,
    killed_positions_at,
    load_paths_csv,
    run_until_ball_exit,
    sample_ball_exit,
    sample_isotropic_increment,
    sample_positive_stable,
    save_manifest,
    save_paths_csv,
    simulate_killed_path,
    walk_on_spheres_exit,
    walk_on_spheres_exit_many,
)
from conestable.stats import ks_two_sample, permutation_correlation_test

SEED = 77001


def stream(*ids):
    return RngStream(SEED).child(*ids)


class TestPositiveStable:
    def test_laplace_transform_half(self):
        # E[exp(-W)] = exp(-1^0.5) = 1/e for index 1/2
        w = sample_positive_stable(0.5, stream(0), 100_000)
        vals = np.exp(-w)
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - math.exp(-1.0)) < 4 * se

    def test_laplace_transform_three_quarters(self):
        # E[exp(-2 W)] = exp(-2^0.75) for index 3/4
        w = sample_positive_stable(0.75, stream(1), 100_000)
        vals = np.exp(-2.0 * w)
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - math.exp(-(2.0**0.75))) < 4 * se

    def test_half_index_closed_form(self):
        # index 1/2 has the closed form W = 1 / (2 Z^2), Z standard normal
        w = sample_positive_stable(0.5, stream(2), 30_000)
        z = stream(3).generator().standard_normal(30_000)
        ref = 1.0 / (2.0 * z * z)
        rep = ks_two_sample(w, ref)
        assert rep.p_value > 0.01

    def test_positivity(self):
        w = sample_positive_stable(0.9, stream(4), 1_000_000)
        assert np.all(w > 0)
        assert np.all(np.isfinite(w))

    def test_scalar_mode(self):
        w = sample_positive_stable(0.5, stream(5))
        assert isinstance(w, float)
        assert w > 0

    def test_index_validated(self):
        with pytest.raises(ValueError):
            sample_positive_stable(1.0, stream(6))
        with pytest.raises(ValueError):
            sample_positive_stable(0.0, stream(6))


class TestIsotropicIncrement:
    def test_characteristic_function_alpha_15(self):
        params = StableParams(alpha=1.5, d=2)
        x = sample_isotropic_increment(params, 1.0, stream(10), 100_000)
        vals = np.cos(x[:, 0])
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - math.exp(-1.0)) < 4 * se
        # isotropy: the imaginary part vanishes
        ims = np.sin(x[:, 0])
        se_im = ims.std(ddof=1) / math.sqrt(ims.size)
        assert abs(ims.mean()) < 4 * se_im

    def test_characteristic_function_alpha_08(self):
        params = StableParams(alpha=0.8, d=3)
        t, k = 0.7, 1.3
        x = sample_isotropic_increment(params, t, stream(11), 100_000)
        vals = np.cos(k * x[:, 2])
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - math.exp(-t * k**0.8)) < 4 * se

    def test_zero_window(self):
        params = StableParams(alpha=1.2, d=2)
        x = sample_isotropic_increment(params, 0.0, stream(12), 8)
        assert x.shape == (8, 2)
        assert np.all(x == 0.0)

    def test_negative_window_raises(self):
        params = StableParams(alpha=1.2, d=2)
        with pytest.raises(ValueError):
            sample_isotropic_increment(params, -1.0, stream(13))

    def test_scaling_relation(self):
        # |X_{ct}| has the law of c^(1/alpha) |X_t|
        params = StableParams(alpha=1.5, d=2)
        c = 2.0
        a = np.linalg.norm(
            sample_isotropic_increment(params, c * 1.0, stream(14), 50_000), axis=1
        )
        b = c ** (1 / 1.5) * np.linalg.norm(
            sample_isotropic_increment(params, 1.0, stream(15), 50_000), axis=1
        )
        assert ks_two_sample(a, b).p_value > 0.01

    def test_angle_isotropy(self):
        params = StableParams(alpha=1.1, d=2)
        x = sample_isotropic_increment(params, 1.0, stream(16), 100_000)
        angles = np.arctan2(x[:, 1], x[:, 0])
        counts, _ = np.histogram(angles, bins=16, range=(-math.pi, math.pi))
        from scipy import stats as sps

        _, p = sps.chisquare(counts)
        assert p > 0.01

    def test_disjoint_windows_independent(self):
        params = StableParams(alpha=1.5, d=2)
        gen = stream(17).generator()
        a = sample_isotropic_increment(params, 1.0, gen, 1000)
        b = sample_isotropic_increment(params, 1.0, gen, 1000)
        _, p = permutation_correlation_test(
            np.log(np.linalg.norm(a, axis=1)),
            np.log(np.linalg.norm(b, axis=1)),
            stream(18),
        )
        assert p > 0.01

    def test_params_validated(self):
        with pytest.raises(ValueError):
            StableParams(alpha=2.0, d=2)
        with pytest.raises(ValueError):
            StableParams(alpha=1.0, d=1)


class TestJumpKernelConstant:
    def test_matches_gamma_expression(self):
        for alpha, d in ((0.7, 2), (1.5, 2), (1.2, 3)):
            expected = (
                2.0**alpha
                * math.gamma((d + alpha) / 2)
                / (math.pi ** (d / 2) * abs(math.gamma(-alpha / 2)))
            )
            assert c_alpha(alpha, d) == pytest.approx(expected, rel=1e-12)
            assert c_alpha(alpha, d) > 0

    def test_small_time_tail_probability(self):
        # P(|X_t| > 1) ~ t * nu(|z| > 1) as t -> 0, and the tail mass of
        # c |z|^(-d-alpha) outside the unit ball is c * (2 pi / alpha) in
        # d = 2; this checks the constant against the sampler itself
        params = StableParams(alpha=1.5, d=2)
        t = 2e-3
        n = 1_000_000
        z = sample_isotropic_increment(params, t, RngStream(4151), n)
        frac = (np.linalg.norm(z, axis=1) > 1.0).mean()
        want = t * c_alpha(1.5, 2) * 2 * math.pi / 1.5
        se = math.sqrt(frac * (1 - frac) / n)
        assert abs(frac - want) < 4 * se + 0.02 * want


class TestKilledGrid:
    def test_punctured_space_never_kills(self):
        params = StableParams(alpha=1.5, d=2)
        cone = punctured_space(2)
        _, kill = killed_positions_at(
            params, cone, [1.0, 0.0], [16], h=2**-4, rng=stream(20), n=1000
        )
        assert np.all(kill == -1)

    def test_kill_fraction_decreases_with_height(self):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        fracs = []
        for i, height in enumerate((0.5, 1.0, 2.0)):
            _, kill = killed_positions_at(
                params, cone, [0.0, height], [64], h=2**-6, rng=stream(21, i), n=4000
            )
            fracs.append(np.mean(kill >= 0))
        assert fracs[0] > fracs[1] > fracs[2]

    def test_kill_row_is_outside(self):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        bundle = killed_paths_full(
            params, cone, [0.0, 0.5], 32, h=2**-5, rng=stream(22), n=500
        )
        for i in range(len(bundle)):
            ks = bundle.kill_step[i]
            if ks < 0:
                continue
            pg = bundle.path(i)
            assert len(pg) == ks + 1
            assert not cone.contains(pg.positions[-1])
            assert cone.contains_many(pg.positions[:-1]).all()

    def test_frozen_after_kill(self):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        bundle = killed_paths_full(
            params, cone, [0.0, 0.5], 32, h=2**-5, rng=stream(23), n=200
        )
        killed = np.flatnonzero(bundle.kill_step >= 0)
        for i in killed[:20]:
            ks = bundle.kill_step[i]
            tail = bundle.positions[i, ks:]
            assert np.all(tail == tail[0])

    def test_step_zero_record(self):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        pos, _ = killed_positions_at(
            params, cone, [0.3, 1.0], [0, 4], h=2**-4, rng=stream(24), n=50
        )
        assert np.all(pos[:, 0, :] == [0.3, 1.0])

    def test_start_outside_raises(self):
        params = StableParams(alpha=1.5, d=2)
        with pytest.raises(ValueError):
            killed_positions_at(
                params, halfspace(2), [0.0, -1.0], [4], h=0.25, rng=stream(25), n=10
            )

    def test_reproducible_across_threads(self):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        a = killed_positions_at(
            params, cone, [0.0, 1.0], [32], h=2**-5, rng=stream(26), n=2000, threads=1
        )
        b = killed_positions_at(
            params, cone, [0.0, 1.0], [32], h=2**-5, rng=stream(26), n=2000, threads=4
        )
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_bitwise_reproducible(self):
        params = StableParams(alpha=1.1, d=3)
        cone = circular_cone(3, math.pi / 4)
        x0 = [0.0, 0.0, 1.0]
        p1 = simulate_killed_path(params, cone, x0, 2.0, 2**-4, stream(27))
        p2 = simulate_killed_path(params, cone, x0, 2.0, 2**-4, stream(27))
        np.testing.assert_array_equal(p1.positions, p2.positions)
        assert p1.kill_step == p2.kill_step

    def test_min_radius_bookkeeping(self):
        params = StableParams(alpha=1.5, d=2)
        cone = punctured_space(2)
        min_r, killed = killed_min_radius(
            params, cone, [1.0, 0.0], 64, h=2**-6, rng=stream(28), n=500
        )
        assert not killed.any()
        assert np.all(min_r <= 1.0)
        assert np.all(min_r >= 0.0)

    def test_ball_exit_run_stops_outside(self):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        x0 = np.array([0.0, 1.0])
        pos, step = run_until_ball_exit(
            params, cone, x0, x0, 0.5, h=2**-6, rng=stream(29), n=500, max_steps=4000
        )
        done = step < 4000
        assert done.mean() > 0.95
        outside_ball = np.linalg.norm(pos[done] - x0, axis=1) >= 0.5
        outside_cone = ~cone.contains_many(pos[done])
        assert np.all(outside_ball | outside_cone)
        censored = ~done
        if censored.any():
            assert np.all(np.linalg.norm(pos[censored] - x0, axis=1) < 0.5)


class TestBallExit:
    def test_always_outside_unit_ball(self):
        params = StableParams(alpha=1.5, d=2)
        y = sample_ball_exit(params, [0.0, 0.0], stream(30), 100_000)
        assert np.all(np.linalg.norm(y, axis=1) > 1.0)

    def test_center_radius_tail_oracle(self):
        # from the center the radial density is (r^2-1)^(-a/2) / r;
        # P(R > 2) comes from direct quadrature of that expression
        alpha = 1.5
        params = StableParams(alpha=alpha, d=2)

        def f0(r):
            return (r * r - 1.0) ** (-alpha / 2) / r

        num, _ = integrate.quad(f0, 2.0, np.inf)
        den_a, _ = integrate.quad(f0, 1.0, 2.0)
        den_b, _ = integrate.quad(f0, 2.0, np.inf)
        target = num / (den_a + den_b)
        y = sample_ball_exit(params, [0.0, 0.0], stream(31), 200_000)
        p_hat = np.mean(np.linalg.norm(y, axis=1) > 2.0)
        se = math.sqrt(target * (1 - target) / 200_000)
        assert abs(p_hat - target) < 4 * se + 1e-4

    def test_center_tail_oracle_dimension_free(self):
        # the radial marginal from the center is the same in every dimension
        alpha = 0.9
        for d in (2, 3):
            params = StableParams(alpha=alpha, d=d)

            def f0(r):
                return (r * r - 1.0) ** (-alpha / 2) / r

            num, _ = integrate.quad(f0, 3.0, np.inf)
            den_a, _ = integrate.quad(f0, 1.0, 3.0)
            target = num / (den_a + num)
            y = sample_ball_exit(params, np.zeros(d), stream(32, d), 100_000)
            p_hat = np.mean(np.linalg.norm(y, axis=1) > 3.0)
            se = math.sqrt(target * (1 - target) / 100_000)
            assert abs(p_hat - target) < 4 * se + 1e-4

    def test_center_angle_isotropy(self):
        params = StableParams(alpha=1.2, d=2)
        y = sample_ball_exit(params, [0.0, 0.0], stream(33), 50_000)
        angles = np.arctan2(y[:, 1], y[:, 0])
        counts, _ = np.histogram(angles, bins=16, range=(-math.pi, math.pi))
        from scipy import stats as sps

        _, p = sps.chisquare(counts)
        assert p > 0.01

    def test_offcenter_halfplane_mass_oracle(self):
        # P(y_1 > 1) for a start at (0.3, 0): nested quadrature of the exit
        # density over the polar region r > 1, |phi| < arccos(1/r)
        alpha, rho = 1.2, 0.3
        params = StableParams(alpha=alpha, d=2)

        def inner(r, up):
            val, _ = integrate.quad(
                lambda a: 1.0 / (r * r + rho * rho - 2 * r * rho * math.cos(a)),
                0.0,
                up,
            )
            return 2.0 * val

        def radial(r, restricted):
            up = math.acos(min(1.0, 1.0 / r)) if restricted else math.pi
            return (r * r - 1.0) ** (-alpha / 2) * r * inner(r, up)

        num = sum(
            integrate.quad(lambda r: radial(r, True), lo, hi, limit=200)[0]
            for lo, hi in ((1.0, 2.0), (2.0, np.inf))
        )
        den = sum(
            integrate.quad(lambda r: radial(r, False), lo, hi, limit=200)[0]
            for lo, hi in ((1.0, 2.0), (2.0, np.inf))
        )
        target = num / den
        y = sample_ball_exit(params, [rho, 0.0], stream(34), 200_000)
        p_hat = np.mean(y[:, 0] > 1.0)
        se = math.sqrt(target * (1 - target) / 200_000)
        assert abs(p_hat - target) < 4 * se + 3e-4

    def test_offcenter_matches_center_as_rho_vanishes(self):
        params = StableParams(alpha=1.5, d=2)
        r_tab = np.linalg.norm(
            sample_ball_exit(params, [1e-6, 0.0], stream(35), 30_000), axis=1
        )
        r_exact = np.linalg.norm(
            sample_ball_exit(params, [0.0, 0.0], stream(36), 30_000), axis=1
        )
        assert ks_two_sample(r_tab, r_exact).p_value > 0.01

    def test_start_on_sphere_raises(self):
        params = StableParams(alpha=1.5, d=2)
        with pytest.raises(ValueError):
            sample_ball_exit(params, [1.0, 0.0], stream(37))


class TestWalkOnSpheres:
    def test_exit_points_leave_cone(self):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        pts, status, steps = walk_on_spheres_exit_many(
            params, cone, [0.0, 1.0], 1e-8, 5000, stream(40), 2000
        )
        exited = status == WOS_EXITED
        assert exited.mean() > 0.99
        assert np.all(pts[exited, 1] <= 0.0)
        assert np.all(steps[exited] >= 1)

    def test_circular_cone_exit(self):
        params = StableParams(alpha=1.2, d=3)
        cone = circular_cone(3, math.pi / 4)
        pts, status, _ = walk_on_spheres_exit_many(
            params, cone, [0.0, 0.0, 1.0], 1e-8, 5000, stream(41), 1000
        )
        exited = status == WOS_EXITED
        assert exited.mean() > 0.99
        assert not cone.contains_many(pts[exited]).any()

    def test_apex_stall_raises(self):
        params = StableParams(alpha=1.5, d=2)
        cone = circular_cone(2, math.pi / 4)
        x0 = 0.1 * np.array([math.sin(0.1), math.cos(0.1)])
        with pytest.raises(ApexStallError):
            walk_on_spheres_exit(params, cone, x0, delta_min=0.5, max_steps=100,
                                 rng=stream(42))

    def test_max_steps_raises(self):
        params = StableParams(alpha=1.5, d=2)
        cone = punctured_space(2)  # exit requires hitting the origin exactly
        with pytest.raises(MaxStepsError):
            walk_on_spheres_exit(params, cone, [1.0, 0.0], delta_min=1e-12,
                                 max_steps=5, rng=stream(43))

    def test_status_codes_distinct(self):
        assert len({WOS_EXITED, WOS_APEX_STALL, WOS_MAX_STEPS}) == 3

    def test_halfspace_overshoot_law(self):
        # the height coordinate is a one-dimensional symmetric stable
        # process, so the exit depth U below the hyperplane from height 1
        # satisfies U/(1+U) ~ Beta(1-alpha/2, alpha/2); the walk on spheres
        # must reproduce that law exactly
        alpha = 1.5
        params = StableParams(alpha=alpha, d=2)
        cone = halfspace(2)
        pts, status, _ = walk_on_spheres_exit_many(
            params, cone, [0.0, 1.0], 1e-9, 10_000, stream(44), 10_000
        )
        depth = -pts[status == WOS_EXITED, 1]

        def cdf(u):
            u = np.asarray(u, dtype=float)
            return special.betainc(1 - alpha / 2, alpha / 2, u / (1 + u))

        from scipy import stats as sps

        res = sps.kstest(depth, cdf)
        assert res.pvalue > 0.01

    def test_grid_overshoot_approaches_exit_law(self):
        # grid kill positions are recorded one step late, which thins the
        # small-overshoot mass; the distortion must shrink as h does
        alpha = 1.5
        params = StableParams(alpha=alpha, d=2)
        cone = halfspace(2)

        def cdf(u):
            u = np.asarray(u, dtype=float)
            return special.betainc(1 - alpha / 2, alpha / 2, u / (1 + u))

        from scipy import stats as sps

        ks_stats = []
        for i, h_exp in enumerate((2, 8)):
            h = 2.0**-h_exp
            pos, kill = killed_positions_at(
                params, cone, [0.0, 1.0], [int(256 / h)], h=h,
                rng=stream(45, i), n=4000,
            )
            depth = -pos[kill >= 0, 0, 1]
            ks_stats.append(sps.kstest(depth, cdf).statistic)
        assert ks_stats[1] < ks_stats[0] - 0.05


class TestPersistence:
    def test_csv_round_trip(self, tmp_path):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        bundle = killed_paths_full(
            params, cone, [0.0, 1.0], 32, h=2**-4, rng=stream(50), n=5
        )
        fn = str(tmp_path / "paths.csv")
        save_paths_csv(bundle, fn)
        loaded = load_paths_csv(fn)
        assert len(loaded) == 5
        for i, pg in enumerate(loaded):
            ref = bundle.path(i)
            assert pg.h == pytest.approx(ref.h)
            np.testing.assert_array_equal(pg.positions, ref.positions)
            assert (pg.kill_step is None) == (ref.kill_step is None)
            if pg.kill_step is not None:
                assert pg.kill_step == ref.kill_step

    def test_single_path_round_trip(self, tmp_path):
        params = StableParams(alpha=1.1, d=3)
        cone = circular_cone(3, math.pi / 3)
        pg = simulate_killed_path(params, cone, [0.0, 0.0, 1.0], 1.0, 2**-5, stream(51))
        fn = str(tmp_path / "one.csv")
        save_paths_csv(pg, fn)
        loaded = load_paths_csv(fn)
        assert len(loaded) == 1
        np.testing.assert_array_equal(loaded[0].positions, pg.positions)

    def test_csv_byte_identical_same_seed(self, tmp_path):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        files = []
        for tag in ("a", "b"):
            bundle = killed_paths_full(
                params, cone, [0.0, 1.0], 16, h=2**-4, rng=stream(52), n=3
            )
            fn = tmp_path / f"{tag}.csv"
            save_paths_csv(bundle, str(fn))
            files.append(fn.read_bytes())
        assert files[0] == files[1]

    def test_manifest_fields(self, tmp_path):
        params = StableParams(alpha=1.5, d=2)
        cone = halfspace(2)
        fn = str(tmp_path / "manifest.json")
        save_manifest(fn, params, cone, seed=9, h=0.25, extra={"n": 100})
        with open(fn) as fh:
            doc = json.load(fh)
        assert doc["params"] == {"alpha": 1.5, "d": 2}
        assert doc["cone"]["kind"] == "halfspace"
        assert doc["seed"] == 9
        assert doc["h"] == 0.25
        assert doc["n"] == 100

    def test_path_grid_times(self):
        pg = PathGrid(0.25, np.zeros((5, 2)), None)
        np.testing.assert_allclose(pg.times(), [0, 0.25, 0.5, 0.75, 1.0])
