"""Survival exponents and harmonic profiles of cones.

Survival probabilities of killed paths decay like a power of time whose
exponent, divided into the stability index, is the homogeneity degree of
the cone's harmonic function.  This module estimates that degree from
log-log survival slopes, reconstructs the angular harmonic profile from
small-radius survival runs, and checks the martingale property of a given
profile by optional stopping on ball exits.

Ground truths used in tests: the half space has degree alpha/2 with
profile cos(eta)^(alpha/2), and the punctured space has degree 0 with a
constant profile.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geometry import ConeSpec
from .rng import RngStream, as_stream
from .stable import StableParams, killed_min_radius, killed_steps, run_until_ball_exit
from .stats import PowerLawFit, loglog_fit

NORMALIZATION_RADIUS = 0.4


@dataclass
class SurvivalCurve:
    """Monte Carlo survival probabilities of one start point."""

    start: np.ndarray
    times: np.ndarray
    p_hat: np.ndarray
    se: np.ndarray
    h: float
    N: int
    alpha: float

    def to_csv(self, filename: str) -> None:
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "p_hat", "se"])
            for t, p, s in zip(self.times, self.p_hat, self.se):
                writer.writerow([repr(float(t)), repr(float(p)), repr(float(s))])

    def to_dict(self) -> dict:
        return {
            "start": [float(c) for c in self.start],
            "times": [float(t) for t in self.times],
            "p_hat": [float(p) for p in self.p_hat],
            "se": [float(s) for s in self.se],
            "h": self.h,
            "N": self.N,
            "alpha": self.alpha,
        }


@dataclass
class BetaEstimate:
    beta_hat: float
    se: float
    window: tuple[float, float]
    fit: PowerLawFit

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "se": self.se,
            "window": list(self.window),
            "fit": self.fit.to_dict(),
        }


@dataclass
class HarmonicEstimate:
    """Angular harmonic profile on a colatitude grid, with its degree.

    The profile is normalized to 1 at the axis direction, so the full
    function is (|x| / 0.4)^beta_hat * profile(colatitude): exactly 1 at
    the normalization point 0.4 * axis.
    """

    cone: ConeSpec
    beta_hat: float
    beta_se: float
    angles: np.ndarray
    values: np.ndarray
    se: np.ndarray
    C_hat: float
    t_ref: float
    r_small: float

    def angular_profile(self):
        """Vectorized colatitude -> profile value, interpolating the grid.

        Pads with a flat node at the axis and a zero at the cone boundary;
        constant 1 for the punctured space.
        """
        if self.cone.kind == "punctured":
            return lambda eta: np.ones_like(np.asarray(eta, dtype=float))
        psi = self.cone.half_angle
        if self.angles[0] > 0.0:
            grid = np.concatenate([[0.0], self.angles, [psi]])
            vals = np.concatenate([[self.values[0]], self.values, [0.0]])
        else:
            grid = np.concatenate([self.angles, [psi]])
            vals = np.concatenate([self.values, [0.0]])
        return lambda eta: np.interp(eta, grid, vals)

    def as_function(self):
        """Vectorized x -> M̂(x), zero outside the cone."""
        if self.cone.kind == "punctured":
            beta = self.beta_hat

            def m_punctured(xs):
                xs = np.asarray(xs, dtype=float)
                single = xs.ndim == 1
                xs = np.atleast_2d(xs)
                r = np.linalg.norm(xs, axis=1)
                out = np.where(r > 0, (r / NORMALIZATION_RADIUS) ** beta, 0.0)
                return float(out[0]) if single else out

            return m_punctured
        profile = self.angular_profile()
        beta = self.beta_hat
        cone = self.cone

        def m_hat(xs):
            xs = np.asarray(xs, dtype=float)
            single = xs.ndim == 1
            xs = np.atleast_2d(xs)
            r = np.linalg.norm(xs, axis=1)
            out = np.zeros(xs.shape[0])
            ok = cone.contains_many(xs)
            if ok.any():
                eta = cone.angle_from_axis(xs[ok])
                out[ok] = (r[ok] / NORMALIZATION_RADIUS) ** beta * profile(eta)
            return float(out[0]) if single else out

        return m_hat

    def to_csv(self, filename: str) -> None:
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["angle", "value", "se"])
            for a, v, s in zip(self.angles, self.values, self.se):
                writer.writerow([repr(float(a)), repr(float(v)), repr(float(s))])

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "beta_se": self.beta_se,
            "angles": [float(a) for a in self.angles],
            "values": [float(v) for v in self.values],
            "se": [float(s) for s in self.se],
            "C_hat": self.C_hat,
            "t_ref": self.t_ref,
            "r_small": self.r_small,
        }


@dataclass
class ExactHarmonic:
    """Closed-form harmonic function |x|^beta * profile(colatitude)."""

    cone: ConeSpec
    beta: float
    profile: object  # vectorized colatitude -> angular value

    def __call__(self, xs):
        xs = np.asarray(xs, dtype=float)
        single = xs.ndim == 1
        xs = np.atleast_2d(xs)
        out = np.zeros(xs.shape[0])
        ok = self.cone.contains_many(xs)
        if ok.any():
            r = np.linalg.norm(xs[ok], axis=1)
            if self.cone.kind == "punctured":
                ang = np.ones(int(ok.sum()))
            else:
                ang = np.asarray(self.profile(self.cone.angle_from_axis(xs[ok])))
            out[ok] = r**self.beta * ang
        return float(out[0]) if single else out


def half_space_harmonic(alpha: float, d: int, axis=None) -> ExactHarmonic:
    """Height to the power alpha/2: the half-space harmonic function."""
    from .geometry import halfspace

    cone = halfspace(d, axis)
    return ExactHarmonic(cone, alpha / 2.0, lambda eta: np.cos(eta) ** (alpha / 2.0))


def punctured_harmonic(d: int) -> ExactHarmonic:
    """Constant 1: no killing, degree zero."""
    from .geometry import punctured_space

    return ExactHarmonic(punctured_space(d), 0.0, lambda eta: np.ones_like(eta))


def estimate_survival(
    params: StableParams,
    cone: ConeSpec,
    x,
    times,
    N: int,
    h: float,
    rng: RngStream | int,
    threads: int = 1,
) -> SurvivalCurve:
    """Survival probabilities P_x(kill time > t) on a grid of times."""
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("need at least one time")
    if np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise ValueError("times must be positive and increasing")
    if N <= 0:
        raise ValueError("need a positive sample count")
    steps = np.maximum(np.rint(times / h).astype(np.int64), 1)
    kill = killed_steps(params, cone, x, int(steps[-1]), h, rng, N, threads)
    p_hat = np.empty(times.size)
    se = np.empty(times.size)
    for i, s in enumerate(steps):
        alive = (kill < 0) | (kill > s)
        p = float(alive.mean())
        p_hat[i] = p
        se[i] = math.sqrt(max(p * (1.0 - p), 1e-300) / N)
    return SurvivalCurve(x, times, p_hat, se, h, N, params.alpha)


def default_fit_window(curve: SurvivalCurve, min_count: float = 100.0) -> np.ndarray:
    """Boolean mask of fit-worthy times: enough survivors for a stable log."""
    return curve.p_hat * curve.N > min_count


def estimate_beta(curve: SurvivalCurve, fit_window=None) -> BetaEstimate:
    """Decay degree from the log-log survival slope: beta = -alpha * slope.

    ``fit_window`` is either a (t_lo, t_hi) pair or a boolean mask over the
    curve's times; by default every time with more than 100 survivors is
    used.
    """
    if fit_window is None:
        mask = default_fit_window(curve)
    elif isinstance(fit_window, tuple) and len(fit_window) == 2:
        mask = (curve.times >= fit_window[0]) & (curve.times <= fit_window[1])
    else:
        mask = np.asarray(fit_window, dtype=bool)
    if int(mask.sum()) < 3:
        raise ValueError("fit window keeps fewer than 3 points")
    t = curve.times[mask]
    p = curve.p_hat[mask]
    if np.any(p <= 0):
        raise ValueError("fit window includes zero survival")
    s = curve.se[mask]
    if np.all(p >= 1.0):
        # no decay at all (nothing is ever killed): slope is exactly zero
        fit = PowerLawFit(0.0, 0.0, 0.0)
        return BetaEstimate(0.0, 0.0, (float(t[0]), float(t[-1])), fit)
    fit = loglog_fit(t, p, ses=np.maximum(s, 1e-12))
    beta_hat = -curve.alpha * fit.slope
    return BetaEstimate(
        beta_hat, curve.alpha * fit.slope_se, (float(t[0]), float(t[-1])), fit
    )


def _direction_at_angle(cone: ConeSpec, eta: float) -> np.ndarray:
    """Unit vector at colatitude eta from the cone axis."""
    axis = np.asarray(cone.axis.components, dtype=float)
    d = axis.size
    probe = np.zeros(d)
    probe[0] = 1.0
    if abs(float(axis @ probe)) > 0.9:
        probe = np.zeros(d)
        probe[1] = 1.0
    perp = probe - (probe @ axis) * axis
    perp /= np.linalg.norm(perp)
    return math.cos(eta) * axis + math.sin(eta) * perp


def estimate_harmonic(
    params: StableParams,
    cone: ConeSpec,
    t_ref: float,
    angular_grid,
    r_small: float,
    N: int,
    rng: RngStream | int,
    h: float | None = None,
    beta: float | None = None,
    threads: int = 1,
) -> HarmonicEstimate:
    """Angular harmonic profile from survival at a small start radius.

    Far inside the self-similar window the survival probability from
    r_small * theta factorizes through the harmonic function, so the
    profile over grid directions is the survival vector normalized by its
    value on the axis.  ``beta`` overrides the decay degree when it is
    known exactly; otherwise it is fitted from an axis survival curve.
    """
    if r_small <= 0:
        raise ValueError("r_small must be positive")
    if r_small**params.alpha > 0.1 * t_ref:
        raise ValueError(
            "t_ref too small for the asymptotic regime: need "
            "r_small^alpha <= t_ref / 10"
        )
    if h is None:
        h = t_ref / 256.0
    stream = as_stream(rng)

    if cone.kind == "punctured":
        angles = np.array([0.0])
        return HarmonicEstimate(
            cone, 0.0, 0.0, angles, np.array([1.0]), np.array([0.0]),
            1.0, t_ref, r_small,
        )

    angles = np.asarray(angular_grid, dtype=float)
    if angles.size == 0 or np.any(angles < 0) or np.any(angles >= cone.half_angle):
        raise ValueError("angular grid must lie inside [0, half_angle)")
    if np.any(np.diff(angles) <= 0):
        raise ValueError("angular grid must be strictly increasing")

    n_steps = max(int(round(t_ref / h)), 1)
    # survival from the axis anchors the normalization (and beta if needed)
    if beta is None:
        times = t_ref * np.array([0.25, 0.5, 1.0, 2.0, 4.0])
        axis_curve = estimate_survival(
            params, cone, r_small * _direction_at_angle(cone, 0.0), times,
            N, h, stream.child(0), threads,
        )
        est = estimate_beta(axis_curve)
        beta_hat, beta_se = est.beta_hat, est.se
        i_ref = int(np.argmin(np.abs(times - t_ref)))
        p_axis, se_axis = axis_curve.p_hat[i_ref], axis_curve.se[i_ref]
    else:
        beta_hat, beta_se = float(beta), 0.0
        kill = killed_steps(
            params, cone, r_small * _direction_at_angle(cone, 0.0),
            n_steps, h, stream.child(0), N, threads,
        )
        p_axis = float((kill < 0).mean())
        se_axis = math.sqrt(max(p_axis * (1 - p_axis), 1e-300) / N)
    if p_axis <= 0:
        raise ValueError("no survivors from the axis start; increase N or h")

    values = np.empty(angles.size)
    ses = np.empty(angles.size)
    for i, eta in enumerate(angles):
        if eta == 0.0:
            # the axis run is the normalization anchor: exactly 1 by gauge
            values[i] = 1.0
            ses[i] = 0.0
            continue
        x = r_small * _direction_at_angle(cone, float(eta))
        kill = killed_steps(params, cone, x, n_steps, h, stream.child(i + 1), N, threads)
        p = float((kill < 0).mean())
        se_p = math.sqrt(max(p * (1 - p), 1e-300) / N)
        values[i] = p / p_axis
        rel = (se_p / p if p > 0 else 0.0) ** 2 + (se_axis / p_axis) ** 2
        ses[i] = values[i] * math.sqrt(rel) if p > 0 else se_p / p_axis

    # survival ~ C * M(x) * t^(-beta/alpha) with M(r_small axis) known from
    # the normalization gauge
    m_at_start = (r_small / NORMALIZATION_RADIUS) ** beta_hat
    c_hat = p_axis * t_ref ** (beta_hat / params.alpha) / m_at_start
    return HarmonicEstimate(
        cone, beta_hat, beta_se, angles, values, ses, c_hat, t_ref, r_small
    )


def verify_harmonicity(
    m_fn,
    params: StableParams,
    cone: ConeSpec,
    x,
    center,
    radius: float,
    N: int,
    h: float,
    rng: RngStream | int,
    max_steps: int | None = None,
    threads: int = 1,
) -> tuple[float, float]:
    """Martingale residual E[M(X at ball exit, killed outside)] - M(x).

    Paths stop at the first grid point outside the ball or the cone; the
    harmonic function must vanish outside the cone, so killed paths drop
    out automatically.  Censored paths contribute their current value,
    which keeps the optional-stopping identity exact at every budget.
    """
    x = np.asarray(x, dtype=float)
    center = np.asarray(center, dtype=float)
    if np.linalg.norm(x - center) >= radius:
        raise ValueError("start point must lie inside the ball")
    if max_steps is None:
        max_steps = int(round(64.0 * radius**params.alpha / h))
    stop_pos, _ = run_until_ball_exit(
        params, cone, x, center, radius, h, rng, N, max_steps, threads
    )
    vals = np.asarray(m_fn(stop_pos), dtype=float)
    m0 = float(m_fn(x))
    residual = float(vals.mean()) - m0
    se = float(vals.std(ddof=1) / math.sqrt(N))
    return residual, se


@dataclass
class SmallBallHitting:
    radii: np.ndarray
    p_hat: np.ndarray
    se: np.ndarray
    fit: PowerLawFit

    def to_dict(self) -> dict:
        return {
            "radii": [float(a) for a in self.radii],
            "p_hat": [float(p) for p in self.p_hat],
            "se": [float(s) for s in self.se],
            "fit": self.fit.to_dict(),
        }


def estimate_smallball_hitting(
    params: StableParams,
    cone: ConeSpec,
    x,
    radii,
    N: int,
    h: float,
    rng: RngStream | int,
    horizon: float | None = None,
    threads: int = 1,
) -> SmallBallHitting:
    """Probability of entering each small ball at the apex before leaving
    the cone, with a power-law fit of the radius dependence.

    Entries are detected at grid times only, so a visit shorter than the
    step goes unseen and the fitted exponent picks up an upward bias.
    Keep a^alpha well above h for every radius a.
    """
    x = np.asarray(x, dtype=float)
    radii = np.asarray(sorted(float(a) for a in radii))
    r0 = float(np.linalg.norm(x))
    if np.any(radii >= r0) or np.any(radii <= 0):
        raise ValueError("ball radii must lie strictly between 0 and |x|")
    if horizon is None:
        horizon = 256.0 * r0**params.alpha
    n_steps = max(int(round(horizon / h)), 1)
    min_r, _ = killed_min_radius(params, cone, x, n_steps, h, rng, N, threads)
    p_hat = np.array([float((min_r < a).mean()) for a in radii])
    se = np.sqrt(np.maximum(p_hat * (1 - p_hat), 1e-300) / N)
    keep = p_hat > 0
    if int(keep.sum()) < 2:
        raise ValueError("not enough hits to fit an exponent; increase N")
    fit = loglog_fit(radii[keep], p_hat[keep], ses=np.maximum(se[keep], 1e-12))
    return SmallBallHitting(radii, p_hat, se, fit)
