"""Radial log-clock view of the stable process and its ladder structure.

Writing a path as X_t = |X_0| * exp(xi) * Theta on the clock that ticks
at speed |X|^(-alpha) turns the cone problem into a real-valued additive
part xi (log radius) modulated by a direction Theta.  This module moves
paths both ways across that change of variables, extracts the jump marks
(jump size in log radius, pre- and post-jump directions) and bins their
rates per unit clock time, builds the e-folding ladder of radius records
together with stationarity diagnostics for the record angles, and checks
the sphere-inversion duality that swaps the conditioning to stay with
the conditioning to absorb at the apex.

All time-change inversions are cumulative-trapezoid integrals followed
by monotone piecewise-linear interpolation, so every transform here is a
pure function of the stored grid and refines with the step size.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .conditioning import _resolve_harmonic
from .geometry import ConeSpec
from .harmonic import (
    ExactHarmonic,
    HarmonicEstimate,
    half_space_harmonic,
    punctured_harmonic,
)
from .rng import RngStream, as_stream
from .stable import (
    PathBundle,
    PathGrid,
    StableParams,
    c_alpha,
    killed_ensemble,
    killed_paths_full,
    killed_radius_exit,
    sample_isotropic_increment,
)
from .stats import KsReport, kish_ess, ks_two_sample, systematic_resample

ESS_FLOOR = 50.0


# -- the log-radius clock, both directions -----------------------------------

@dataclass
class MapPath:
    """(xi, Theta) on a uniform clock grid of spacing ``h``.

    ``xi`` is the log of the radius relative to the start, so xi[0] = 0;
    ``theta`` holds unit directions, one row per grid point.
    """

    h: float
    xi: np.ndarray
    theta: np.ndarray

    def __post_init__(self) -> None:
        self.xi = np.asarray(self.xi, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.xi.ndim != 1 or self.theta.ndim != 2:
            raise ValueError("xi must be (m,), theta must be (m, d)")
        if self.xi.shape[0] != self.theta.shape[0]:
            raise ValueError("xi and theta lengths differ")
        if abs(float(self.xi[0])) > 1e-9:
            raise ValueError("xi must start at zero (log radius is relative)")
        norms = np.linalg.norm(self.theta, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("theta rows must be unit vectors")
        self.theta = self.theta / norms[:, None]

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    def times(self) -> np.ndarray:
        return self.h * np.arange(self.xi.shape[0])

    def __len__(self) -> int:
        return self.xi.shape[0]


def _alive_positions(path: PathGrid) -> np.ndarray:
    """Grid points of a path up to (excluding) the kill position."""
    if path.alive:
        pos = path.positions
    else:
        pos = path.positions[: path.kill_step]
    if pos.shape[0] < 2:
        raise ValueError("need at least two alive grid points")
    return pos


def _interp_positions(s: np.ndarray, times: np.ndarray, pos: np.ndarray) -> np.ndarray:
    out = np.empty((s.shape[0], pos.shape[1]))
    for j in range(pos.shape[1]):
        out[:, j] = np.interp(s, times, pos[:, j])
    return out


def to_map(params: StableParams, path: PathGrid, n_grid: int | None = None) -> MapPath:
    """Change a grid path to (xi, Theta) on the |X|^(-alpha) clock.

    The clock is the trapezoid integral of |X|^(-alpha) over the alive
    range; its piecewise-linear inverse resamples the path on a uniform
    clock grid with ``n_grid`` steps (default: as many as the input).
    Raises if the path touches the origin, where the clock diverges.
    """
    pos = _alive_positions(path)
    r = np.linalg.norm(pos, axis=1)
    if np.any(r == 0.0):
        raise ValueError("path touches the apex; the radial clock diverges")
    times = path.h * np.arange(pos.shape[0])
    w = r ** (-params.alpha)
    clock = np.concatenate([[0.0], np.cumsum(path.h * (w[:-1] + w[1:]) / 2.0)])
    total = float(clock[-1])
    if n_grid is None:
        n_grid = pos.shape[0] - 1
    if n_grid < 1:
        raise ValueError("n_grid must be at least 1")
    hm = total / n_grid
    tau = np.arange(n_grid + 1) * hm
    tau[-1] = total
    s = np.interp(tau, clock, times)
    xs = _interp_positions(s, times, pos)
    rr = np.linalg.norm(xs, axis=1)
    if np.any(rr == 0.0):
        raise ValueError("path touches the apex; the radial clock diverges")
    xi = np.log(rr / r[0])
    xi[0] = 0.0
    return MapPath(hm, xi, xs / rr[:, None])


def from_map(
    params: StableParams,
    mp: MapPath,
    x0,
    h: float | None = None,
) -> PathGrid:
    """Rebuild a real-time grid path |x0| * exp(xi) * Theta from a MapPath.

    Only the radius of ``x0`` enters; the start direction is theta[0].
    Real time is the trapezoid integral of exp(alpha * xi).  With ``h``
    given, the output grid is cut where the map's clock range runs out.
    """
    x0 = np.asarray(x0, dtype=float)
    r0 = float(np.linalg.norm(x0))
    if r0 == 0.0:
        raise ValueError("x0 must be nonzero")
    tm = mp.times()
    grow = np.exp(params.alpha * mp.xi)
    clock = np.concatenate(
        [[0.0], np.cumsum(mp.h * (grow[:-1] + grow[1:]) / 2.0)]
    )
    total = float(clock[-1])
    if h is None:
        n_steps = len(mp) - 1
        h = total / n_steps
        t = np.arange(n_steps + 1) * h
        t[-1] = total
    else:
        n_steps = int(math.floor(total / h + 1e-12))
        t = np.arange(n_steps + 1) * h
    s = np.interp(t, clock, tm)
    xi_s = np.interp(s, tm, mp.xi)
    th = _interp_positions(s, tm, mp.theta)
    norms = np.linalg.norm(th, axis=1)
    if np.any(norms < 1e-8):
        raise ValueError("angular interpolation collapsed; refine the map grid")
    positions = (r0 * np.exp(xi_s))[:, None] * (th / norms[:, None])
    return PathGrid(h, positions, None)


# -- sphere inversion with its clock ------------------------------------------

@dataclass
class InvertedPath(PathGrid):
    """A sphere-inverted path; ``clip_events`` counts radius clamps.

    The inversion clock integrates |X|^(-2 alpha), which blows up near the
    origin; radii below the clip are clamped and counted so callers can
    see how often the guard fired.
    """

    clip_events: int = 0


def rbz_transform(
    params: StableParams,
    path: PathGrid,
    clip_radius: float = 1e-6,
    h_out: float | None = None,
    t_max: float | None = None,
) -> InvertedPath:
    """Invert a path through the unit sphere on the |X|^(-2 alpha) clock.

    Returns K X at clock times on a uniform grid of spacing ``h_out``
    (default: the input spacing), where K x = x / |x|^2.  The output is
    shorter or longer than the input as the clock range dictates, and
    ``t_max`` caps the covered clock range; applying the transform twice
    reproduces the original path up to interpolation error.  A close pass
    by the apex inflates the clock enormously (each clipped radius
    contributes at rate clip_radius^(-2 alpha)), so callers interested in
    small clock times should set ``t_max`` rather than inherit a giant
    grid.
    """
    pos = _alive_positions(path)
    r = np.linalg.norm(pos, axis=1)
    if np.any(r == 0.0):
        raise ValueError("path touches the apex; the inversion clock diverges")
    if h_out is None:
        h_out = path.h
    clips = int(np.sum(r < clip_radius))
    rc = np.maximum(r, clip_radius)
    times = path.h * np.arange(pos.shape[0])
    w = rc ** (-2.0 * params.alpha)
    clock = np.concatenate([[0.0], np.cumsum(path.h * (w[:-1] + w[1:]) / 2.0)])
    total = float(clock[-1])
    if t_max is not None:
        total = min(total, float(t_max))
    n_out = int(math.floor(total / h_out + 1e-12))
    if n_out > 4_194_304:
        raise ValueError(
            f"inverted grid would need {n_out} points; pass t_max or a"
            " larger h_out"
        )
    t = np.arange(n_out + 1) * h_out
    s = np.interp(t, clock, times)
    xs = _interp_positions(s, times, pos)
    rs = np.linalg.norm(xs, axis=1)
    if np.any(rs == 0.0):
        raise ValueError("path touches the apex; the inversion clock diverges")
    return InvertedPath(h_out, xs / (rs**2)[:, None], None, clips)


# -- jump rates of the log-radius clock ---------------------------------------

def _signed_angle(xs: np.ndarray, axis: np.ndarray) -> np.ndarray:
    cross = xs[..., 1] * axis[0] - xs[..., 0] * axis[1]
    return np.arctan2(cross, xs @ axis)


def _profile_beta(params: StableParams, cone: ConeSpec, harmonic):
    """Angular profile (of the colatitude) and survival exponent."""
    if harmonic is None:
        if cone.kind == "halfspace":
            harmonic = half_space_harmonic(params.alpha, params.d, axis=cone.axis)
        elif cone.kind == "punctured":
            harmonic = punctured_harmonic(params.d)
        else:
            raise ValueError(
                "no closed-form harmonic for a circular cone; pass one estimated"
                " with estimate_harmonic"
            )
    if isinstance(harmonic, ExactHarmonic):
        return harmonic.profile, harmonic.beta
    if isinstance(harmonic, HarmonicEstimate):
        return harmonic.angular_profile(), harmonic.beta_hat
    raise TypeError("harmonic must be an ExactHarmonic or a HarmonicEstimate")


@dataclass
class JumpHistogram:
    """Binned jump rates of the log-radius clock.

    Rates are per unit clock time spent in the pre-jump angle bin, so
    each entry estimates the conditional jump intensity given the current
    direction.  ``marks`` keeps the raw flagged increments (y, pre angle,
    post angle) with their weights for finer reweighting downstream.
    ``occupancy_fine`` is a fine-grained angular occupancy histogram used
    to average kernel predictions over the pre-bin.
    """

    y_edges: np.ndarray
    pre_edges: np.ndarray
    post_edges: np.ndarray
    counts: np.ndarray
    rate: np.ndarray
    rate_se: np.ndarray
    occupancy: np.ndarray
    fine_edges: np.ndarray
    occupancy_fine: np.ndarray
    marks: np.ndarray
    mark_weights: np.ndarray
    threshold: float
    h: float
    min_count: int = 50
    conditioned: bool = False

    @property
    def mask(self) -> np.ndarray:
        """True where a bin has too few jumps to be trusted."""
        return self.counts < self.min_count

    @property
    def n_jumps(self) -> int:
        return int(self.counts.sum())

    @property
    def total_clock_time(self) -> float:
        return float(self.occupancy.sum())

    def to_csv(self, filename: str) -> None:
        with open(filename, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(
                [
                    "y_lo", "y_hi", "pre_lo", "pre_hi", "post_lo", "post_hi",
                    "count", "rate", "rate_se", "masked",
                ]
            )
            ny, npre, npost = self.counts.shape
            for i in range(ny):
                for j in range(npre):
                    for k in range(npost):
                        out.writerow(
                            [
                                self.y_edges[i], self.y_edges[i + 1],
                                self.pre_edges[j], self.pre_edges[j + 1],
                                self.post_edges[k], self.post_edges[k + 1],
                                int(self.counts[i, j, k]),
                                self.rate[i, j, k],
                                self.rate_se[i, j, k],
                                bool(self.mask[i, j, k]),
                            ]
                        )


def empirical_jump_rate(
    params: StableParams,
    bundle: PathBundle,
    y_edges,
    pre_edges,
    post_edges,
    cone: ConeSpec | None = None,
    harmonic=None,
    axis=None,
    threshold_scale: float = 3.0,
    min_count: int = 50,
    fine_bins: int = 96,
    row_chunk: int = 512,
) -> JumpHistogram:
    """Bin the flagged log-radius jumps of a path bundle.

    A grid increment counts as a jump when |delta log radius| exceeds
    ``threshold_scale`` times the median absolute increment; a pure-jump
    path on a grid has no canonical jump set, so the threshold scale is a
    declared choice and results should be read per scale.  Passing a cone
    reweights increments by the harmonic ratio at the post point, which
    turns free rates into rates of the process conditioned to stay.

    Only d = 2 is supported: the angle marks are signed angles about the
    axis and the kernel comparison integrates over the circle.
    """
    if bundle.positions.shape[2] != 2:
        raise ValueError("the jump histogram is implemented for d = 2")
    y_edges = np.asarray(y_edges, dtype=float)
    pre_edges = np.asarray(pre_edges, dtype=float)
    post_edges = np.asarray(post_edges, dtype=float)
    for e in (y_edges, pre_edges, post_edges):
        if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must be increasing with >= 2 entries")
    if axis is None:
        if cone is not None and cone.axis is not None:
            axis = cone.axis.components
        else:
            axis = np.zeros(2)
            axis[-1] = 1.0
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)

    m_fn = None
    if cone is not None:
        m_fn, _, _ = _resolve_harmonic(params, cone, harmonic)

    h = bundle.h
    T = bundle.n_steps
    steps = np.arange(1, T + 1)
    shape = (y_edges.size - 1, pre_edges.size - 1, post_edges.size - 1)
    counts = np.zeros(shape, dtype=np.int64)
    whist = np.zeros(shape)
    w2hist = np.zeros(shape)
    occupancy = np.zeros(pre_edges.size - 1)
    fine_edges = np.linspace(pre_edges[0], pre_edges[-1], fine_bins + 1)
    occupancy_fine = np.zeros(fine_bins)
    mark_rows, mark_w = [], []

    # first pass: pooled median of |delta log r| over alive increments
    med_parts = []
    for lo in range(0, len(bundle), row_chunk):
        P = bundle.positions[lo : lo + row_chunk]
        kill = bundle.kill_step[lo : lo + row_chunk]
        alive = (kill[:, None] < 0) | (kill[:, None] > steps[None, :])
        r = np.linalg.norm(P, axis=2)
        lr = np.log(np.where(r > 0, r, 1.0))
        med_parts.append(np.abs(np.diff(lr, axis=1))[alive])
    pooled = np.concatenate(med_parts)
    if pooled.size == 0:
        raise ValueError("no alive increments in the bundle")
    threshold = threshold_scale * float(np.median(pooled))
    del med_parts, pooled

    for lo in range(0, len(bundle), row_chunk):
        P = bundle.positions[lo : lo + row_chunk]
        kill = bundle.kill_step[lo : lo + row_chunk]
        alive = (kill[:, None] < 0) | (kill[:, None] > steps[None, :])
        r = np.linalg.norm(P, axis=2)
        lr = np.log(np.where(r > 0, r, 1.0))
        dlr = np.diff(lr, axis=1)
        if m_fn is None:
            w = alive.astype(float)
        else:
            w = np.zeros(alive.shape)
            ii, kk = np.nonzero(alive)
            w[ii, kk] = m_fn(P[ii, kk + 1])
        # clock time elapsed per increment, trapezoid in |X|^(-alpha)
        ra = np.where(r > 0, r, 1.0) ** (-params.alpha)
        dtau = h * (ra[:, :-1] + ra[:, 1:]) / 2.0
        pre_ang_all = _signed_angle(P[:, :-1, :], axis)
        vi, vk = np.nonzero(alive)
        occupancy += np.histogram(
            pre_ang_all[vi, vk], bins=pre_edges,
            weights=(w * dtau)[vi, vk],
        )[0]
        occupancy_fine += np.histogram(
            pre_ang_all[vi, vk], bins=fine_edges,
            weights=(w * dtau)[vi, vk],
        )[0]

        flagged = alive & (np.abs(dlr) > threshold)
        ii, kk = np.nonzero(flagged)
        if ii.size:
            y = dlr[ii, kk]
            th = pre_ang_all[ii, kk]
            ph = _signed_angle(P[ii, kk + 1], axis)
            wj = w[ii, kk]
            sample = np.column_stack([y, th, ph])
            edges = (y_edges, pre_edges, post_edges)
            counts += np.histogramdd(sample, bins=edges)[0].astype(np.int64)
            whist += np.histogramdd(sample, bins=edges, weights=wj)[0]
            w2hist += np.histogramdd(sample, bins=edges, weights=wj**2)[0]
            mark_rows.append(sample)
            mark_w.append(wj)

    occ = occupancy[None, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(occ > 0, whist / occ, np.nan)
        rate_se = np.where(occ > 0, np.sqrt(w2hist) / occ, np.nan)
    marks = (
        np.concatenate(mark_rows) if mark_rows else np.empty((0, 3))
    )
    weights = np.concatenate(mark_w) if mark_w else np.empty(0)
    return JumpHistogram(
        y_edges, pre_edges, post_edges, counts, rate, rate_se,
        occupancy, fine_edges, occupancy_fine, marks, weights,
        threshold, h, min_count, cone is not None,
    )


def free_kernel_bin_rate(
    params: StableParams,
    theta: float,
    y_range: tuple[float, float],
    phi_range: tuple[float, float],
    n: int = 201,
) -> float:
    """Integral of the free jump kernel over a (y, post-angle) bin, d = 2.

    The kernel density in jump size y and post direction phi, seen from
    pre direction theta (all angles signed about a common axis), is
    c(alpha) * e^(2y) / |e^y phi - theta|^(alpha + 2); here the chord
    distance is evaluated on the circle and the bin integral is a Simpson
    rule on an n x n grid.
    """
    if params.d != 2:
        raise ValueError("the kernel bin integral is implemented for d = 2")
    ys = np.linspace(y_range[0], y_range[1], n)
    phis = np.linspace(phi_range[0], phi_range[1], n)
    ey = np.exp(ys)[:, None]
    chord2 = ey**2 + 1.0 - 2.0 * ey * np.cos(phis[None, :] - theta)
    integrand = ey**2 * chord2 ** (-(params.alpha + 2.0) / 2.0)
    inner = simpson(integrand, x=phis, axis=1)
    return c_alpha(params.alpha, 2) * float(simpson(inner, x=ys))


def predicted_bin_rates(params: StableParams, hist: JumpHistogram, n: int = 101) -> np.ndarray:
    """Free-kernel prediction for every bin of a jump histogram.

    Averages the kernel bin integral over the fine angular occupancy of
    each pre bin, so the prediction carries the same conditioning on the
    current direction as the empirical rates.
    """
    ny = hist.y_edges.size - 1
    npre = hist.pre_edges.size - 1
    npost = hist.post_edges.size - 1
    centers = (hist.fine_edges[:-1] + hist.fine_edges[1:]) / 2.0
    sub_of_pre = np.searchsorted(hist.pre_edges, centers, side="right") - 1
    out = np.empty((ny, npre, npost))
    for i in range(ny):
        y_rng = (hist.y_edges[i], hist.y_edges[i + 1])
        for k in range(npost):
            p_rng = (hist.post_edges[k], hist.post_edges[k + 1])
            vals = np.array(
                [free_kernel_bin_rate(params, c, y_rng, p_rng, n) for c in centers]
            )
            for j in range(npre):
                sel = sub_of_pre == j
                wsel = hist.occupancy_fine[sel]
                tot = wsel.sum()
                if tot > 0:
                    out[i, j, k] = float(np.sum(wsel * vals[sel]) / tot)
                else:
                    out[i, j, k] = np.nan
    return out


def conditioned_tilt(params: StableParams, cone: ConeSpec, harmonic=None):
    """Per-jump factor turning free rates into stay-conditioned rates.

    Returns (tilt, beta) where tilt(y, pre, post) = e^(beta y) times the
    harmonic profile ratio at the post and pre colatitudes; angles are
    signed, the profile takes their magnitude.
    """
    profile, beta = _profile_beta(params, cone, harmonic)

    def tilt(y, pre, post):
        return np.exp(beta * np.asarray(y)) * (
            np.asarray(profile(np.abs(np.asarray(post))))
            / np.asarray(profile(np.abs(np.asarray(pre))))
        )

    return tilt, beta


# -- e-folding ladder of radius records ---------------------------------------

@dataclass
class LadderSequence:
    """Times, relative log radii, and directions of e-folding records.

    Row 0 is the start of the path (log radius 0); every later increment
    is at least 1 because a record requires the radius to exceed e times
    the previous record, plus whatever the jump overshoots.
    """

    times: np.ndarray
    log_radii: np.ndarray
    thetas: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.log_radii = np.asarray(self.log_radii, dtype=float)
        self.thetas = np.asarray(self.thetas, dtype=float)
        if abs(float(self.log_radii[0])) > 1e-12:
            raise ValueError("record log radii are relative to the start")
        if np.any(np.diff(self.log_radii) < 1.0 - 1e-12):
            raise ValueError("ladder increments must be at least 1")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("record times must increase")

    def increments(self) -> np.ndarray:
        return np.diff(self.log_radii)

    def __len__(self) -> int:
        return self.times.shape[0] - 1

    def to_csv(self, filename: str) -> None:
        with open(filename, "w", newline="") as fh:
            out = csv.writer(fh)
            d = self.thetas.shape[1]
            out.writerow(["time", "log_radius"] + [f"theta{j}" for j in range(d)])
            for i in range(self.times.shape[0]):
                out.writerow(
                    [self.times[i], self.log_radii[i]] + list(self.thetas[i])
                )


def discrete_ladder(path: PathGrid, n_max: int) -> LadderSequence:
    """First n_max e-folding radius records of one grid path.

    A record is the first alive grid point whose radius exceeds e times
    the previous record's radius.  Raises when the path does not reach
    n_max records before its horizon (or its kill).
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    pos = _alive_positions(path)
    r = np.linalg.norm(pos, axis=1)
    if r[0] == 0.0:
        raise ValueError("path starts at the apex")
    found = []
    prev = r[0]
    j = 0
    while len(found) < n_max:
        hit = r[j:] > math.e * prev
        k = int(np.argmax(hit))
        if not hit[k]:
            break
        j += k
        found.append(j)
        prev = r[j]
    if len(found) < n_max:
        raise ValueError(
            f"only {len(found)} ladder records before the horizon; "
            f"{n_max} requested"
        )
    idx = np.concatenate([[0], found]).astype(int)
    return LadderSequence(
        path.h * idx,
        np.log(r[idx] / r[0]),
        pos[idx] / r[idx][:, None],
    )


def ladder_ensemble(bundle: PathBundle, n_max: int) -> list[LadderSequence]:
    """Ladders of every bundle path that reaches n_max records."""
    out = []
    for i in range(len(bundle)):
        try:
            out.append(discrete_ladder(bundle.path(i), n_max))
        except ValueError:
            continue
    if not out:
        raise ValueError(f"no path in the bundle reaches {n_max} ladder records")
    return out


def _colat(cone: ConeSpec, xs: np.ndarray) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if cone.axis is not None:
        return cone.angle_from_axis(xs)
    r = np.linalg.norm(xs, axis=-1)
    return np.arccos(np.clip(xs[..., -1] / np.where(r > 0, r, 1.0), -1, 1))


def _axis_vector(cone: ConeSpec) -> np.ndarray:
    if cone.axis is not None:
        return np.asarray(cone.axis.components, dtype=float)
    v = np.zeros(cone.d)
    v[-1] = 1.0
    return v


def _tilted_direction(cone: ConeSpec, colat: float) -> np.ndarray:
    """Unit vector at the given colatitude from the cone axis."""
    a = _axis_vector(cone)
    probe = np.zeros_like(a)
    probe[0] = 1.0
    if abs(a @ probe) > 0.9:
        probe = np.zeros_like(a)
        probe[1] = 1.0
    u = probe - (probe @ a) * a
    u /= np.linalg.norm(u)
    return math.cos(colat) * a + math.sin(colat) * u


def ladder_step(
    params: StableParams,
    cone: ConeSpec,
    thetas: np.ndarray,
    rng: RngStream | int,
    h: float = 2**-6,
    max_steps: int | None = None,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One e-folding record from unit radius for a batch of directions.

    Scale invariance reduces every ladder step to a start on the unit
    sphere, so the chain over record angles never needs absolute radii.
    Returns (log record radius, record direction, ok); ok is False for
    paths killed before the record or censored at max_steps.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    norms = np.linalg.norm(thetas, axis=1)
    if np.any(norms == 0):
        raise ValueError("directions must be nonzero")
    thetas = thetas / norms[:, None]
    if max_steps is None:
        max_steps = int(round(64 / h))
    pos, _, killed = killed_radius_exit(
        params, cone, thetas, math.e, h, rng, max_steps, threads
    )
    rr = np.linalg.norm(pos, axis=1)
    # censored paths are still inside the ball, so the radius test drops them
    ok = (~killed) & (rr >= math.e)
    gain = np.full(thetas.shape[0], np.nan)
    gain[ok] = np.log(rr[ok])
    phi = pos / np.where(rr > 0, rr, 1.0)[:, None]
    return gain, phi, ok


@dataclass
class LadderLaw:
    """Pooled stationary law of the record angles, with diagnostics.

    ``samples`` are colatitudes pooled over both chains after burn-in.
    ``halves`` compares the first and second halves of the first chain's
    post-burn-in windows; ``across_starts`` compares the two chains, which
    began at distinct angles.  Chain samples are serially dependent, so
    the KS p-values are calibration guides rather than exact levels.
    """

    samples: np.ndarray
    halves: KsReport
    across_starts: KsReport
    converged: bool
    start_independent: bool
    n_chains: int
    burn_in: int
    n_samples: int
    start_angles: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "n_pooled": int(self.samples.size),
            "halves": self.halves.to_dict(),
            "across_starts": self.across_starts.to_dict(),
            "converged": bool(self.converged),
            "start_independent": bool(self.start_independent),
            "n_chains": self.n_chains,
            "burn_in": self.burn_in,
            "n_samples": self.n_samples,
            "start_angles": list(self.start_angles),
        }


def ladder_stationary(
    params: StableParams,
    cone: ConeSpec,
    burn_in: int,
    n_samples: int,
    n_chains: int,
    rng: RngStream | int,
    harmonic=None,
    h: float = 2**-6,
    max_steps: int | None = None,
    p_floor: float = 0.01,
    threads: int = 1,
) -> LadderLaw:
    """Stationary law of the ladder angles under conditioning to stay.

    Runs two particle chains over ladder records, one started on the
    axis and one near the boundary.  Each record carries the stay weight
    e^(beta * gain) times the harmonic profile ratio; systematic
    resampling after every record keeps the particle cloud balanced.
    Burn-in steps are discarded, the rest are pooled.  Failed diagnostics
    are reported through the flags, not raised.
    """
    if burn_in < 0 or n_samples < 2 or n_chains < 16:
        raise ValueError("need burn_in >= 0, n_samples >= 2, n_chains >= 16")
    stream = as_stream(rng)
    profile, beta = _profile_beta(params, cone, harmonic)
    aperture = cone.half_angle if cone.half_angle is not None else math.pi
    start_angles = (0.0, 0.8 * aperture)

    def run_chain(start_colat: float, substream: RngStream) -> list[np.ndarray]:
        th = np.tile(_tilted_direction(cone, start_colat), (n_chains, 1))
        windows = []
        for k in range(burn_in + n_samples):
            gain, phi, ok = ladder_step(
                params, cone, th, substream.child(k), h=h,
                max_steps=max_steps, threads=threads,
            )
            w = np.zeros(n_chains)
            if ok.any():
                w[ok] = np.exp(beta * gain[ok]) * (
                    np.asarray(profile(_colat(cone, phi[ok])))
                    / np.asarray(profile(_colat(cone, th[ok])))
                )
            if w.sum() <= 0:
                raise RuntimeError("every particle died during a ladder step")
            idx = systematic_resample(w, n_chains, substream.child(k, 1))
            th = phi[idx]
            if k >= burn_in:
                windows.append(_colat(cone, th))
        return windows

    win_a = run_chain(start_angles[0], stream.child(0))
    win_b = run_chain(start_angles[1], stream.child(1))
    split = n_samples // 2
    halves = ks_two_sample(
        np.concatenate(win_a[:split]), np.concatenate(win_a[split:])
    )
    across = ks_two_sample(np.concatenate(win_a), np.concatenate(win_b))
    samples = np.concatenate(win_a + win_b)
    return LadderLaw(
        samples, halves, across,
        halves.p_value > p_floor, across.p_value > p_floor,
        n_chains, burn_in, n_samples, start_angles,
    )


# -- ascending ladder of the log-radius maximum --------------------------------

@dataclass
class AscLadder:
    """Strict records of the running maximum of xi on the clock grid."""

    times: np.ndarray
    heights: np.ndarray
    thetas: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.heights = np.asarray(self.heights, dtype=float)
        self.thetas = np.asarray(self.thetas, dtype=float)
        if np.any(np.diff(self.heights) < 0):
            raise ValueError("record heights must be nondecreasing")

    def __len__(self) -> int:
        return self.heights.shape[0]


def ascending_ladder(mp: MapPath) -> AscLadder:
    """Record decomposition of the running maximum of xi.

    The start counts as record zero; later grid points enter when xi
    strictly exceeds every earlier value.
    """
    run = np.maximum.accumulate(mp.xi)
    prev = np.concatenate([[-np.inf], run[:-1]])
    rec = mp.xi > prev
    return AscLadder(mp.times()[rec], mp.xi[rec], mp.theta[rec])


@dataclass
class AscStationary:
    """Windowed law of the ascent record angles from a weighted ensemble.

    ``reweighted_weights`` divides each sample's weight by the harmonic
    profile at its angle, a derived output exposed for inspection.
    """

    angles: np.ndarray
    weights: np.ndarray
    ordinals: np.ndarray
    halves: KsReport
    converged: bool
    reweighted_weights: np.ndarray
    burn_records: int

    def to_dict(self) -> dict:
        return {
            "n_records": int(self.angles.size),
            "halves": self.halves.to_dict(),
            "converged": bool(self.converged),
            "burn_records": self.burn_records,
        }


def ascending_stationary(
    params: StableParams,
    cone: ConeSpec,
    horizon: float,
    n_paths: int,
    rng: RngStream | int,
    h: float = 2**-6,
    harmonic=None,
    burn_records: int = 2,
    min_records: int = 200,
    x0=None,
    p_floor: float = 0.01,
    threads: int = 1,
) -> AscStationary:
    """Stationarity of the ascent record angles under conditioning to stay.

    Simulates killed paths, weights the survivors by the harmonic ratio
    at the horizon, maps each onto the log-radius clock, and pools the
    strict maximum records beyond ``burn_records``.  The convergence
    diagnostic splits the pooled records at their median ordinal.
    """
    stream = as_stream(rng)
    m_fn, _, _ = _resolve_harmonic(params, cone, harmonic)
    profile, _ = _profile_beta(params, cone, harmonic)
    if x0 is None:
        x0 = _axis_vector(cone)
    x0 = np.asarray(x0, dtype=float)
    n_steps = int(round(horizon / h))
    if n_steps < 2 or abs(n_steps * h - horizon) > 1e-9 * max(horizon, 1.0):
        raise ValueError("horizon must be a multiple of the step")
    bundle = killed_paths_full(
        params, cone, x0, n_steps, h, stream.child(0), n_paths, threads
    )
    m0 = float(m_fn(x0))
    alive = bundle.kill_step < 0
    ords, angs, wts = [], [], []
    for i in np.nonzero(alive)[0]:
        w = float(m_fn(bundle.positions[i, -1])) / m0
        asc = ascending_ladder(to_map(params, bundle.path(i)))
        n_rec = len(asc)
        if n_rec <= burn_records:
            continue
        sel = np.arange(burn_records, n_rec)
        ords.append(sel)
        angs.append(_colat(cone, asc.thetas[sel]))
        wts.append(np.full(sel.size, w))
    if not ords:
        raise ValueError("no ascent records survived the burn-in")
    ordinals = np.concatenate(ords)
    angles = np.concatenate(angs)
    weights = np.concatenate(wts)
    if ordinals.size < min_records:
        raise ValueError(
            f"only {ordinals.size} ascent records; need at least {min_records}"
        )
    median = np.median(ordinals)
    early = ordinals <= median
    if early.sum() < 10 or (~early).sum() < 10:
        raise ValueError(
            "ascent records do not span enough ordinals for a split diagnostic;"
            " lengthen the horizon"
        )
    halves = ks_two_sample(
        angles[early], angles[~early], weights[early], weights[~early]
    )
    reweighted = weights / np.asarray(profile(angles))
    return AscStationary(
        angles, weights, ordinals, halves,
        halves.p_value > p_floor, reweighted, burn_records,
    )


# -- duality through sphere inversion ------------------------------------------

@dataclass
class DualityReport:
    """KS comparison of inverted stay-paths against absorb-paths."""

    x: np.ndarray
    t_list: list
    beta_shift: float
    horizon: float
    h: float
    n: int
    clip_events: int
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "x": list(np.asarray(self.x, dtype=float)),
            "t_list": [float(t) for t in self.t_list],
            "beta_shift": self.beta_shift,
            "horizon": self.horizon,
            "h": self.h,
            "n": self.n,
            "clip_events": self.clip_events,
            "entries": [
                {
                    "t": e["t"],
                    "log_radius": e["log_radius"].to_dict(),
                    "angle": e["angle"].to_dict() if e["angle"] else None,
                    "mass_left": e["mass_left"],
                    "mass_right": e["mass_right"],
                    "n_left": e["n_left"],
                    "n_right": e["n_right"],
                }
                for e in self.entries
            ],
        }

    def to_json(self, filename: str) -> None:
        with open(filename, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def duality_test(
    params: StableParams,
    cone: ConeSpec,
    x,
    t_list,
    N: int,
    h: float,
    rng: RngStream | int,
    harmonic=None,
    horizon: float = 64.0,
    beta_shift: float = 0.0,
    n_right: int | None = None,
    chunk: int = 2000,
    threads: int = 1,
) -> DualityReport:
    """Compare sphere-inverted stay-paths with absorb-paths from x.

    The left ensemble conditions paths from x to stay, inverts each
    through the unit sphere on the |X|^(-2 alpha) clock, and reads log
    radius and colatitude at the requested clock times (inversion keeps
    the direction and flips the log radius, so both come from the point
    where the clock crosses t).  Each path's stay weight is the harmonic
    value at the first grid node past the crossing: the functional is
    measurable there, and stopping the weight martingale that early
    avoids the heavy tails the harmonic picks up by the full horizon.
    The right ensemble weights free paths from x by the apex-absorption
    ratio and reads the same functionals at plain times.  Both laws
    should agree; ``beta_shift`` perturbs the absorption exponent to give
    a negative control.  Paths whose clock range ends inside the horizon
    before t count as absorbed, so the horizon must dwarf max(t_list);
    the report carries both alive masses for comparison.

    The absorption weight blows up near the apex, so the right ensemble
    needs more paths than the left to reach the same effective size.  It
    only runs to max(t_list) and is cheap; ``n_right`` (default N) sets
    its size.
    """
    x = np.asarray(x, dtype=float)
    if not cone.contains(x):
        raise ValueError("start point must lie inside the cone")
    t_list = [float(t) for t in t_list]
    if not t_list or any(
        b <= a for a, b in zip(t_list, t_list[1:])
    ) or t_list[0] <= 0:
        raise ValueError("t_list must be positive and strictly increasing")
    t_steps = []
    for t in t_list:
        st = int(round(t / h))
        if st < 1 or abs(st * h - t) > 1e-9 * max(t, 1.0):
            raise ValueError(f"time {t} is not a grid time for step {h}")
        t_steps.append(st)
    n_steps = int(round(horizon / h))
    if abs(n_steps * h - horizon) > 1e-9 * max(horizon, 1.0):
        raise ValueError("horizon must be a multiple of the step")
    if horizon < 8 * t_list[-1]:
        warnings.warn(
            "horizon is within 8x the largest comparison time; clock-range"
            " truncation will bias the inverted ensemble",
            RuntimeWarning,
            stacklevel=2,
        )

    stream = as_stream(rng)
    m_fn, beta, _ = _resolve_harmonic(params, cone, harmonic)
    m0 = float(m_fn(x))
    r0 = float(np.linalg.norm(x))
    radial_exp = params.alpha - 2.0 * beta - params.d - beta_shift
    has_axis = cone.axis is not None

    # left: invert the stay-conditioned paths
    clip_radius = 1e-6
    left_logr = [[] for _ in t_list]
    left_ang = [[] for _ in t_list]
    left_w = [[] for _ in t_list]
    clip_events = 0
    mass_left_num = np.zeros(len(t_list))
    left_stream = stream.child(0)
    ci = 0
    for lo in range(0, N, chunk):
        m = min(chunk, N - lo)
        bnd = killed_paths_full(
            params, cone, x, n_steps, h, left_stream.child(ci), m, threads
        )
        ci += 1
        times = h * np.arange(n_steps + 1)
        for i in range(len(bnd)):
            # the stay weight only needs the path alive at the crossing
            # node, so killed paths count through their alive prefix
            kill = int(bnd.kill_step[i])
            last = n_steps if kill < 0 else kill - 1
            if last < 1:
                continue
            pos = bnd.positions[i, : last + 1]
            tms = times[: last + 1]
            r = np.linalg.norm(pos, axis=1)
            clip_events += int(np.sum(r < clip_radius))
            rate = np.maximum(r, clip_radius) ** (-2.0 * params.alpha)
            clock = np.concatenate(
                [[0.0], np.cumsum(h * (rate[:-1] + rate[1:]) / 2.0)]
            )
            for j, t in enumerate(t_list):
                if clock[-1] < t:
                    continue
                node = int(np.searchsorted(clock, t))
                s = float(np.interp(t, clock, tms))
                xs = np.array(
                    [np.interp(s, tms, pos[:, c]) for c in range(params.d)]
                )
                rs = float(np.linalg.norm(xs))
                wi = float(m_fn(pos[node])) / m0
                left_logr[j].append(-math.log(rs))
                if has_axis:
                    left_ang[j].append(float(_colat(cone, xs)[0]))
                left_w[j].append(wi)
                mass_left_num[j] += wi

    # right: weight free paths by the apex-absorption ratio
    if n_right is None:
        n_right = N
    positions, _, kill = killed_ensemble(
        params, cone, x, t_steps, h, stream.child(1), n_right, threads
    )
    entries = []
    for j, (t, st) in enumerate(zip(t_list, t_steps)):
        alive_t = (kill < 0) | (kill > st)
        yt = positions[:, j, :][alive_t]
        ry = np.linalg.norm(yt, axis=1)
        wr = (m_fn(yt) / m0) * (ry / r0) ** radial_exp
        wl = np.asarray(left_w[j])
        if wl.size == 0 or wr.size == 0:
            raise ValueError(f"no usable paths at time {t}")
        ess = min(kish_ess(wl), kish_ess(wr))
        if ess < ESS_FLOOR:
            warnings.warn(
                f"duality comparison is degenerate: effective sample size "
                f"{ess:.1f} below {ESS_FLOOR:.0f}",
                RuntimeWarning,
                stacklevel=2,
            )
        ks_r = ks_two_sample(np.asarray(left_logr[j]), np.log(ry), wl, wr)
        ks_a = None
        if has_axis:
            ks_a = ks_two_sample(
                np.asarray(left_ang[j]), _colat(cone, yt), wl, wr
            )
        entries.append(
            {
                "t": t,
                "log_radius": ks_r,
                "angle": ks_a,
                "mass_left": float(mass_left_num[j] / N),
                "mass_right": float(wr.sum() / n_right),
                "n_left": int(wl.size),
                "n_right": int(wr.size),
            }
        )
    return DualityReport(
        x, t_list, beta_shift, horizon, h, N, clip_events, entries
    )


@dataclass
class ReversalReport:
    """KS comparison of reversed steps against absorb-transitions."""

    ks: KsReport
    n_events: int
    delta: float
    ball_radius: float
    h: float

    def to_dict(self) -> dict:
        return {
            "ks": self.ks.to_dict(),
            "n_events": self.n_events,
            "delta": self.delta,
            "ball_radius": self.ball_radius,
            "h": self.h,
        }

    def to_json(self, filename: str) -> None:
        with open(filename, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def time_reversal_experiment(
    params: StableParams,
    cone: ConeSpec,
    delta: float,
    ball_radius: float,
    N: int,
    rng: RngStream | int,
    h: float = 2**-7,
    horizon: float = 32.0,
    harmonic=None,
    min_events: int = 100,
    chunk: int = 2000,
    threads: int = 1,
) -> ReversalReport:
    """Reverse stay-paths at their last exit from a ball around the apex.

    Paths start at delta times the axis direction, are conditioned to
    stay by the usual horizon weighting, and each surviving path is cut
    at the last grid time its radius is within ``ball_radius``.  The one
    reversed step from that point is compared (weighted KS on the log
    radius increment) against a fresh absorb-weighted step from the same
    point, pooling over events.
    """
    if delta <= 0 or ball_radius <= delta:
        raise ValueError("need 0 < delta < ball_radius")
    stream = as_stream(rng)
    m_fn, beta, _ = _resolve_harmonic(params, cone, harmonic)
    x0 = delta * _axis_vector(cone)
    m0 = float(m_fn(x0))
    radial_exp = params.alpha - 2.0 * beta - params.d
    n_steps = int(round(horizon / h))
    if abs(n_steps * h - horizon) > 1e-9 * max(horizon, 1.0):
        raise ValueError("horizon must be a multiple of the step")

    rev_inc, path_w, start_pts = [], [], []
    sub = stream.child(0)
    ci = 0
    for lo in range(0, N, chunk):
        m = min(chunk, N - lo)
        bnd = killed_paths_full(
            params, cone, x0, n_steps, h, sub.child(ci), m, threads
        )
        ci += 1
        for i in np.nonzero(bnd.kill_step < 0)[0]:
            r = np.linalg.norm(bnd.positions[i], axis=1)
            inball = np.nonzero(r <= ball_radius)[0]
            last = int(inball[-1])
            # the start sits inside the ball, so inball is never empty; a
            # last visit at the first or final grid point gives no usable
            # reversed step (no earlier point, or censored by the horizon)
            if last < 1 or last >= n_steps:
                continue
            rev_inc.append(math.log(r[last - 1]) - math.log(r[last]))
            path_w.append(float(m_fn(bnd.positions[i, -1])) / m0)
            start_pts.append(bnd.positions[i, last])
    n_events = len(rev_inc)
    if n_events < min_events:
        raise ValueError(
            f"only {n_events} last-exit events; need at least {min_events}"
        )
    z = np.asarray(start_pts)
    w = np.asarray(path_w)
    rz = np.linalg.norm(z, axis=1)

    disp = sample_isotropic_increment(params, h, stream.child(1), n_events)
    z2 = z + disp
    inside = cone.contains_many(z2)
    rz2 = np.linalg.norm(z2, axis=1)
    hz = m_fn(z) * rz**radial_exp
    hz2 = np.where(inside, m_fn(z2) * np.where(rz2 > 0, rz2, 1.0) ** radial_exp, 0.0)
    fwd_w = w * hz2 / hz
    fwd_inc = np.log(np.where(rz2 > 0, rz2, 1.0)) - np.log(rz)
    ks = ks_two_sample(np.asarray(rev_inc), fwd_inc, w, fwd_w)
    return ReversalReport(ks, n_events, delta, ball_radius, h)
