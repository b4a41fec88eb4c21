"""Sampling engine for isotropic stable processes killed outside a cone.

Increments use the subordinated-Gaussian representation: an isotropic
stable vector over a window of length t is sqrt(2 t^(2/alpha) W) Z with Z
standard Gaussian in R^d and W positive stable of index alpha/2 drawn by
Kanter's method.  Paths live on a uniform time grid and are killed at the
first grid point outside the cone; the killing bias of that convention is
quantified by step-halving in the estimators built on top.

Ball-exit sampling and the jump-aware walk on spheres give an alternative,
grid-free route to cone exit positions.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .geometry import ConeSpec
from .rng import RngStream, as_stream

# paths are processed in fixed-size blocks so results do not depend on the
# thread count; only executor width changes with --threads
CHUNK = 50_000

WOS_EXITED = 0
WOS_APEX_STALL = 1
WOS_MAX_STEPS = 2


class ApexStallError(RuntimeError):
    """Walk on spheres shrank below its minimum ball radius near the apex."""


class MaxStepsError(RuntimeError):
    """Walk on spheres failed to leave the cone within the step budget."""


@dataclass(frozen=True)
class StableParams:
    """Index and dimension of the isotropic stable process."""

    alpha: float
    d: int

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 2.0):
            raise ValueError("alpha must lie in (0, 2)")
        if int(self.d) < 2:
            raise ValueError("dimension must be at least 2")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "d": self.d}


# -- scalar variate generators ---------------------------------------------

def sample_positive_stable(
    rho: float, rng: RngStream | int | np.random.Generator, n: int | None = None
) -> np.ndarray | float:
    """Positive stable variates with Laplace transform exp(-lambda^rho).

    Kanter's representation: with U uniform on (0, pi) and E unit
    exponential,

        log W = log sin(rho U) + ((1-rho)/rho) log sin((1-rho) U)
                - (1/rho) log sin(U) - ((1-rho)/rho) log E.

    The form above stays stable as rho -> 1.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError("rho must lie in (0, 1)")
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    m = 1 if n is None else int(n)
    u = np.clip(gen.random(m) * math.pi, 1e-12, math.pi - 1e-12)
    e = np.clip(gen.exponential(size=m), 1e-300, None)
    logw = (
        np.log(np.sin(rho * u))
        + ((1.0 - rho) / rho) * np.log(np.sin((1.0 - rho) * u))
        - (1.0 / rho) * np.log(np.sin(u))
        - ((1.0 - rho) / rho) * np.log(e)
    )
    w = np.exp(logw)
    return float(w[0]) if n is None else w


def _gauss_subordination_scale(
    gen: np.random.Generator, alpha: float, t: float, m: int
) -> np.ndarray:
    w = sample_positive_stable(alpha / 2.0, gen, m)
    return np.sqrt(2.0 * t ** (2.0 / alpha) * w)


def sample_isotropic_increment(
    params: StableParams,
    t: float,
    rng: RngStream | int | np.random.Generator,
    n: int | None = None,
) -> np.ndarray:
    """Increments of the isotropic stable process over a window of length t.

    Characteristic function exp(-t |theta|^alpha).  Returns shape (d,) for
    n=None, else (n, d).
    """
    if t < 0:
        raise ValueError("window length must be nonnegative")
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    m = 1 if n is None else int(n)
    if t == 0.0:
        out = np.zeros((m, params.d))
    else:
        scale = _gauss_subordination_scale(gen, params.alpha, t, m)
        out = scale[:, None] * gen.standard_normal((m, params.d))
    return out[0] if n is None else out


def c_alpha(alpha: float, d: int) -> float:
    """Levy measure constant: nu(dz) = c_alpha |z|^(-d - alpha) dz.

    Pinned to this package's normalization exp(-t |theta|^alpha) of the
    characteristic function; the same constant scales the log-radial jump
    kernel with the unnormalized surface measure on the sphere.
    """
    return (
        2.0**alpha
        * special.gamma((d + alpha) / 2.0)
        / (math.pi ** (d / 2.0) * abs(special.gamma(-alpha / 2.0)))
    )


# -- path containers --------------------------------------------------------

@dataclass
class PathGrid:
    """A single killed path on a uniform grid.

    ``positions`` holds the start plus every simulated grid point; if the
    path was killed, the last stored row is the first point outside the
    cone and ``kill_step`` is its index.
    """

    h: float
    positions: np.ndarray
    kill_step: int | None = None

    @property
    def alive(self) -> bool:
        return self.kill_step is None

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def times(self) -> np.ndarray:
        return self.h * np.arange(self.positions.shape[0])

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class PathBundle:
    """An ensemble of killed paths sharing one grid.

    ``positions`` has shape (n, steps+1, d); rows are frozen at the kill
    position after death.  ``kill_step`` is -1 for paths alive throughout.
    """

    h: float
    positions: np.ndarray
    kill_step: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1] - 1

    def alive_at_step(self, step: int) -> np.ndarray:
        return (self.kill_step < 0) | (self.kill_step > step)

    def path(self, i: int) -> PathGrid:
        ks = int(self.kill_step[i])
        if ks < 0:
            return PathGrid(self.h, self.positions[i].copy(), None)
        return PathGrid(self.h, self.positions[i, : ks + 1].copy(), ks)


# -- vectorized killed-path kernels -----------------------------------------

def _run_chunks(worker, n: int, stream: RngStream, threads: int = 1):
    """Split n paths into fixed-size blocks and run worker(start, m, gen)."""
    bounds = [(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]
    jobs = [
        (lo, hi - lo, stream.child(ci).generator())
        for ci, (lo, hi) in enumerate(bounds)
    ]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(lambda j: worker(*j), jobs))
    return [worker(*j) for j in jobs]


def killed_ensemble(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    record_steps: Sequence[int],
    h: float,
    rng: RngStream | int,
    n: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions and running minimum radius at selected grid steps.

    Returns (positions, min_radius, kill_step): positions has shape
    (n, len(record_steps), d) with rows frozen at the kill position once a
    path dies; min_radius has shape (n, len(record_steps)) and tracks the
    smallest |X| over all grid points up to each recorded step while the
    path is alive (frozen after death); kill_step is -1 for paths alive
    through the last recorded step.
    """
    x0 = np.asarray(x0, dtype=float)
    if not cone.contains(x0):
        raise ValueError("start point must lie inside the cone")
    record_steps = np.asarray(sorted(int(s) for s in record_steps), dtype=np.int64)
    if record_steps.size == 0 or record_steps[0] < 0:
        raise ValueError("record steps must be nonnegative")
    n_steps = int(record_steps[-1])
    alpha, d = params.alpha, params.d

    def worker(lo: int, m: int, gen: np.random.Generator):
        out = np.empty((m, record_steps.size, d))
        min_out = np.empty((m, record_steps.size))
        kill = np.full(m, -1, dtype=np.int64)
        alive_idx = np.arange(m)
        cur = np.tile(x0, (m, 1))
        min_r = np.full(m, float(np.linalg.norm(x0)))
        rec_ptr = 0
        while rec_ptr < record_steps.size and record_steps[rec_ptr] == 0:
            out[:, rec_ptr, :] = cur
            min_out[:, rec_ptr] = min_r
            rec_ptr += 1
        for step in range(1, n_steps + 1):
            if alive_idx.size:
                ma = alive_idx.size
                scale = _gauss_subordination_scale(gen, alpha, h, ma)
                cur[alive_idx] += scale[:, None] * gen.standard_normal((ma, d))
                inside = cone.contains_many(cur[alive_idx])
                if not inside.all():
                    died = alive_idx[~inside]
                    kill[died] = step
                    alive_idx = alive_idx[inside]
                if alive_idx.size:
                    min_r[alive_idx] = np.minimum(
                        min_r[alive_idx], np.linalg.norm(cur[alive_idx], axis=1)
                    )
            while rec_ptr < record_steps.size and record_steps[rec_ptr] == step:
                out[:, rec_ptr, :] = cur
                min_out[:, rec_ptr] = min_r
                rec_ptr += 1
            if alive_idx.size == 0 and rec_ptr < record_steps.size:
                # all dead: remaining records are the frozen kill state
                out[:, rec_ptr:, :] = cur[:, None, :]
                min_out[:, rec_ptr:] = min_r[:, None]
                rec_ptr = record_steps.size
                break
        return out, min_out, kill

    parts = _run_chunks(worker, n, as_stream(rng), threads)
    return (
        np.concatenate([p[0] for p in parts], axis=0),
        np.concatenate([p[1] for p in parts], axis=0),
        np.concatenate([p[2] for p in parts], axis=0),
    )


def killed_positions_at(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    record_steps: Sequence[int],
    h: float,
    rng: RngStream | int,
    n: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Positions at selected grid steps for n killed paths from x0.

    Returns (positions, kill_step): positions has shape (n, len(record_steps), d)
    with rows frozen at the kill position once a path dies; kill_step is -1
    for paths alive through the last recorded step.
    """
    positions, _, kill = killed_ensemble(
        params, cone, x0, record_steps, h, rng, n, threads
    )
    return positions, kill


def killed_steps(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    n_steps: int,
    h: float,
    rng: RngStream | int,
    n: int,
    threads: int = 1,
) -> np.ndarray:
    """Kill step for n paths from x0 (-1 when alive through n_steps).

    Same dynamics as :func:`killed_positions_at` without storing positions;
    use it when only survival indicators are needed.
    """
    x0 = np.asarray(x0, dtype=float)
    if not cone.contains(x0):
        raise ValueError("start point must lie inside the cone")
    alpha, d = params.alpha, params.d

    def worker(lo: int, m: int, gen: np.random.Generator):
        cur = np.tile(x0, (m, 1))
        kill = np.full(m, -1, dtype=np.int64)
        alive_idx = np.arange(m)
        for step in range(1, n_steps + 1):
            if alive_idx.size == 0:
                break
            ma = alive_idx.size
            scale = _gauss_subordination_scale(gen, alpha, h, ma)
            cur[alive_idx] += scale[:, None] * gen.standard_normal((ma, d))
            inside = cone.contains_many(cur[alive_idx])
            if not inside.all():
                died = alive_idx[~inside]
                kill[died] = step
                alive_idx = alive_idx[inside]
        return (kill,)

    parts = _run_chunks(worker, n, as_stream(rng), threads)
    return np.concatenate([p[0] for p in parts])


def killed_paths_full(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    n_steps: int,
    h: float,
    rng: RngStream | int,
    n: int,
    threads: int = 1,
) -> PathBundle:
    """Full killed paths from x0 over n_steps grid steps."""
    x0 = np.asarray(x0, dtype=float)
    if not cone.contains(x0):
        raise ValueError("start point must lie inside the cone")
    alpha, d = params.alpha, params.d

    def worker(lo: int, m: int, gen: np.random.Generator):
        out = np.empty((m, n_steps + 1, d))
        out[:, 0, :] = x0
        kill = np.full(m, -1, dtype=np.int64)
        alive_idx = np.arange(m)
        cur = np.tile(x0, (m, 1))
        for step in range(1, n_steps + 1):
            if alive_idx.size:
                ma = alive_idx.size
                scale = _gauss_subordination_scale(gen, alpha, h, ma)
                cur[alive_idx] += scale[:, None] * gen.standard_normal((ma, d))
                inside = cone.contains_many(cur[alive_idx])
                if not inside.all():
                    died = alive_idx[~inside]
                    kill[died] = step
                    alive_idx = alive_idx[inside]
            out[:, step, :] = cur
        return out, kill

    parts = _run_chunks(worker, n, as_stream(rng), threads)
    return PathBundle(
        h,
        np.concatenate([p[0] for p in parts], axis=0),
        np.concatenate([p[1] for p in parts], axis=0),
    )


def killed_min_radius(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    n_steps: int,
    h: float,
    rng: RngStream | int,
    n: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Minimum radius reached strictly before killing (or the horizon).

    Returns (min_radius, killed_flag).  The minimum includes the start and
    every alive grid point, not the kill position itself.
    """
    x0 = np.asarray(x0, dtype=float)
    if not cone.contains(x0):
        raise ValueError("start point must lie inside the cone")
    alpha, d = params.alpha, params.d
    r0 = float(np.linalg.norm(x0))

    def worker(lo: int, m: int, gen: np.random.Generator):
        cur = np.tile(x0, (m, 1))
        min_r = np.full(m, r0)
        killed = np.zeros(m, dtype=bool)
        alive_idx = np.arange(m)
        for _ in range(n_steps):
            if alive_idx.size == 0:
                break
            ma = alive_idx.size
            scale = _gauss_subordination_scale(gen, alpha, h, ma)
            cur[alive_idx] += scale[:, None] * gen.standard_normal((ma, d))
            inside = cone.contains_many(cur[alive_idx])
            died = alive_idx[~inside]
            killed[died] = True
            alive_idx = alive_idx[inside]
            if alive_idx.size:
                r = np.linalg.norm(cur[alive_idx], axis=1)
                np.minimum.at(min_r, alive_idx, r)
        return min_r, killed

    parts = _run_chunks(worker, n, as_stream(rng), threads)
    return (
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
    )


def run_until_ball_exit(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    center: np.ndarray,
    radius: float,
    h: float,
    rng: RngStream | int,
    n: int,
    max_steps: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Stop each path at its first grid point outside ball(center, radius)
    or outside the cone, whichever comes first.

    Returns (stop_positions, stop_step); censored paths (still inside at
    max_steps) return their current position, which keeps optional-stopping
    estimators unbiased.
    """
    x0 = np.asarray(x0, dtype=float)
    center = np.asarray(center, dtype=float)
    if not cone.contains(x0):
        raise ValueError("start point must lie inside the cone")
    alpha, d = params.alpha, params.d

    def worker(lo: int, m: int, gen: np.random.Generator):
        cur = np.tile(x0, (m, 1))
        stop_step = np.full(m, max_steps, dtype=np.int64)
        active_idx = np.arange(m)
        for step in range(1, max_steps + 1):
            if active_idx.size == 0:
                break
            ma = active_idx.size
            scale = _gauss_subordination_scale(gen, alpha, h, ma)
            cur[active_idx] += scale[:, None] * gen.standard_normal((ma, d))
            sub = cur[active_idx]
            out_ball = np.linalg.norm(sub - center, axis=1) >= radius
            out_cone = ~cone.contains_many(sub)
            stopped = out_ball | out_cone
            if stopped.any():
                stop_step[active_idx[stopped]] = step
                active_idx = active_idx[~stopped]
        return cur, stop_step

    parts = _run_chunks(worker, n, as_stream(rng), threads)
    return (
        np.concatenate([p[0] for p in parts], axis=0),
        np.concatenate([p[1] for p in parts]),
    )


def killed_radius_exit(
    params: StableParams,
    cone: ConeSpec,
    starts: np.ndarray,
    radius: float,
    h: float,
    rng: RngStream | int,
    max_steps: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run one killed path per row of ``starts`` until |X| >= radius.

    Unlike :func:`run_until_ball_exit` every path has its own start point,
    which is what a ladder of radius records needs.  Returns
    (stop_positions, stop_step, killed); ``killed`` marks paths that left
    the cone first.  Paths still inside the ball at ``max_steps`` are
    censored: not killed, |position| < radius, stop_step == max_steps.
    """
    starts = np.asarray(starts, dtype=float)
    if starts.ndim != 2 or starts.shape[1] != params.d:
        raise ValueError(f"starts must have shape (n, {params.d})")
    if not cone.contains_many(starts).all():
        raise ValueError("all start points must lie inside the cone")
    alpha, d = params.alpha, params.d

    def worker(lo: int, m: int, gen: np.random.Generator):
        cur = starts[lo : lo + m].copy()
        stop_step = np.full(m, max_steps, dtype=np.int64)
        killed = np.zeros(m, dtype=bool)
        active_idx = np.arange(m)
        for step in range(1, max_steps + 1):
            if active_idx.size == 0:
                break
            ma = active_idx.size
            scale = _gauss_subordination_scale(gen, alpha, h, ma)
            cur[active_idx] += scale[:, None] * gen.standard_normal((ma, d))
            sub = cur[active_idx]
            out_cone = ~cone.contains_many(sub)
            out_ball = np.linalg.norm(sub, axis=1) >= radius
            stopped = out_ball | out_cone
            if stopped.any():
                stop_idx = active_idx[stopped]
                stop_step[stop_idx] = step
                killed[stop_idx] = out_cone[stopped]
                active_idx = active_idx[~stopped]
        return cur, stop_step, killed

    parts = _run_chunks(worker, starts.shape[0], as_stream(rng), threads)
    return (
        np.concatenate([p[0] for p in parts], axis=0),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )


def simulate_killed_path(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    horizon: float,
    h: float,
    rng: RngStream | int,
) -> PathGrid:
    """One killed path from x0 up to the horizon on a grid of step h."""
    if h <= 0 or horizon <= 0:
        raise ValueError("horizon and step must be positive")
    n_steps = int(math.ceil(horizon / h - 1e-9))
    bundle = killed_paths_full(params, cone, np.asarray(x0, float), n_steps, h, rng, 1)
    return bundle.path(0)


# -- exit of the unit ball ---------------------------------------------------

def _beta_radius(gen: np.random.Generator, alpha: float, n: int) -> np.ndarray:
    """Radius of the ball-exit point from the center: R = (1-V)^(-1/2)
    with V ~ Beta(1 - alpha/2, alpha/2).

    The law piles up near V = 0, where the radius rounds to 1.0 in floating
    point; exits are strictly outside the ball, so clamp to the next float.
    """
    v = gen.beta(1.0 - alpha / 2.0, alpha / 2.0, size=n)
    v = np.clip(v, 0.0, 1.0 - 1e-15)
    return np.maximum(1.0 / np.sqrt(1.0 - v), np.nextafter(1.0, 2.0))


def _uniform_directions(gen: np.random.Generator, n: int, d: int) -> np.ndarray:
    z = gen.standard_normal((n, d))
    norms = np.linalg.norm(z, axis=1)
    bad = norms < 1e-300
    while np.any(bad):
        z[bad] = gen.standard_normal((int(bad.sum()), d))
        norms[bad] = np.linalg.norm(z[bad], axis=1)
        bad = norms < 1e-300
    return z / norms[:, None]


_RADIAL_TABLE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _radial_table(alpha: float, d: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF table for the radial proposal at interior radius rho.

    Accepted pairs follow the exit law when the radial proposal absorbs the
    angular acceptance envelope (r - rho)^(-d).  In the Beta-CDF variable u
    of the rho = 0 radius law the proposal density is (r / (r - rho))^d,
    bounded on (0, 1), so the trapezoid CDF is well conditioned at both the
    sphere and the heavy tail.  The node count doubles from 2048 until the
    normalization changes by less than 1e-6.
    """
    key = (round(alpha, 12), d, round(rho, 12))
    cached = _RADIAL_TABLE_CACHE.get(key)
    if cached is not None:
        return cached
    a_, b_ = 1.0 - alpha / 2.0, alpha / 2.0
    nodes = 2048
    prev_mass = None
    while True:
        u = np.linspace(0.0, 1.0, nodes)
        v = special.betaincinv(a_, b_, np.clip(u, 1e-14, 1.0 - 1e-14))
        r = 1.0 / np.sqrt(1.0 - np.clip(v, 0.0, 1.0 - 1e-15))
        psi = (r / (r - rho)) ** d
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (psi[1:] + psi[:-1]) * np.diff(u))])
        mass = cdf[-1]
        if prev_mass is not None and abs(mass - prev_mass) <= 1e-6 * mass:
            break
        if nodes >= 65536:
            break
        prev_mass = mass
        nodes *= 2
    table = (u, cdf / mass)
    _RADIAL_TABLE_CACHE[key] = table
    return table


def sample_ball_exit(
    params: StableParams,
    x_rel: np.ndarray,
    rng: RngStream | int | np.random.Generator,
    n: int | None = None,
) -> np.ndarray:
    """Exit positions of the unit ball for the process started at x_rel.

    The exit density is proportional to
    (1-|x|^2)^(alpha/2) (|y|^2-1)^(-alpha/2) |y-x|^(-d) on |y| > 1.  From
    the center the radius has the exact Beta representation and the angle
    is uniform; off-center draws come from a tabulated radial proposal with
    a uniform angle, and the pair is accepted against the |y-x|^(-d) tilt
    with probability ((r - rho) / |y - x|)^d.
    """
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    x_rel = np.asarray(x_rel, dtype=float)
    rho = float(np.linalg.norm(x_rel))
    if rho >= 1.0:
        raise ValueError("start point must lie strictly inside the unit ball")
    m = 1 if n is None else int(n)
    alpha, d = params.alpha, params.d

    if rho == 0.0:
        radii = _beta_radius(gen, alpha, m)
        dirs = _uniform_directions(gen, m, d)
        out = radii[:, None] * dirs
        return out[0] if n is None else out

    u_grid, cdf = _radial_table(alpha, d, rho)
    a_, b_ = 1.0 - alpha / 2.0, alpha / 2.0
    out = np.empty((m, d))
    have = 0
    while have < m:
        k = max(m - have, 64)
        q = gen.random(k)
        u = np.interp(q, cdf, u_grid)
        v = special.betaincinv(a_, b_, np.clip(u, 1e-14, 1.0 - 1e-14))
        r = np.maximum(
            1.0 / np.sqrt(1.0 - np.clip(v, 0.0, 1.0 - 1e-15)),
            np.nextafter(1.0, 2.0),
        )
        phi = _uniform_directions(gen, k, d)
        y = r[:, None] * phi
        ratio = ((r - rho) ** 2 / np.sum((y - x_rel) ** 2, axis=1)) ** (d / 2.0)
        acc = gen.random(k) <= ratio
        taken = y[acc]
        take = min(taken.shape[0], m - have)
        out[have : have + take] = taken[:take]
        have += take
    return out[0] if n is None else out


# -- walk on spheres ---------------------------------------------------------

def walk_on_spheres_exit(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    delta_min: float,
    max_steps: int,
    rng: RngStream | int,
) -> np.ndarray:
    """Cone-exit position via jump-aware walk on spheres.

    Raises :class:`ApexStallError` when the inscribed ball radius falls
    below delta_min (the caller decides how to treat apex stalls) and
    :class:`MaxStepsError` past the step budget.
    """
    pts, status, _ = walk_on_spheres_exit_many(
        params, cone, np.asarray(x0, float), delta_min, max_steps, rng, 1
    )
    if status[0] == WOS_APEX_STALL:
        raise ApexStallError(f"ball radius below {delta_min} near the apex")
    if status[0] == WOS_MAX_STEPS:
        raise MaxStepsError(f"no cone exit within {max_steps} steps")
    return pts[0]


def walk_on_spheres_exit_many(
    params: StableParams,
    cone: ConeSpec,
    x0: np.ndarray,
    delta_min: float,
    max_steps: int,
    rng: RngStream | int,
    n: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized walk on spheres from a common start.

    Returns (points, status, steps) where status is one of the WOS_*
    codes; stalled and exhausted walkers report their current position.
    """
    if delta_min <= 0:
        raise ValueError("delta_min must be positive")
    x0 = np.asarray(x0, dtype=float)
    if not cone.contains(x0):
        raise ValueError("start point must lie inside the cone")
    gen = as_stream(rng).generator()
    alpha, d = params.alpha, params.d
    cur = np.tile(x0, (n, 1))
    status = np.full(n, WOS_MAX_STEPS, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        r = cone.boundary_distance_many(cur[active])
        stalled = r < delta_min
        if stalled.any():
            status[active[stalled]] = WOS_APEX_STALL
            active = active[~stalled]
            r = r[~stalled]
            if active.size == 0:
                break
        m = active.size
        radii = _beta_radius(gen, alpha, m)
        dirs = _uniform_directions(gen, m, d)
        cur[active] += (r * radii)[:, None] * dirs
        steps[active] += 1
        outside = ~cone.contains_many(cur[active])
        if outside.any():
            status[active[outside]] = WOS_EXITED
            active = active[~outside]
    return cur, status, steps


# -- persistence -------------------------------------------------------------

def save_paths_csv(path_or_bundle, filename: str) -> None:
    """Write paths as CSV rows (path, t, x_1..x_d, alive)."""
    if isinstance(path_or_bundle, PathGrid):
        bundle_iter = [(0, path_or_bundle)]
        d = path_or_bundle.d
    else:
        bundle_iter = [(i, path_or_bundle.path(i)) for i in range(len(path_or_bundle))]
        d = path_or_bundle.positions.shape[2]
    with open(filename, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "t"] + [f"x{i+1}" for i in range(d)] + ["alive"])
        for pid, pg in bundle_iter:
            kill = pg.kill_step if pg.kill_step is not None else -1
            for j in range(len(pg)):
                alive = 1 if (kill < 0 or j < kill) else 0
                writer.writerow(
                    [pid, repr(j * pg.h)]
                    + [repr(float(c)) for c in pg.positions[j]]
                    + [alive]
                )


def save_manifest(
    filename: str,
    params: StableParams,
    cone: ConeSpec,
    seed: int,
    h: float,
    extra: dict | None = None,
) -> None:
    doc = {
        "params": params.to_dict(),
        "cone": cone.to_dict(),
        "seed": int(seed),
        "h": float(h),
    }
    if extra:
        doc.update(extra)
    with open(filename, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_paths_csv(filename: str) -> list[PathGrid]:
    """Read paths written by :func:`save_paths_csv`."""
    rows: dict[int, list[tuple[float, list[float], int]]] = {}
    with open(filename, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 3
        for row in reader:
            pid = int(row[0])
            rows.setdefault(pid, []).append(
                (float(row[1]), [float(c) for c in row[2 : 2 + d]], int(row[-1]))
            )
    out = []
    for pid in sorted(rows):
        recs = rows[pid]
        ts = [r[0] for r in recs]
        h = ts[1] - ts[0] if len(ts) > 1 else 1.0
        positions = np.array([r[1] for r in recs])
        alive_flags = [r[2] for r in recs]
        kill = None if alive_flags[-1] == 1 else len(recs) - 1
        out.append(PathGrid(h, positions, kill))
    return out
