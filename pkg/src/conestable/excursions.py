"""Recurrent extensions of the killed cone process by excursion gluing.

The killed process treats the apex as its cemetery.  A self-similar
recurrent extension behaves like the killed process away from the origin
and re-enters the cone from the apex, either by a jump, with start
measure dr/r^(1 + alpha*gamma) pi(dtheta), or continuously, approximated
here by starts at a small radius delta conditioned to survive past a
length floor.  Local time at the apex is not observable in simulation,
so excursion arrivals are booked in an arbitrary local-time unit and all
statistical checks downstream are shape or ratio tests.

Both start measures are infinite near zero, so a truncation (r_min for
jump starts, zeta_min for excursion lengths) is mandatory; the builders
report what the truncation removed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .conditioning import _resolve_harmonic
from .geometry import ConeSpec
from .rng import RngStream, as_stream
from .stable import PathGrid, killed_paths_full, sample_isotropic_increment
from .stats import PowerLawFit, loglog_fit


@dataclass(frozen=True)
class ExcursionSpec:
    """How the extension leaves the apex.

    kind is "jump" or "continuous".  Jump starts draw the radius from the
    Pareto-type density proportional to r^(-1 - alpha*gamma) truncated to
    r >= r_min and the direction from angular_law (None means the uniform
    surface law on the cone's cap; a callable takes a numpy Generator and
    a count and returns unit rows).  angular_mass is the total mass of
    the angular measure, used only for rate bookkeeping; it defaults to
    the cap's surface measure for the uniform law and to 1 for a custom
    one.  Continuous starts sit at delta times the cone axis and are
    conditioned by rejection on living past zeta_min; c_hat calibrates
    the arrival rate c_hat * zeta_min^(-beta/alpha) per local-time unit
    and can be taken from a survival-curve amplitude.
    """

    kind: str
    gamma: float | None = None
    angular_law: object | None = None
    angular_mass: float | None = None
    r_min: float | None = None
    zeta_min: float | None = None
    delta: float | None = None
    c_hat: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("jump", "continuous"):
            raise ValueError("kind must be 'jump' or 'continuous'")
        if self.kind == "jump":
            if self.gamma is None or self.r_min is None:
                raise ValueError("jump extensions need gamma and r_min")
            if self.r_min <= 0:
                raise ValueError("r_min must be positive")
        else:
            if self.zeta_min is None or self.delta is None:
                raise ValueError("continuous extensions need zeta_min and delta")
            if self.zeta_min <= 0 or self.delta <= 0:
                raise ValueError("zeta_min and delta must be positive")
        if self.c_hat <= 0:
            raise ValueError("c_hat must be positive")


@dataclass
class GluedPath:
    """Excursions laid end to end, touching the apex at every join.

    Each excursion is a PathGrid of the nodes strictly inside the cone;
    a complete excursion died at the following grid node, so its lifetime
    is len(positions) * h.  complete is False for the last excursion when
    the horizon ran out mid-flight and for excursions cut by the
    per-excursion cap.  local_time is the arbitrary-unit budget the
    arrivals consumed.  truncated_rate reports the aggregate arrival rate
    of the jump starts removed below r_min; time_deficit reports the
    simulated time discarded with rejected short excursions of the
    continuous construction.
    """

    d: int
    h: float
    excursions: list[PathGrid]
    start_times: np.ndarray
    complete: np.ndarray
    total_time: float
    local_time: float
    truncated_rate: float = 0.0
    time_deficit: float = 0.0
    partial_last: bool = False
    capped: int = 0

    @property
    def excursion_count(self) -> int:
        return len(self.excursions)

    def lifetimes(self) -> np.ndarray:
        """Lifetimes of the complete excursions, in path order."""
        return np.array(
            [
                len(p.positions) * self.h
                for p, c in zip(self.excursions, self.complete)
                if c
            ]
        )

    def starts(self) -> np.ndarray:
        """Start position of every excursion, shape (count, d)."""
        return np.array([p.positions[0] for p in self.excursions])

    def to_csv(self, filename: str) -> None:
        """Segmented CSV: excursion index, absolute time, coordinates."""
        cols = ",".join(f"x{j}" for j in range(self.d))
        with open(filename, "w") as fh:
            fh.write(f"excursion,t,{cols}\n")
            for i, (p, t0) in enumerate(zip(self.excursions, self.start_times)):
                times = t0 + self.h * np.arange(len(p.positions))
                for t, row in zip(times, p.positions):
                    vals = ",".join(f"{v:.17g}" for v in row)
                    fh.write(f"{i},{t:.17g},{vals}\n")


def _uniform_cap_mass(cone: ConeSpec) -> float:
    """Surface measure of the cone's spherical cap."""
    if cone.kind == "punctured":
        psi = math.pi
    else:
        psi = cone.half_angle
    if cone.d == 2:
        return 2.0 * psi
    if cone.d == 3:
        return 2.0 * math.pi * (1.0 - math.cos(psi))
    from scipy import integrate, special

    ring = 2.0 * math.pi ** ((cone.d - 1) / 2.0) / special.gamma((cone.d - 1) / 2.0)
    band, _ = integrate.quad(lambda e: math.sin(e) ** (cone.d - 2), 0.0, psi)
    return ring * band


def _step_until_exit(params, cone, x0, h, gen, max_steps, block=256):
    """Walk the grid from x0 until the first node outside the cone.

    Returns (positions, died): positions holds the start and every node
    strictly inside; died says the exit was seen within max_steps.
    """
    chunks = [np.asarray(x0, float)[None, :]]
    cur = np.asarray(x0, float)
    done = 0
    while done < max_steps:
        m = int(min(block, max_steps - done))
        inc = sample_isotropic_increment(params, h, gen, m)
        traj = cur + np.cumsum(inc, axis=0)
        inside = cone.contains_many(traj)
        if inside.all():
            chunks.append(traj)
            cur = traj[-1]
            done += m
            continue
        k = int(np.argmin(inside))
        if k:
            chunks.append(traj[:k])
        return np.concatenate(chunks, axis=0), True
    return np.concatenate(chunks, axis=0), False


def _budget_done(total_time, horizon, count, n_excursions, ltime, lt_budget):
    if total_time >= horizon:
        return True
    if n_excursions is not None and count >= n_excursions:
        return True
    if lt_budget is not None and ltime >= lt_budget:
        return True
    return False


def _validate_budgets(horizon, h, n_excursions, local_time_budget):
    if h <= 0:
        raise ValueError("step must be positive")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if math.isinf(horizon) and n_excursions is None and local_time_budget is None:
        raise ValueError(
            "an infinite horizon needs n_excursions or local_time_budget"
        )


def build_jump_extension(
    spec: ExcursionSpec,
    params,
    cone: ConeSpec,
    horizon: float,
    h: float,
    rng: RngStream | int,
    harmonic=None,
    n_excursions: int | None = None,
    local_time_budget: float | None = None,
    max_excursion_time: float | None = None,
) -> GluedPath:
    """Glue excursions that leave the apex by a jump.

    Starts follow the truncated measure r^(-1 - alpha*gamma) dr pi(dtheta)
    on r >= spec.r_min; each excursion runs as a killed path until it
    leaves the cone, and arrivals consume Exp(rate) local time where rate
    integrates the truncated start measure.  The build stops at whichever
    budget runs out first: glued time (horizon), excursion count, or
    local time.  max_excursion_time caps a single excursion's simulated
    length; capped excursions stay in the glue but are not complete.
    """
    if spec.kind != "jump":
        raise ValueError("spec.kind must be 'jump'")
    _validate_budgets(horizon, h, n_excursions, local_time_budget)
    _, beta, _ = _resolve_harmonic(params, cone, harmonic)
    sup = beta / params.alpha
    if not 0.0 < spec.gamma < sup:
        raise ValueError(
            f"gamma must lie strictly inside (0, {sup:.6g}) for this cone"
        )
    ag = params.alpha * spec.gamma
    if spec.angular_mass is not None:
        mass = float(spec.angular_mass)
    elif spec.angular_law is None:
        mass = _uniform_cap_mass(cone)
    else:
        mass = 1.0
    rate = mass * spec.r_min ** (-ag) / ag

    stream = as_stream(rng)
    # scalar draws, angular draws and path increments live on separate
    # substreams so excursion i is reproducible whatever the budgets are
    scalars = stream.child(0, 0).generator()
    excursions: list[PathGrid] = []
    start_times: list[float] = []
    complete: list[bool] = []
    total_time = 0.0
    local_time = 0.0
    partial_last = False
    capped = 0
    cap_steps = None
    if max_excursion_time is not None:
        cap_steps = max(int(round(max_excursion_time / h)), 1)

    while not _budget_done(
        total_time, horizon, len(excursions), n_excursions,
        local_time, local_time_budget,
    ):
        gap = scalars.exponential(1.0 / rate)
        if local_time_budget is not None and local_time + gap > local_time_budget:
            local_time = local_time_budget
            break
        local_time += gap
        idx = len(excursions)
        r = spec.r_min * scalars.uniform() ** (-1.0 / ag)
        if spec.angular_law is None:
            theta = cone.surface_sample(stream.child(1, idx), 1)[0]
        else:
            theta = np.asarray(
                spec.angular_law(stream.child(1, idx).generator(), 1), float
            ).reshape(-1)
        x0 = r * theta
        remaining = horizon - total_time
        max_steps = int(math.ceil(remaining / h)) if math.isfinite(remaining) else 1 << 62
        if cap_steps is not None:
            max_steps = min(max_steps, cap_steps)
        pos, died = _step_until_exit(
            params, cone, x0, h, stream.child(2, idx).generator(), max_steps
        )
        excursions.append(PathGrid(h, pos, None))
        start_times.append(total_time)
        complete.append(died)
        total_time += len(pos) * h
        if not died:
            if cap_steps is not None and len(pos) - 1 >= cap_steps:
                capped += 1
            else:
                partial_last = True
                break

    return GluedPath(
        d=params.d,
        h=h,
        excursions=excursions,
        start_times=np.asarray(start_times),
        complete=np.asarray(complete, dtype=bool),
        total_time=total_time,
        local_time=local_time,
        truncated_rate=rate,
        partial_last=partial_last,
        capped=capped,
    )


def build_continuous_extension(
    spec: ExcursionSpec,
    params,
    cone: ConeSpec,
    horizon: float,
    h: float,
    rng: RngStream | int,
    harmonic=None,
    n_excursions: int | None = None,
    local_time_budget: float | None = None,
    max_excursion_time: float | None = None,
) -> GluedPath:
    """Glue excursions approximating the continuous leave from the apex.

    Each excursion starts at delta times the cone axis and is conditioned
    by rejection on surviving past zeta_min, which approximates the
    excursion measure seen from a start radius shrinking to zero.  Those
    excursions arrive at rate c_hat * zeta_min^(-beta/alpha) per
    local-time unit; the simulated time of the rejected short attempts is
    reported as time_deficit.  Budgets and the cap behave exactly as in
    the jump builder.
    """
    if spec.kind != "continuous":
        raise ValueError("spec.kind must be 'continuous'")
    _validate_budgets(horizon, h, n_excursions, local_time_budget)
    if cone.axis is None:
        raise ValueError("the continuous extension needs a cone with an axis")
    if spec.delta**params.alpha > 0.25 * spec.zeta_min:
        raise ValueError(
            "delta^alpha must sit well below zeta_min for the start to"
            " approximate the apex; shrink delta or raise zeta_min"
        )
    _, beta, _ = _resolve_harmonic(params, cone, harmonic)
    n1 = int(round(spec.zeta_min / h))
    if n1 < 1 or abs(n1 * h - spec.zeta_min) > 1e-9 * max(spec.zeta_min, 1.0):
        raise ValueError(f"zeta_min {spec.zeta_min} is not a grid time for step {h}")
    rate = spec.c_hat * spec.zeta_min ** (-beta / params.alpha)
    x_start = spec.delta * cone.axis.components

    stream = as_stream(rng)
    # keeping arrival scalars, rejection batches and continuations on
    # separate substreams couples the i-th accepted excursion across
    # reruns with perturbed delta or zeta_min, which the sensitivity
    # checks lean on
    scalars = stream.child(0, 0).generator()
    excursions: list[PathGrid] = []
    start_times: list[float] = []
    complete: list[bool] = []
    total_time = 0.0
    local_time = 0.0
    partial_last = False
    capped = 0
    time_deficit = 0.0
    attempts = 0
    accepted = 0
    cap_steps = None
    if max_excursion_time is not None:
        cap_steps = max(int(round(max_excursion_time / h)), n1 + 1)

    survivors: list[np.ndarray] = []
    batch_size = 256
    batch_index = 0

    def refill():
        nonlocal attempts, time_deficit, batch_index
        bnd = killed_paths_full(
            params, cone, x_start, n1, h, stream.child(3, batch_index), batch_size
        )
        batch_index += 1
        attempts += len(bnd)
        for i in range(len(bnd)):
            ks = int(bnd.kill_step[i])
            if ks < 0:
                survivors.append(bnd.positions[i].copy())
            else:
                time_deficit += ks * h
        got = accepted + len(survivors)
        if attempts >= 4000 and got < 1e-3 * attempts:
            raise ValueError(
                "rejection acceptance fell below 1e-3; delta and zeta_min"
                " are mismatched for this cone"
            )

    while not _budget_done(
        total_time, horizon, len(excursions), n_excursions,
        local_time, local_time_budget,
    ):
        gap = scalars.exponential(1.0 / rate)
        if local_time_budget is not None and local_time + gap > local_time_budget:
            local_time = local_time_budget
            break
        local_time += gap
        while not survivors:
            refill()
        head = survivors.pop()
        idx = len(excursions)
        remaining = horizon - total_time
        max_steps = int(math.ceil(remaining / h)) if math.isfinite(remaining) else 1 << 62
        if cap_steps is not None:
            max_steps = min(max_steps, cap_steps)
        tail_steps = max_steps - n1
        if tail_steps > 0:
            tail, died = _step_until_exit(
                params, cone, head[-1], h,
                stream.child(2, idx).generator(), tail_steps,
            )
            pos = np.concatenate([head[:-1], tail], axis=0)
        else:
            pos, died = head[: max_steps + 1], False
        accepted += 1
        excursions.append(PathGrid(h, pos, None))
        start_times.append(total_time)
        complete.append(died)
        total_time += len(pos) * h
        if not died:
            if cap_steps is not None and len(pos) - 1 >= cap_steps:
                capped += 1
            else:
                partial_last = True
                break

    return GluedPath(
        d=params.d,
        h=h,
        excursions=excursions,
        start_times=np.asarray(start_times),
        complete=np.asarray(complete, dtype=bool),
        total_time=total_time,
        local_time=local_time,
        time_deficit=time_deficit,
        partial_last=partial_last,
        capped=capped,
    )


@dataclass
class OccupationHistogram:
    """Occupied time per (log-radial, angular) bin inside a window.

    mass sums node dwell time h over all excursions; mass_se treats
    excursions as the independent units.  total and total_se aggregate
    the window.  Angular bins hold colatitude from the cone axis, or the
    full [0, pi] for the punctured cone.  radial_contrib keeps each
    excursion's radial row so slope errors can be jackknifed; a single
    long excursion lifts many bins at once, which per-bin errors alone
    cannot see.
    """

    r_edges: np.ndarray
    ang_edges: np.ndarray
    mass: np.ndarray
    mass_se: np.ndarray
    total: float
    total_se: float
    window: tuple
    total_time: float
    h: float
    radial_contrib: np.ndarray | None = None

    def radial_fit(self) -> PowerLawFit:
        """Power-law slope of the radial occupation density in r."""
        widths = np.diff(self.r_edges)
        radial = self.mass.sum(axis=1)
        radial_se = np.sqrt((self.mass_se**2).sum(axis=1))
        centers = np.sqrt(self.r_edges[:-1] * self.r_edges[1:])
        return loglog_fit(centers, radial / widths, radial_se / widths)

    def radial_slope_jackknife(self, n_groups: int = 20) -> tuple[float, float]:
        """Radial slope with a delete-group jackknife standard error.

        Groups excursions round-robin, refits with each group removed
        and spreads the leave-outs.  Honest about the cross-bin
        correlation that a long excursion induces, unlike the per-bin
        errors feeding radial_fit.
        """
        if self.radial_contrib is None:
            raise ValueError("histogram was built without radial_contrib")
        widths = np.diff(self.r_edges)
        centers = np.sqrt(self.r_edges[:-1] * self.r_edges[1:])
        radial = self.radial_contrib.sum(axis=0)
        n = len(self.radial_contrib)
        n_groups = min(n_groups, n)
        slopes = []
        for gi in range(n_groups):
            part = radial - self.radial_contrib[gi::n_groups].sum(axis=0)
            if np.any(part <= 0):
                continue
            slopes.append(loglog_fit(centers, part / widths).slope)
        slopes = np.asarray(slopes)
        k = len(slopes)
        if k < 2:
            raise ValueError("too few usable jackknife groups")
        full = loglog_fit(centers, radial / widths).slope
        se = math.sqrt((k - 1) / k * np.sum((slopes - slopes.mean()) ** 2))
        return full, se

    def angular_occupation(self) -> tuple[np.ndarray, np.ndarray]:
        """Mass and standard error per angular bin, radially summed."""
        return self.mass.sum(axis=0), np.sqrt((self.mass_se**2).sum(axis=0))


def occupation_histogram(
    glued: GluedPath,
    cone: ConeSpec,
    window: tuple = (0.1, 3.0),
    n_radial: int = 12,
    n_angular: int = 6,
    min_bin_time: float | None = None,
) -> OccupationHistogram:
    """Time-occupation histogram of a glued path over a radial window.

    Radial bins are log-spaced across the window.  Every radial bin must
    hold more than min_bin_time (default 100 h) of occupation, otherwise
    the window is too wide for the simulated mass and this raises.
    """
    lo, hi = float(window[0]), float(window[1])
    if not 0 < lo < hi:
        raise ValueError("window must satisfy 0 < lo < hi")
    if min_bin_time is None:
        min_bin_time = 100.0 * glued.h
    r_edges = np.geomspace(lo, hi, n_radial + 1)
    if cone.kind == "punctured":
        ang_hi = math.pi
    else:
        ang_hi = cone.half_angle
    ang_edges = np.linspace(0.0, ang_hi, n_angular + 1)

    mass = np.zeros((n_radial, n_angular))
    sumsq = np.zeros_like(mass)
    totals = []
    radial_contrib = np.zeros((glued.excursion_count, n_radial))
    for ei, p in enumerate(glued.excursions):
        r = np.linalg.norm(p.positions, axis=1)
        if cone.kind == "punctured":
            ang = np.arccos(
                np.clip(p.positions[:, -1] / np.where(r > 0, r, 1.0), -1, 1)
            )
        else:
            ang = cone.angle_from_axis(p.positions)
        sel = (r >= lo) & (r < hi)
        contrib, _, _ = np.histogram2d(
            r[sel], ang[sel], bins=[r_edges, ang_edges]
        )
        contrib *= glued.h
        mass += contrib
        sumsq += contrib**2
        totals.append(contrib.sum())
        radial_contrib[ei] = contrib.sum(axis=1)
    n = len(totals)
    if n < 2:
        raise ValueError("need at least two excursions for occupation errors")
    var = np.maximum(sumsq - mass**2 / n, 0.0) * n / (n - 1)
    mass_se = np.sqrt(var)
    totals = np.asarray(totals)
    total_se = math.sqrt(max(totals.var(ddof=1) * n, 0.0))
    radial = mass.sum(axis=1)
    if np.any(radial <= min_bin_time):
        k = int(np.argmin(radial))
        raise ValueError(
            f"radial bin {k} holds {radial[k]:.3g} time units, below the"
            f" floor {min_bin_time:.3g}; shrink the window or glue more"
            " excursions"
        )
    return OccupationHistogram(
        r_edges=r_edges,
        ang_edges=ang_edges,
        mass=mass,
        mass_se=mass_se,
        total=float(mass.sum()),
        total_se=float(total_se),
        window=(lo, hi),
        total_time=glued.total_time,
        h=glued.h,
        radial_contrib=radial_contrib,
    )


@dataclass(frozen=True)
class AdmissibilityReport:
    """Which recurrent extensions exist for the given exponents.

    target "killed" is the extension of the process killed on leaving
    the cone; target "absorbed" extends the process conditioned to be
    absorbed continuously at the apex.  jump_gamma_sup is the upper end
    of the open admissible interval for jump-type extensions (zero means
    the interval is empty); continuous_gamma is the scaling exponent the
    continuous-type extension carries when it exists.
    """

    target: str
    alpha: float
    beta: float
    d: int
    gamma: float | None
    continuous_allowed: bool
    continuous_gamma: float | None
    jump_gamma_sup: float
    jump_admissible: bool | None
    reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "alpha": self.alpha,
            "beta": self.beta,
            "d": self.d,
            "gamma": self.gamma,
            "continuous_allowed": self.continuous_allowed,
            "continuous_gamma": self.continuous_gamma,
            "jump_gamma_sup": self.jump_gamma_sup,
            "jump_admissible": self.jump_admissible,
            "reason": self.reason,
        }

    def to_json(self, filename: str | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if filename is not None:
            with open(filename, "w") as fh:
                fh.write(text)
        return text


def check_extension_conditions(
    alpha: float,
    beta: float,
    d: int,
    target: str = "killed",
    gamma: float | None = None,
) -> AdmissibilityReport:
    """Admissibility arithmetic for both recurrent-extension targets.

    For the killed process the continuous extension always exists and
    carries exponent beta/alpha, while jump types need gamma strictly
    inside (0, beta/alpha).  For the apex-absorbed process the shifted
    exponent d + 2*beta - alpha must be positive, jump types need gamma
    strictly inside (0, min((d + 2*beta - alpha)/alpha, 1)), and the
    continuous extension exists exactly when beta < (2*alpha - d)/2.
    """
    if not 0.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (0, 2)")
    if not 0.0 < beta < alpha:
        raise ValueError("beta must lie in (0, alpha)")
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if target not in ("killed", "absorbed"):
        raise ValueError("target must be 'killed' or 'absorbed'")

    if target == "killed":
        sup = beta / alpha
        cont = True
        cont_gamma = beta / alpha
        reason = None
    else:
        shifted = d + 2.0 * beta - alpha
        if shifted <= 0.0:
            return AdmissibilityReport(
                target, alpha, beta, d, gamma,
                continuous_allowed=False,
                continuous_gamma=None,
                jump_gamma_sup=0.0,
                jump_admissible=False if gamma is not None else None,
                reason="needs d + 2*beta - alpha > 0",
            )
        sup = min(shifted / alpha, 1.0)
        cont = beta < (2.0 * alpha - d) / 2.0
        cont_gamma = shifted / alpha if cont else None
        reason = None if cont else "continuous leave needs beta < (2*alpha - d)/2"

    admissible = None
    if gamma is not None:
        admissible = bool(0.0 < gamma < sup)
    return AdmissibilityReport(
        target, alpha, beta, d, gamma,
        continuous_allowed=cont,
        continuous_gamma=cont_gamma,
        jump_gamma_sup=sup,
        jump_admissible=admissible,
        reason=reason,
    )
