"""Statistical utilities shared by the experiment harness and the tests.

The two-sample Kolmogorov-Smirnov test here supports importance weights;
effective sample sizes enter the asymptotic p-value in place of the raw
counts.  Power-law fits are weighted least squares on log-log scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special


def kish_ess(weights: np.ndarray) -> float:
    """Kish effective sample size (sum w)^2 / sum w^2."""
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if s <= 0:
        return 0.0
    return float(s * s / np.sum(w * w))


@dataclass
class KsReport:
    statistic: float
    p_value: float
    ess_a: float
    ess_b: float

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "ess_a": self.ess_a,
            "ess_b": self.ess_b,
        }


def ks_two_sample(
    a: np.ndarray,
    b: np.ndarray,
    weights_a: np.ndarray | None = None,
    weights_b: np.ndarray | None = None,
) -> KsReport:
    """Weighted two-sample KS test with asymptotic p-value.

    The statistic is the sup distance between the weighted empirical CDFs,
    evaluated by interleaving both samples.  The p-value uses the Kolmogorov
    asymptotic with the Kish effective sizes; both must be at least 20.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    wa = np.ones_like(a) if weights_a is None else np.asarray(weights_a, float).ravel()
    wb = np.ones_like(b) if weights_b is None else np.asarray(weights_b, float).ravel()
    if a.shape != wa.shape or b.shape != wb.shape:
        raise ValueError("weights must match the sample shapes")
    if np.any(wa < 0) or np.any(wb < 0):
        raise ValueError("weights must be nonnegative")
    keep_a, keep_b = wa > 0, wb > 0
    a, wa = a[keep_a], wa[keep_a]
    b, wb = b[keep_b], wb[keep_b]
    if a.size == 0 or b.size == 0:
        raise ValueError("empty (or zero-weight) sample")
    if np.ptp(a) == 0.0 and np.ptp(b) == 0.0 and a[0] == b[0]:
        return KsReport(0.0, 1.0, kish_ess(wa), kish_ess(wb))
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise ValueError("degenerate constant sample")

    ess_a, ess_b = kish_ess(wa), kish_ess(wb)
    if min(ess_a, ess_b) < 20:
        raise ValueError(f"effective sample sizes too small: {ess_a:.1f}, {ess_b:.1f}")

    oa = np.argsort(a, kind="mergesort")
    ob = np.argsort(b, kind="mergesort")
    a_sorted, wa_sorted = a[oa], wa[oa]
    b_sorted, wb_sorted = b[ob], wb[ob]
    cwa = np.cumsum(wa_sorted) / wa_sorted.sum()
    cwb = np.cumsum(wb_sorted) / wb_sorted.sum()
    grid = np.concatenate([a_sorted, b_sorted])
    grid.sort(kind="mergesort")
    fa = cwa[np.searchsorted(a_sorted, grid, side="right") - 1]
    fb = cwb[np.searchsorted(b_sorted, grid, side="right") - 1]
    # searchsorted yields -1 before the first atom; that means CDF 0 there
    fa = np.where(np.searchsorted(a_sorted, grid, side="right") == 0, 0.0, fa)
    fb = np.where(np.searchsorted(b_sorted, grid, side="right") == 0, 0.0, fb)
    d = float(np.max(np.abs(fa - fb)))

    n_eff = math.sqrt(ess_a * ess_b / (ess_a + ess_b))
    lam = (n_eff + 0.12 + 0.11 / n_eff) * d
    p = float(special.kolmogorov(lam))
    return KsReport(d, min(max(p, 0.0), 1.0), ess_a, ess_b)


@dataclass
class PowerLawFit:
    slope: float
    slope_se: float
    intercept: float

    @property
    def amplitude(self) -> float:
        """Prefactor of the fitted power law, exp(intercept)."""
        return math.exp(self.intercept)

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "slope_se": self.slope_se,
            "intercept": self.intercept,
            "amplitude": self.amplitude,
        }


def loglog_fit(
    xs: np.ndarray, ys: np.ndarray, ses: np.ndarray | None = None
) -> PowerLawFit:
    """Weighted least-squares slope of log y against log x.

    ``ses`` are standard errors of y; they become log-scale sigmas se/y.
    Without them the fit is unweighted and the slope SE comes from the
    residual scatter.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size != ys.size or xs.size < 2:
        raise ValueError("need at least two matching points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive data")
    lx, ly = np.log(xs), np.log(ys)
    if ses is not None:
        sig = np.asarray(ses, dtype=float) / ys
        if np.any(sig <= 0):
            raise ValueError("standard errors must be positive")
        w = 1.0 / sig**2
    else:
        w = np.ones_like(lx)
    wsum = w.sum()
    mx = float(np.sum(w * lx) / wsum)
    my = float(np.sum(w * ly) / wsum)
    sxx = float(np.sum(w * (lx - mx) ** 2))
    if sxx == 0.0:
        raise ValueError("x values are all equal")
    slope = float(np.sum(w * (lx - mx) * (ly - my)) / sxx)
    intercept = my - slope * mx
    if ses is not None:
        slope_se = math.sqrt(1.0 / sxx)
    else:
        resid = ly - (intercept + slope * lx)
        dof = max(lx.size - 2, 1)
        slope_se = math.sqrt(float(np.sum(resid**2)) / dof / sxx)
    return PowerLawFit(slope, slope_se, intercept)


def richardson_extrapolate(
    value_h: float, value_h2: float, order: float = 1.0
) -> float:
    """Two-level extrapolation assuming error ~ c * h^order.

    ``value_h2`` is the estimate at the halved step.  With the default
    order this is the classic 2*v(h/2) - v(h).
    """
    factor = 2.0**order - 1.0
    return value_h2 + (value_h2 - value_h) / factor


def fitted_order(value_h: float, value_h2: float, value_h4: float) -> float | None:
    """Observed convergence order from three step-halved estimates."""
    num = value_h - value_h2
    den = value_h2 - value_h4
    if den == 0 or num / den <= 0:
        return None
    return math.log2(num / den)


def weighted_mean_se(
    values: np.ndarray, weights: np.ndarray | None = None
) -> tuple[float, float]:
    """Self-normalized weighted mean and its delta-method standard error."""
    v = np.asarray(values, dtype=float)
    if weights is None:
        m = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("inf")
        return m, se
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if s <= 0:
        raise ValueError("weights sum to zero")
    m = float(np.sum(w * v) / s)
    se = float(np.sqrt(np.sum((w * (v - m)) ** 2)) / s)
    return m, se


def ratio_se(
    num: np.ndarray, den: np.ndarray, weights: np.ndarray | None = None
) -> tuple[float, float]:
    """Ratio of weighted sums A/B over iid units, with delta-method SE."""
    a = np.asarray(num, dtype=float)
    b = np.asarray(den, dtype=float)
    w = np.ones_like(a) if weights is None else np.asarray(weights, float)
    A = float(np.sum(w * a))
    B = float(np.sum(w * b))
    if B == 0:
        raise ValueError("denominator sums to zero")
    r = A / B
    se = float(np.sqrt(np.sum((w * (a - r * b)) ** 2)) / abs(B))
    return r, se


def systematic_resample(weights: np.ndarray, n: int, rng) -> np.ndarray:
    """Systematic resampling: n indices drawn proportionally to weights.

    One uniform offset stratifies the whole draw, which keeps the particle
    count per ancestor within one of its expectation.
    """
    if not isinstance(rng, np.random.Generator):
        from .rng import as_stream

        rng = as_stream(rng).generator()
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    targets = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(w) / total, targets, side="right").clip(
        0, w.size - 1
    )


def permutation_correlation_test(
    x: np.ndarray,
    y: np.ndarray,
    rng,
    n_perm: int = 500,
) -> tuple[float, float]:
    """Permutation p-value for the absolute Pearson correlation of x and y."""
    if not isinstance(rng, np.random.Generator):
        from .rng import as_stream

        rng = as_stream(rng).generator()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 10:
        raise ValueError("need matching samples of size >= 10")
    if np.std(x) == 0 or np.std(y) == 0:
        return 0.0, 1.0
    obs = abs(float(np.corrcoef(x, y)[0, 1]))
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(y.size)
        if abs(float(np.corrcoef(x, y[perm])[0, 1])) >= obs:
            hits += 1
    return obs, (hits + 1) / (n_perm + 1)


@dataclass
class GateResult:
    """One named pass/fail check with its measured numbers."""

    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}
