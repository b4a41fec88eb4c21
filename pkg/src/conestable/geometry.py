"""Cones in R^d and the spherical geometry used throughout the package.

A cone is determined by an open set of directions on the unit sphere: a
point x != 0 belongs to the cone iff x/|x| does.  Three kinds are supported:

* ``halfspace``   directions with positive inner product against a normal,
* ``circular``    directions within a fixed angle of an axis,
* ``punctured``   every direction (R^d minus the origin).

Apertures above pi/2 are representable for membership tests but are rejected
by :func:`boundary_distance`, which is what the walk-on-spheres routine needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .rng import RngStream, as_stream

UNIT_NORM_TOL = 1e-12

KINDS = ("halfspace", "circular", "punctured")


class UnsupportedApertureError(ValueError):
    """Raised when an operation needs an aperture at most pi/2."""


def _as_vector(x, d: int | None = None) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ValueError(f"expected dimension {d}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


@dataclass(frozen=True)
class Direction:
    """A unit vector in R^d (d >= 2), renormalized on construction."""

    components: np.ndarray

    def __init__(self, components) -> None:
        v = _as_vector(components)
        if v.shape[0] < 2:
            raise ValueError("directions need dimension >= 2")
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError("zero vector has no direction")
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            v = v / norm
        object.__setattr__(self, "components", v)
        self.components.setflags(write=False)

    @property
    def d(self) -> int:
        return self.components.shape[0]

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.components.astype(dtype)
        return self.components


def arg(x) -> np.ndarray:
    """Direction of a nonzero point: x / |x|."""
    v = _as_vector(x)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise ValueError("arg is undefined at the origin")
    return v / r


def invert(x) -> np.ndarray:
    """Sphere inversion x -> x / |x|^2 (fixes the unit sphere)."""
    v = _as_vector(x)
    r2 = float(v @ v)
    if r2 == 0.0:
        raise ValueError("inversion is undefined at the origin")
    return v / r2


def invert_many(xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    r2 = np.sum(xs * xs, axis=-1, keepdims=True)
    return xs / r2


@dataclass(frozen=True)
class ConeSpec:
    """Geometry of a cone with apex at the origin.

    Parameters
    ----------
    d : ambient dimension, at least 2.
    kind : one of ``halfspace``, ``circular``, ``punctured``.
    axis : unit axis (the normal, for a halfspace); None for punctured space.
    half_angle : aperture in (0, pi); required for ``circular`` only.
    """

    d: int
    kind: str
    axis: Direction | None = None
    half_angle: float | None = None
    _cos_half_angle: float = field(init=False, repr=False, default=1.0)

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ValueError("cones are supported in dimension >= 2")
        if self.kind not in KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.kind == "punctured":
            if self.axis is not None or self.half_angle is not None:
                raise ValueError("punctured space takes no axis or aperture")
            object.__setattr__(self, "_cos_half_angle", -1.0)
            return
        if self.axis is None:
            raise ValueError(f"{self.kind} cone needs an axis")
        if self.axis.d != self.d:
            raise ValueError("axis dimension does not match cone dimension")
        if self.kind == "halfspace":
            if self.half_angle is not None and not math.isclose(
                self.half_angle, math.pi / 2
            ):
                raise ValueError("a halfspace has aperture pi/2 by definition")
            object.__setattr__(self, "half_angle", math.pi / 2)
        else:
            if self.half_angle is None or not (0.0 < self.half_angle < math.pi):
                raise ValueError("circular cone needs half_angle in (0, pi)")
        object.__setattr__(self, "_cos_half_angle", math.cos(self.half_angle))

    # -- membership ------------------------------------------------------

    def contains(self, x) -> bool:
        return bool(self.contains_many(np.asarray(x, dtype=float)[None, :])[0])

    def contains_many(self, xs: np.ndarray) -> np.ndarray:
        """Vectorized membership for an (n, d) array of points."""
        xs = np.asarray(xs, dtype=float)
        if xs.ndim != 2 or xs.shape[1] != self.d:
            raise ValueError(f"expected shape (n, {self.d})")
        r = np.linalg.norm(xs, axis=1)
        nonzero = r > 0.0
        if self.kind == "punctured":
            return nonzero
        dots = xs @ self.axis.components
        if self.kind == "halfspace":
            return nonzero & (dots > 0.0)
        # cos(angle to axis) > cos(half_angle), valid for apertures in (0, pi)
        return nonzero & (dots > r * self._cos_half_angle)

    # -- metric helpers ---------------------------------------------------

    def boundary_distance(self, x) -> float:
        return float(self.boundary_distance_many(np.asarray(x, float)[None, :])[0])

    def boundary_distance_many(self, xs: np.ndarray) -> np.ndarray:
        """Distance to the cone's boundary for points inside the cone.

        For a circular cone of aperture psi <= pi/2 and a point at radius r
        making angle eta < psi with the axis, the nearest boundary point
        lies in the axis-point plane at distance r*sin(psi - eta).  The
        origin always belongs to the boundary, which gives the punctured
        case |x| and caps every other case at |x| as well.
        """
        xs = np.asarray(xs, dtype=float)
        inside = self.contains_many(xs)
        if not np.all(inside):
            raise ValueError("boundary_distance needs points inside the cone")
        r = np.linalg.norm(xs, axis=1)
        if self.kind == "punctured":
            return r
        if self.kind == "halfspace":
            return xs @ self.axis.components
        if self.half_angle > math.pi / 2 + 1e-15:
            raise UnsupportedApertureError(
                "boundary_distance supports apertures up to pi/2; "
                "use grid simulation for wider cones"
            )
        dots = np.clip((xs @ self.axis.components) / r, -1.0, 1.0)
        eta = np.arccos(dots)
        return np.minimum(r * np.sin(self.half_angle - eta), r)

    def angle_from_axis(self, xs: np.ndarray) -> np.ndarray:
        """Colatitude of each point relative to the cone axis, in [0, pi]."""
        if self.axis is None:
            raise ValueError("punctured space has no axis")
        xs = np.asarray(xs, dtype=float)
        r = np.linalg.norm(xs, axis=-1)
        dots = np.clip(xs @ self.axis.components / np.where(r > 0, r, 1.0), -1, 1)
        return np.arccos(dots)

    def signed_angle(self, xs: np.ndarray) -> np.ndarray:
        """Signed angle from the axis, for d = 2 only."""
        if self.d != 2 or self.axis is None:
            raise ValueError("signed angles need d = 2 and an axis")
        xs = np.asarray(xs, dtype=float)
        a = self.axis.components
        cross = xs[..., 1] * a[0] - xs[..., 0] * a[1]
        dots = xs @ a
        return np.arctan2(cross, dots)

    # -- sampling ---------------------------------------------------------

    def surface_sample(self, rng: RngStream | int, n: int = 1) -> np.ndarray:
        """Draw n directions uniformly (surface measure) from the cone's cap.

        Returns an (n, d) array of unit vectors.  For the punctured kind this
        is the whole sphere; otherwise the spherical cap of the aperture.
        """
        gen = as_stream(rng).generator()
        if self.kind == "punctured":
            return _uniform_sphere(gen, n, self.d)
        psi = self.half_angle
        eta = _sample_colatitude(gen, n, self.d, psi)
        return _assemble_about_axis(gen, self.axis.components, eta)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out: dict = {"d": self.d, "kind": self.kind}
        if self.axis is not None:
            out["axis"] = [float(c) for c in self.axis.components]
        if self.kind == "circular":
            out["half_angle"] = float(self.half_angle)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ConeSpec":
        kind = data["kind"]
        axis = Direction(data["axis"]) if data.get("axis") is not None else None
        return cls(
            d=int(data["d"]),
            kind=kind,
            axis=axis,
            half_angle=data.get("half_angle"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ConeSpec":
        return cls.from_dict(json.loads(text))


def halfspace(d: int, axis: Iterable[float] | None = None) -> ConeSpec:
    """Halfspace cone; default axis is the last coordinate direction."""
    if axis is None:
        v = np.zeros(d)
        v[-1] = 1.0
        axis = v
    return ConeSpec(d=d, kind="halfspace", axis=Direction(axis))

def circular_cone(d: int, half_angle: float, axis: Iterable[float] | None = None) -> ConeSpec:
    if axis is None:
        v = np.zeros(d)
        v[-1] = 1.0
        axis = v
    return ConeSpec(d=d, kind="circular", axis=Direction(axis), half_angle=half_angle)

def punctured_space(d: int) -> ConeSpec:
    return ConeSpec(d=d, kind="punctured")


# -- sphere sampling primitives -------------------------------------------

def _uniform_sphere(gen: np.random.Generator, n: int, d: int) -> np.ndarray:
    z = gen.standard_normal((n, d))
    norms = np.linalg.norm(z, axis=1)
    bad = norms < 1e-300
    while np.any(bad):
        z[bad] = gen.standard_normal((int(bad.sum()), d))
        norms[bad] = np.linalg.norm(z[bad], axis=1)
        bad = norms < 1e-300
    return z / norms[:, None]


def _sample_colatitude(
    gen: np.random.Generator, n: int, d: int, psi: float
) -> np.ndarray:
    """Colatitude with density proportional to sin^(d-2) on [0, psi]."""
    if d == 2:
        # the two signed meridians are folded into the azimuth step
        return gen.uniform(0.0, psi, size=n)
    out = np.empty(n)
    have = 0
    # envelope: uniform colatitude, accept with sin^(d-2)(eta)/max
    peak = math.sin(min(psi, math.pi / 2)) ** (d - 2)
    while have < n:
        m = max(n - have, 64)
        eta = gen.uniform(0.0, psi, size=m)
        acc = gen.random(m) * peak <= np.sin(eta) ** (d - 2)
        k = int(acc.sum())
        take = min(k, n - have)
        out[have : have + take] = eta[acc][:take]
        have += take
    return out


def _assemble_about_axis(
    gen: np.random.Generator, axis: np.ndarray, eta: np.ndarray
) -> np.ndarray:
    """Combine colatitudes with uniform azimuths around the given axis."""
    n = eta.shape[0]
    d = axis.shape[0]
    if d == 2:
        sign = np.where(gen.random(n) < 0.5, 1.0, -1.0)
        perp = np.array([-axis[1], axis[0]])
        return (
            np.cos(eta)[:, None] * axis[None, :]
            + (sign * np.sin(eta))[:, None] * perp[None, :]
        )
    w = gen.standard_normal((n, d))
    w -= (w @ axis)[:, None] * axis[None, :]
    norms = np.linalg.norm(w, axis=1)
    bad = norms < 1e-12
    while np.any(bad):
        m = int(bad.sum())
        fresh = gen.standard_normal((m, d))
        fresh -= (fresh @ axis)[:, None] * axis[None, :]
        w[bad] = fresh
        norms[bad] = np.linalg.norm(fresh, axis=1)
        bad = norms < 1e-12
    w /= norms[:, None]
    return np.cos(eta)[:, None] * axis[None, :] + np.sin(eta)[:, None] * w
