"""Regression design matrices: polynomial, truncated-power spline and B-spline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ._core import ConfigError, DataError

KINDS = ("polynomial", "spline", "bspline")
_ALIASES = {"poly": "polynomial", "polynomial": "polynomial", "spline": "spline", "bspline": "bspline"}


@dataclass(frozen=True)
class BasisSpec:
    """``degree`` is the polynomial degree, or spline order minus one.

    ``interior_knots`` is either a count (uniform placement over the data
    domain) or explicit sorted positions.
    """

    kind: str = "bspline"
    degree: int = 3
    interior_knots: Union[int, tuple] = 3
    domain: Optional[tuple] = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind)
        if kind is None:
            raise ConfigError(f"unknown basis kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.degree < 0:
            raise ConfigError("degree must be >= 0")
        k = self.interior_knots
        if isinstance(k, (int, np.integer)):
            if k < 0:
                raise ConfigError("knot count must be >= 0")
            object.__setattr__(self, "interior_knots", int(k))
        else:
            k = tuple(float(v) for v in k)
            if any(b <= a for a, b in zip(k, k[1:])):
                raise ConfigError("explicit knots must be strictly increasing")
            object.__setattr__(self, "interior_knots", k)
        if self.domain is not None:
            lo, hi = (float(v) for v in self.domain)
            if not hi > lo:
                raise ConfigError("basis domain must have positive width")
            object.__setattr__(self, "domain", (lo, hi))

    @property
    def order(self) -> int:
        return self.degree + 1

    def n_knots(self) -> int:
        k = self.interior_knots
        return k if isinstance(k, int) else len(k)

    @property
    def p(self) -> int:
        if self.kind == "polynomial":
            return self.degree + 1
        return self.degree + 1 + self.n_knots()

    def resolved(self, xs) -> "BasisSpec":
        """Same basis with domain and knot positions fixed from ``xs``."""
        if self.kind == "polynomial":
            return self
        xs = np.asarray(xs, dtype=float)
        domain = self.domain or (float(xs.min()), float(xs.max()))
        knots = self.interior_knots
        if isinstance(knots, int):
            knots = tuple(default_knots(domain, knots))
        return BasisSpec(self.kind, self.degree, knots, domain)

    def to_dict(self) -> dict:
        k = self.interior_knots
        return {"kind": self.kind, "degree": self.degree,
                "interior_knots": k if isinstance(k, int) else list(k),
                "domain": list(self.domain) if self.domain else None}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        k = d.get("interior_knots", 0)
        dom = d.get("domain")
        return cls(d["kind"], int(d["degree"]), k if isinstance(k, int) else tuple(k),
                   tuple(dom) if dom else None)


def default_knots(xs, count: int) -> np.ndarray:
    """``count`` knots splitting [min, max] into equal-width intervals."""
    if count < 0:
        raise ConfigError("knot count must be >= 0")
    xs = np.asarray(xs, dtype=float)
    lo, hi = float(xs.min()), float(xs.max())
    if not hi > lo:
        raise DataError("degenerate domain: all abscissas are equal")
    return lo + (hi - lo) * np.arange(1, count + 1) / (count + 1)


def _knots_for(xs, spec: BasisSpec, domain=None):
    domain = domain or spec.domain
    lo, hi = (float(np.min(xs)), float(np.max(xs))) if domain is None else (float(v) for v in domain)
    if not hi > lo:
        raise DataError("degenerate domain: all abscissas are equal")
    if isinstance(spec.interior_knots, int):
        knots = default_knots((lo, hi), spec.interior_knots)
    else:
        knots = np.asarray(spec.interior_knots, dtype=float)
        if len(knots) and (knots[0] <= lo or knots[-1] >= hi):
            raise DataError(f"knots must lie strictly inside the data domain ({lo}, {hi})")
    return lo, hi, knots


def build_design(xs: Sequence[float], spec: BasisSpec, domain=None) -> np.ndarray:
    """Evaluate the basis at ``xs``.

    The (min, max) used for knot placement and the clamped B-spline boundary
    comes from ``domain``, else ``spec.domain``, else ``xs`` itself.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 1 or not np.all(np.isfinite(xs)):
        raise DataError("abscissas must be a finite 1-d sequence")
    if spec.kind == "polynomial":
        return np.vander(xs, spec.degree + 1, increasing=True)
    lo, hi, knots = _knots_for(xs, spec, domain)
    if spec.kind == "spline":
        return truncated_power_design(xs, spec.degree, knots)
    return bspline_design(xs, spec.degree, knots, lo, hi)


def truncated_power_design(xs, degree: int, knots) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    cols = [np.vander(xs, degree + 1, increasing=True)]
    for kn in knots:
        if degree == 0:
            cols.append((xs >= kn).astype(float)[:, None])
        else:
            cols.append((np.maximum(xs - kn, 0.0) ** degree)[:, None])
    return np.hstack(cols)


def clamped_knot_vector(degree: int, knots, lo: float, hi: float) -> np.ndarray:
    k = degree + 1
    return np.concatenate([np.full(k, lo), np.asarray(knots, dtype=float), np.full(k, hi)])


def bspline_design(xs, degree: int, knots, lo: float, hi: float) -> np.ndarray:
    """B-spline basis of order ``degree + 1`` by the Cox-de Boor recursion.

    Intervals are half-open ``[t_i, t_{i+1})`` except the last one, which
    also contains the right end of the domain.
    """
    xs = np.asarray(xs, dtype=float)
    t = clamped_knot_vector(degree, knots, lo, hi)
    n_int = len(t) - 1
    B = np.zeros((len(xs), n_int))
    for i in range(n_int):
        if t[i + 1] > t[i]:
            B[:, i] = (xs >= t[i]) & (xs < t[i + 1])
    last = np.flatnonzero(t[1:] > t[:-1])[-1]
    B[xs >= hi, :] = 0.0
    B[xs >= hi, last] = 1.0
    for d in range(1, degree + 1):
        nb = n_int - d
        Bn = np.zeros((len(xs), nb))
        for i in range(nb):
            left = t[i + d] - t[i]
            right = t[i + d + 1] - t[i + 1]
            if left > 0:
                Bn[:, i] += (xs - t[i]) / left * B[:, i]
            if right > 0:
                Bn[:, i] += (t[i + d + 1] - xs) / right * B[:, i + 1]
        B = Bn
    return B
