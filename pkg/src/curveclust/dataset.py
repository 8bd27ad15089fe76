"""Discretely sampled curves, long-format CSV I/O and synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._core import DataError, ConfigError


@dataclass(frozen=True, eq=False)
class Curve:
    id: str
    xs: np.ndarray
    ys: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        xs = np.array(self.xs, dtype=float)
        ys = np.array(self.ys, dtype=float)
        if xs.ndim != 1 or ys.ndim != 1 or len(xs) != len(ys) or len(xs) < 1:
            raise DataError(f"curve {self.id!r}: xs and ys must be 1-d of equal positive length")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise DataError(f"curve {self.id!r}: non-finite values")
        if np.any(np.diff(xs) <= 0):
            raise DataError(f"curve {self.id!r}: xs must be strictly increasing")
        if self.label is not None:
            if int(self.label) != self.label or self.label < 0:
                raise DataError(f"curve {self.id!r}: label must be a non-negative integer")
            object.__setattr__(self, "label", int(self.label))
        xs.flags.writeable = False
        ys.flags.writeable = False
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def m(self) -> int:
        return len(self.xs)

    def __eq__(self, other):
        if not isinstance(other, Curve):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and np.array_equal(self.xs, other.xs) and np.array_equal(self.ys, other.ys))


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    curves: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        curves = tuple(self.curves)
        if len(curves) < 1:
            raise DataError("a dataset needs at least one curve")
        ids = [c.id for c in curves]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate curve ids")
        object.__setattr__(self, "curves", curves)

    def __len__(self):
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def __getitem__(self, i):
        return self.curves[i]

    def __eq__(self, other):
        if not isinstance(other, FunctionalDataset):
            return NotImplemented
        return self.curves == other.curves

    @property
    def n(self) -> int:
        return len(self.curves)

    @property
    def common_grid(self) -> bool:
        x0 = self.curves[0].xs
        return all(c.m == len(x0) and np.array_equal(c.xs, x0) for c in self.curves[1:])

    @property
    def ids(self) -> list:
        return [c.id for c in self.curves]

    @property
    def has_labels(self) -> bool:
        return all(c.label is not None for c in self.curves)

    @property
    def labels(self) -> Optional[np.ndarray]:
        if not self.has_labels:
            return None
        return np.array([c.label for c in self.curves], dtype=int)

    def grid(self) -> np.ndarray:
        """The shared abscissa vector; raises if curves use different grids."""
        self.require_common_grid()
        return self.curves[0].xs

    def matrix(self) -> np.ndarray:
        """Responses as an (n, m) array on the common grid."""
        self.require_common_grid()
        return np.vstack([c.ys for c in self.curves])

    def require_common_grid(self, what: str = "this operation"):
        if self.common_grid:
            return
        x0 = self.curves[0].xs
        off = [c.id for c in self.curves if c.m != len(x0) or not np.array_equal(c.xs, x0)]
        shown = ", ".join(off[:10]) + (" ..." if len(off) > 10 else "")
        raise DataError(f"{what} requires a common grid; curves off the grid of "
                        f"{self.curves[0].id!r}: {shown}")

    def subset(self, idx) -> "FunctionalDataset":
        return FunctionalDataset(tuple(self.curves[i] for i in idx))

    def with_labels(self, labels) -> "FunctionalDataset":
        return FunctionalDataset(tuple(Curve(c.id, c.xs, c.ys, int(l)) for c, l in zip(self.curves, labels)),
                                 dict(self.meta))

    @classmethod
    def from_matrix(cls, xs, Y, labels=None, ids=None, meta=None) -> "FunctionalDataset":
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        ids = ids if ids is not None else [f"c{i + 1}" for i in range(Y.shape[0])]
        labels = labels if labels is not None else [None] * Y.shape[0]
        return cls(tuple(Curve(i, xs, y, None if l is None else int(l)) for i, y, l in zip(ids, Y, labels)),
                   dict(meta or {}))


def load_csv(path) -> FunctionalDataset:
    """Read a long-format ``curve_id,x,y[,label]`` file."""
    path = Path(path)
    rows: dict = {}
    labels: dict = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header not in (["curve_id", "x", "y"], ["curve_id", "x", "y", "label"]):
            raise DataError(f"{path}:1: header must be curve_id,x,y[,label], got {','.join(header)}")
        has_label = len(header) == 4
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            cid = row[0].strip()
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise DataError(f"{path}:{line}: malformed number") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path}:{line}: non-finite value")
            if has_label:
                try:
                    lab = int(row[3])
                except ValueError:
                    raise DataError(f"{path}:{line}: malformed label {row[3]!r}") from None
                if labels.setdefault(cid, lab) != lab:
                    raise DataError(f"{path}:{line}: inconsistent label for curve {cid!r}")
            rows.setdefault(cid, []).append((x, y))
    if not rows:
        raise DataError(f"{path}: no data rows")
    curves = []
    for cid, obs in rows.items():
        obs.sort(key=lambda t: t[0])
        xs = np.array([o[0] for o in obs])
        if np.any(np.diff(xs) == 0):
            raise DataError(f"{path}: duplicate x within curve {cid!r}")
        curves.append(Curve(cid, xs, [o[1] for o in obs], labels.get(cid)))
    return FunctionalDataset(tuple(curves))


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(dataset: FunctionalDataset, path) -> None:
    with_label = dataset.has_labels
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id", "x", "y", "label"] if with_label else ["curve_id", "x", "y"])
        for c in dataset.curves:
            for x, y in zip(c.xs, c.ys):
                w.writerow([c.id, fmt(x), fmt(y), c.label] if with_label else [c.id, fmt(x), fmt(y)])


# --- generators -------------------------------------------------------------

WAVEFORM_GRID = np.arange(1, 22, dtype=float)
# (a, b) base-waveform pair per class, 1-based
WAVEFORM_PAIRS = {1: (1, 2), 2: (1, 3), 3: (2, 3)}


def waveform_base(k: int, t) -> np.ndarray:
    """Triangular base waveforms h_1 (peak at 11), h_2 (peak 15), h_3 (peak 7)."""
    t = np.asarray(t, dtype=float)
    shift = {1: 0.0, 2: 4.0, 3: -4.0}[k]
    return np.maximum(6.0 - np.abs(t - shift - 11.0), 0.0)


@dataclass(frozen=True)
class WaveformSpec:
    n: int
    seed: Optional[int] = 0
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.n < 3:
            raise ConfigError("waveform needs n >= 3")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")


def generate_waveform(spec: WaveformSpec) -> FunctionalDataset:
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.resize(np.array([1, 2, 3]), spec.n))
    u = rng.uniform(size=spec.n)
    eps = rng.standard_normal((spec.n, len(WAVEFORM_GRID)))
    H = {k: waveform_base(k, WAVEFORM_GRID) for k in (1, 2, 3)}
    Y = np.empty((spec.n, len(WAVEFORM_GRID)))
    for i, c in enumerate(labels):
        a, b = WAVEFORM_PAIRS[int(c)]
        Y[i] = u[i] * H[a] + (1 - u[i]) * H[b] + spec.noise_sd * eps[i]
    return FunctionalDataset.from_matrix(WAVEFORM_GRID, Y, labels,
                                         meta={"generator": "waveform", "u": u.tolist()})


def quota_labels(n: int, proportions, rng: np.random.Generator) -> np.ndarray:
    """Largest-remainder quotas, shuffled; labels are 1-based."""
    p = np.asarray(proportions, dtype=float)
    raw = p * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return rng.permutation(np.repeat(np.arange(1, len(p) + 1), counts))


def generate_regime_curves(K: int, R: int, n: int, degree: int = 0, seed: Optional[int] = 0,
                           noise_sd: float = 0.5, proportions: Optional[Sequence[float]] = None,
                           m: int = 200) -> FunctionalDataset:
    """Curves made of R contiguous polynomial regimes per cluster on [0, 1].

    Ground truth change points (as cut indices ``0 < ... < m``) and the
    per-regime noise scales are stored in ``dataset.meta``.
    """
    if min(K, R, n) < 1:
        raise ConfigError("K, R and n must be >= 1")
    if proportions is None:
        proportions = np.full(K, 1.0 / K)
    proportions = np.asarray(proportions, dtype=float)
    if len(proportions) != K or np.any(proportions < 0) or abs(proportions.sum() - 1) > 1e-9:
        raise ConfigError("proportions must be a simplex vector of length K")
    min_len = max(degree + 1, m // (2 * R))
    if R * min_len > m:
        raise ConfigError("too many regimes for the grid")
    rng = np.random.default_rng(seed)
    xs = np.linspace(0.0, 1.0, m)
    means, scales, cuts, regime_sd = [], [], [], []
    for _ in range(K):
        slack = m - R * min_len
        extra = np.diff(np.concatenate([[0], np.sort(rng.integers(0, slack + 1, R - 1)), [slack]]))
        b = np.concatenate([[0], np.cumsum(min_len + extra)])
        mu = np.empty(m)
        sd = np.empty(m)
        sds = []
        for r in range(R):
            seg = slice(b[r], b[r + 1])
            coef = rng.uniform(-5, 5, degree + 1)
            mu[seg] = np.polyval(coef[::-1], xs[seg] - xs[b[r]])
            sds.append(noise_sd * rng.uniform(0.5, 1.5))
            sd[seg] = sds[-1]
        means.append(mu)
        scales.append(sd)
        cuts.append(b.tolist())
        regime_sd.append(sds)
    labels = quota_labels(n, proportions, rng)
    Y = np.vstack([means[l - 1] + scales[l - 1] * rng.standard_normal(m) for l in labels])
    meta = {"generator": "regimes", "change_points": cuts, "regime_sd": regime_sd,
            "cluster_means": [mu.tolist() for mu in means]}
    return FunctionalDataset.from_matrix(xs, Y, labels, meta=meta)
