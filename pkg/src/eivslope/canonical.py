"""Repeated-measures data and its reduction to canonical statistics.

The raw data are ``n`` responses ``y_i`` and an ``n x r`` matrix of replicated
regressor readings ``x_ij``.  Rotating ``y`` and the row means of ``x`` by a
Helmert matrix separates the intercept direction (first coordinate) from the
``p = n - 1`` slope directions, and the within-group spread gives an
independent estimate of the regressor noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_GROUPS = 4


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


class DegenerateStatsError(ValueError):
    """Raised when all group means coincide so that ``||U||^2 = 0``."""


@dataclass(frozen=True)
class RepeatedMeasuresSample:
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(f"shape mismatch: y {y.shape}, x {x.shape}")
        if y.shape[0] < MIN_GROUPS:
            raise DataError(f"need at least {MIN_GROUPS} groups, got n={y.shape[0]}")
        if x.shape[1] < 1:
            raise DataError("need at least one replicate per group")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError("all entries must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def r(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class CanonicalStats:
    """The rotated statistics ``(Z0, Z, U0, U, S)``.

    ``m = 0`` (single replicate) means ``S`` carries no information; only the
    known-variance estimators may be used on such data.
    """

    z0: float
    z: np.ndarray
    u0: float
    u: np.ndarray
    s: float
    p: int
    m: int
    r: int

    @property
    def known_variance_only(self) -> bool:
        return self.m == 0


@dataclass(frozen=True)
class SufficientStats:
    """Scalars consumed by every estimator.

    Fields may also hold equal-length numpy arrays (one entry per Monte Carlo
    replication); estimator functions are written elementwise.
    """

    t_uz: float
    u_sq: float
    z_sq: float
    u0: float
    z0: float
    s: float
    p: int
    m: int
    r: int

    @classmethod
    def from_arrays(cls, u, z, s, *, u0=0.0, z0=0.0, m, r=2) -> "SufficientStats":
        """Batch constructor from ``(reps, p)`` arrays of U and Z."""
        u = np.asarray(u, dtype=float)
        z = np.asarray(z, dtype=float)
        return cls(
            t_uz=np.einsum("ij,ij->i", u, z),
            u_sq=np.einsum("ij,ij->i", u, u),
            z_sq=np.einsum("ij,ij->i", z, z),
            u0=np.asarray(u0, dtype=float),
            z0=np.asarray(z0, dtype=float),
            s=np.asarray(s, dtype=float),
            p=u.shape[1],
            m=m,
            r=r,
        )


def load_csv(path) -> RepeatedMeasuresSample:
    """Read ``y,x1,...,xr`` rows; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [
            row
            for row in csv.reader(fh)
            if row and any(c.strip() for c in row) and not row[0].lstrip().startswith("#")
        ]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "y":
        raise DataError(f"{path}: header must be 'y,x1,...,xr', got {rows[0]}")
    width = len(header)
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise DataError(f"{path}: ragged row {lineno}: expected {width} fields, got {len(row)}")
        try:
            values.append([float(c) for c in row])
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric cell in row {lineno}: {exc}") from None
    arr = np.array(values, dtype=float).reshape(-1, width)
    return RepeatedMeasuresSample(y=arr[:, 0], x=arr[:, 1:])


def helmert_q(n: int) -> np.ndarray:
    """Orthogonal ``n x n`` Helmert matrix whose first row is ``1/sqrt(n)``.

    Row ``k + 1`` holds ``k`` copies of ``1/sqrt(k(k+1))``, then
    ``-k/sqrt(k(k+1))``, then zeros.
    """
    if n < 2:
        raise ValueError(f"helmert_q needs n >= 2, got {n}")
    q = np.zeros((n, n))
    q[0, :] = 1.0 / math.sqrt(n)
    for k in range(1, n):
        c = 1.0 / math.sqrt(k * (k + 1))
        q[k, :k] = c
        q[k, k] = -k * c
    return q


def canonicalize(sample: RepeatedMeasuresSample) -> CanonicalStats:
    n, r = sample.n, sample.r
    q = helmert_q(n)
    xbar = sample.x.mean(axis=1)
    zz = q @ sample.y
    uu = q @ xbar
    s = float(np.sum((sample.x - xbar[:, None]) ** 2)) / r
    return CanonicalStats(
        z0=float(zz[0]),
        z=zz[1:],
        u0=float(uu[0]),
        u=uu[1:],
        s=s,
        p=n - 1,
        m=n * (r - 1),
        r=r,
    )


def sufficient_stats(cs: CanonicalStats) -> SufficientStats:
    u_sq = float(cs.u @ cs.u)
    scale = max(1.0, u_sq + cs.u0**2)
    if u_sq <= 1e-26 * scale:
        raise DegenerateStatsError("all group means are equal (||U||^2 = 0)")
    return SufficientStats(
        t_uz=float(cs.u @ cs.z),
        u_sq=u_sq,
        z_sq=float(cs.z @ cs.z),
        u0=cs.u0,
        z0=cs.z0,
        s=cs.s,
        p=cs.p,
        m=cs.m,
        r=cs.r,
    )


def stats_from_sample(sample: RepeatedMeasuresSample) -> SufficientStats:
    return sufficient_stats(canonicalize(sample))
