"""Synthetic datasets with prescribed sufficient statistics.

The corn-yield data behind the two worked examples are not public, but the
printed estimates depend on the data only through ``(U'Z, ||U||^2, ||Z||^2, S, Z0, U0)``.
:func:`make_fixture` builds raw repeated-measures data with exactly those
statistics: ``U`` lies on the first axis, ``Z`` in the span of the first two,
and both are rotated back through the Helmert matrix.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import numpy as np

from .canonical import RepeatedMeasuresSample, helmert_q, load_csv


def make_fixture(n: int, r: int, *, t_uz: float, u_sq: float, z_sq: float, s: float, z0: float = 0.0, u0: float = 0.0) -> RepeatedMeasuresSample:
    if n < 4:
        raise ValueError("n must be >= 4")
    if u_sq <= 0 or s < 0:
        raise ValueError("need u_sq > 0 and s >= 0")
    if r == 1 and s != 0:
        raise ValueError("a single replicate forces s = 0")
    resid = z_sq - t_uz**2 / u_sq
    if resid < -1e-12 * max(1.0, z_sq):
        raise ValueError("Cauchy-Schwarz violated: need z_sq >= t_uz^2 / u_sq")
    p = n - 1
    u = np.zeros(p)
    z = np.zeros(p)
    u[0] = math.sqrt(u_sq)
    z[0] = t_uz / u[0]
    z[1] = math.sqrt(max(resid, 0.0))
    q = helmert_q(n)
    xbar = q.T @ np.concatenate([[u0], u])
    y = q.T @ np.concatenate([[z0], z])
    x = np.repeat(xbar[:, None], r, axis=1)
    if r > 1:
        # same zero-sum, unit-norm deviation pattern in every group
        w = helmert_q(r)[1]
        x = x + math.sqrt(r * s / n) * w[None, :]
    return RepeatedMeasuresSample(y=y, x=x)


def table2_targets() -> dict:
    """Statistics matching the n = 11, r = 2 example: ``S/||U||^2 = 1421.5/706.41``,
    LS 0.23972, IR 1.17756, and raw means chosen to reproduce the intercept column."""
    n, u_sq = 11, 706.41
    t = 0.23972 * u_sq
    ls, mm = 0.23972, -0.28904
    xbar = (109.353 - 75.031) / (ls - mm)
    ybar = 75.031 + ls * xbar
    return dict(n=n, r=2, t_uz=t, u_sq=u_sq, z_sq=1.17756 * t, s=1421.5, z0=math.sqrt(n) * ybar, u0=math.sqrt(n) * xbar)


def table1_targets() -> dict:
    """Statistics for the n = 25, r = 2 example.

    Only ratios are recoverable from the printed slopes: ``S/||U||^2`` from the
    LS/MM pair, ``||Z||^2/U'Z`` from IR.  The scale ``||U||^2 = 1000`` is arbitrary.
    """
    n, u_sq = 25, 1000.0
    p, m = n - 1, n
    ls, mm, ir = 0.47693, 0.53151, 0.93854
    ratio = (m / p) * (1.0 - ls / mm)
    t = ls * u_sq
    xbar = (65.219 - 61.531) / (mm - ls)
    ybar = 65.219 + ls * xbar
    return dict(n=n, r=2, t_uz=t, u_sq=u_sq, z_sq=ir * t, s=ratio * u_sq, z0=math.sqrt(n) * ybar, u0=math.sqrt(n) * xbar)


PRESETS = {"table1": table1_targets, "table2": table2_targets}


def preset_fixture(name: str) -> RepeatedMeasuresSample:
    t = PRESETS[name]()
    return make_fixture(t.pop("n"), t.pop("r"), **t)


def write_csv(sample: RepeatedMeasuresSample, path) -> None:
    path = Path(path)
    header = ["y"] + [f"x{j + 1}" for j in range(sample.r)]
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for yi, xi in zip(sample.y, sample.x):
            fh.write(",".join(repr(float(v)) for v in (yi, *xi)) + "\n")


def bundled_path(name: str) -> Path:
    """Path of a shipped fixture CSV (``table1`` or ``table2``)."""
    return Path(str(resources.files("eivslope") / "data" / f"{name}_fixture.csv"))


def load_bundled(name: str) -> RepeatedMeasuresSample:
    return load_csv(bundled_path(name))


if __name__ == "__main__":
    out = Path(__file__).parent / "data"
    out.mkdir(exist_ok=True)
    for key in PRESETS:
        write_csv(preset_fixture(key), out / f"{key}_fixture.csv")
