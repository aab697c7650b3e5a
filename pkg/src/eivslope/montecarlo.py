"""Monte Carlo bias and MSE of slope estimators.

Replications are grouped into fixed-size chunks.  Chunk ``c`` of stream ``s``
draws from ``Philox(SeedSequence(seed, spawn_key=(s, c)))`` so every chunk has
its own counter-based stream, and per-chunk accumulators are merged in chunk
order.  The result is therefore identical for any number of workers.
"""

from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .canonical import CanonicalStats, RepeatedMeasuresSample, SufficientStats, helmert_q
from .estimators import resolve

CHUNK_SIZE = 5000
WORKERS_ENV = "EIVSLOPE_WORKERS"


class ConfigError(ValueError):
    pass


class AllReplicationsFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n: int
    r: int
    beta: float
    tau2: float
    sigma2: float
    xi: tuple[float, ...]
    estimators: tuple[str, ...]
    reps: int
    seed: int
    level: str = "canonical"
    alpha: float = 0.0
    theta: float = 0.0
    stream_id: int = 0
    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.n < 4:
            raise ConfigError(f"n must be >= 4, got {self.n}")
        if self.r < 1:
            raise ConfigError(f"r must be >= 1, got {self.r}")
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise ConfigError("tau2 and sigma2 must be positive")
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.level not in ("canonical", "raw"):
            raise ConfigError(f"level must be 'canonical' or 'raw', got {self.level!r}")
        xi = tuple(float(v) for v in self.xi)
        if len(xi) != self.n - 1:
            raise ConfigError(f"xi must have length p = {self.n - 1}, got {len(xi)}")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "pairs", tuple(tuple(pr) for pr in self.pairs))
        for a, b in self.pairs:
            if a not in self.estimators or b not in self.estimators:
                raise ConfigError(f"pair ({a}, {b}) must name estimators in the study")

    @property
    def p(self) -> int:
        return self.n - 1

    @property
    def m(self) -> int:
        return self.n * (self.r - 1)

    @property
    def lam(self) -> float:
        return float(np.dot(self.xi, self.xi)) / (2.0 * self.sigma2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        """Build from the JSON schema.

        ``xi`` is one of ``{"constant_fill": c}``, ``{"sigma_xi2": v}`` (fill
        with ``sqrt(v)``) or ``{"explicit": [...]}``.
        """
        d = dict(d)
        try:
            n = int(d.pop("n"))
            xi_mode = d.pop("xi")
            if not isinstance(xi_mode, Mapping) or len(xi_mode) != 1:
                raise ConfigError("xi must be a one-key object")
            (mode, val), = xi_mode.items()
            if mode == "constant_fill":
                xi = (float(val),) * (n - 1)
            elif mode == "sigma_xi2":
                xi = (math.sqrt(float(val)),) * (n - 1)
            elif mode == "explicit":
                xi = tuple(float(v) for v in val)
            else:
                raise ConfigError(f"unknown xi mode {mode!r}")
            known = {f for f in cls.__dataclass_fields__} - {"n", "xi"}
            extra = set(d) - known
            if extra:
                raise ConfigError(f"unknown config fields: {sorted(extra)}")
            return cls(
                n=n,
                r=int(d.pop("r", 2)),
                beta=float(d.pop("beta")),
                tau2=float(d.pop("tau2")),
                sigma2=float(d.pop("sigma2")),
                xi=xi,
                estimators=tuple(d.pop("estimators")),
                reps=int(d.pop("reps")),
                seed=int(d.pop("seed", 0)),
                pairs=tuple(tuple(pr) for pr in d.pop("pairs", ())),
                **{k: d[k] for k in d},
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        xi = {"constant_fill": self.xi[0]} if len(set(self.xi)) == 1 else {"explicit": list(self.xi)}
        return {
            "n": self.n,
            "r": self.r,
            "beta": self.beta,
            "tau2": self.tau2,
            "sigma2": self.sigma2,
            "xi": xi,
            "estimators": list(self.estimators),
            "reps": self.reps,
            "seed": self.seed,
            "level": self.level,
            "alpha": self.alpha,
            "theta": self.theta,
            "stream_id": self.stream_id,
            "pairs": [list(pr) for pr in self.pairs],
        }


def load_config(path) -> SimConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    return SimConfig.from_dict(raw)


def chunk_rng(seed: int, stream_id: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(stream_id, chunk))
    return np.random.Generator(np.random.Philox(ss))


# -- samplers ------------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalBatch:
    z0: np.ndarray
    z: np.ndarray
    u0: np.ndarray
    u: np.ndarray
    s: np.ndarray

    def stats(self, m: int, r: int) -> SufficientStats:
        return SufficientStats.from_arrays(self.u, self.z, self.s, u0=self.u0, z0=self.z0, m=m, r=r)


def _draw_canonical(cfg: SimConfig, rng: np.random.Generator, size: int) -> CanonicalBatch:
    xi = np.asarray(cfg.xi)
    p, m = cfg.p, cfg.m
    sd_u, sd_z = math.sqrt(cfg.sigma2), math.sqrt(cfg.tau2)
    u = xi + sd_u * rng.standard_normal((size, p))
    z = cfg.beta * xi + sd_z * rng.standard_normal((size, p))
    u0 = cfg.theta + sd_u * rng.standard_normal(size)
    z0 = cfg.alpha + cfg.beta * cfg.theta + sd_z * rng.standard_normal(size)
    s = cfg.sigma2 * rng.chisquare(m, size) if m > 0 else np.zeros(size)
    return CanonicalBatch(z0, z, u0, u, s)


def _draw_raw(cfg: SimConfig, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    n, r = cfg.n, cfg.r
    q = helmert_q(n)
    gamma = q.T @ np.concatenate([[cfg.theta], cfg.xi])
    alpha0 = cfg.alpha / math.sqrt(n)
    y = alpha0 + cfg.beta * gamma + math.sqrt(cfg.tau2) * rng.standard_normal((size, n))
    x = gamma[:, None] + math.sqrt(r * cfg.sigma2) * rng.standard_normal((size, n, r))
    return y, x


def canonicalize_batch(y: np.ndarray, x: np.ndarray) -> CanonicalBatch:
    """Vectorized canonicalization of ``(reps, n)`` responses and ``(reps, n, r)`` readings."""
    n, r = x.shape[1], x.shape[2]
    q = helmert_q(n)
    xbar = x.mean(axis=2)
    zz = y @ q.T
    uu = xbar @ q.T
    s = np.sum((x - xbar[:, :, None]) ** 2, axis=(1, 2)) / r
    return CanonicalBatch(zz[:, 0], zz[:, 1:], uu[:, 0], uu[:, 1:], s)


def sample_canonical(cfg: SimConfig, rng: np.random.Generator, size: int | None = None):
    """One draw as :class:`CanonicalStats`, or a :class:`CanonicalBatch` of ``size`` draws."""
    b = _draw_canonical(cfg, rng, 1 if size is None else size)
    if size is not None:
        return b
    return CanonicalStats(
        z0=float(b.z0[0]), z=b.z[0], u0=float(b.u0[0]), u=b.u[0], s=float(b.s[0]), p=cfg.p, m=cfg.m, r=cfg.r
    )


def sample_raw(cfg: SimConfig, rng: np.random.Generator, size: int | None = None):
    """One :class:`RepeatedMeasuresSample`, or ``(y, x)`` arrays of ``size`` draws."""
    y, x = _draw_raw(cfg, rng, 1 if size is None else size)
    if size is not None:
        return y, x
    return RepeatedMeasuresSample(y=y[0], x=x[0])


# -- accumulation ----------------------------------------------------------------


@dataclass
class Moments:
    """Running count, mean and centred sum of squares."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "Moments":
        if x.size == 0:
            return cls()
        mu = float(np.mean(x))
        return cls(int(x.size), mu, float(np.sum((x - mu) ** 2)))

    def merge(self, other: "Moments") -> "Moments":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return Moments(n, mean, m2)

    @property
    def se(self) -> float:
        if self.n < 2:
            return math.nan
        return math.sqrt(self.m2 / (self.n - 1) / self.n)


@dataclass
class ChunkAccumulator:
    err: dict[str, Moments] = field(default_factory=dict)
    sq: dict[str, Moments] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)
    pair_diff: dict[tuple[str, str], Moments] = field(default_factory=dict)

    def merge(self, other: "ChunkAccumulator") -> "ChunkAccumulator":
        out = ChunkAccumulator()
        for k in other.err:
            out.err[k] = self.err.get(k, Moments()).merge(other.err[k])
            out.sq[k] = self.sq.get(k, Moments()).merge(other.sq[k])
            out.failures[k] = self.failures.get(k, 0) + other.failures[k]
        for k in other.pair_diff:
            out.pair_diff[k] = self.pair_diff.get(k, Moments()).merge(other.pair_diff[k])
        return out


def _estimator_fns(cfg: SimConfig, custom: Mapping[str, Callable] | None) -> list[tuple[str, Callable]]:
    custom = dict(custom or {})
    fns = []
    for name in cfg.estimators:
        fns.append((name, custom[name] if name in custom else resolve(name).fn))
    return fns


def _run_chunk(cfg: SimConfig, chunk: int, custom: Mapping[str, Callable] | None = None) -> ChunkAccumulator:
    start = chunk * CHUNK_SIZE
    size = min(CHUNK_SIZE, cfg.reps - start)
    rng = chunk_rng(cfg.seed, cfg.stream_id, chunk)
    if cfg.level == "raw":
        batch = canonicalize_batch(*_draw_raw(cfg, rng, size))
    else:
        batch = _draw_canonical(cfg, rng, size)
    st = batch.stats(cfg.m, cfg.r)
    acc = ChunkAccumulator()
    errs = {}
    for name, fn in _estimator_fns(cfg, custom):
        with np.errstate(all="ignore"):
            est = np.broadcast_to(np.asarray(fn(st), dtype=float), (size,))
        d = est - cfg.beta
        ok = np.isfinite(d)
        errs[name] = d
        acc.err[name] = Moments.of(d[ok])
        acc.sq[name] = Moments.of(d[ok] ** 2)
        acc.failures[name] = int(size - ok.sum())
    for a, b in cfg.pairs:
        diff = errs[a] ** 2 - errs[b] ** 2
        acc.pair_diff[(a, b)] = Moments.of(diff[np.isfinite(diff)])
    return acc


def _run_chunk_star(args):
    return _run_chunk(*args)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


# -- results -------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorRecord:
    bias: float
    mse: float
    se_bias: float
    se_mse: float
    failures: int
    n_used: int


@dataclass(frozen=True)
class PairRecord:
    """Mean and SE of ``(A - beta)^2 - (B - beta)^2`` under common random numbers."""

    mean_diff: float
    se_diff: float
    n_used: int


@dataclass(frozen=True)
class SimResult:
    config: SimConfig
    lam: float
    records: dict[str, EstimatorRecord]
    pairs: dict[tuple[str, str], PairRecord]
    label: str = ""

    def to_csv(self, full_precision: bool = False, sep: str = ",") -> str:
        fmt = (lambda x: repr(float(x))) if full_precision else (lambda x: format(x, ".6g"))

        def num(x):
            return "NA" if not math.isfinite(x) else fmt(x)

        buf = io.StringIO()
        if self.label:
            buf.write(f"# block: {self.label}\n")
        buf.write(f"# lambda = {num(self.lam)}\n")
        buf.write(f"# config = {json.dumps(self.config.to_dict(), sort_keys=True)}\n")
        buf.write(sep.join(["estimator", "bias", "se_bias", "mse", "se_mse", "failures"]) + "\n")
        for name, rec in self.records.items():
            row = [name, num(rec.bias), num(rec.se_bias), num(rec.mse), num(rec.se_mse), str(rec.failures)]
            buf.write(sep.join(row) + "\n")
        for (a, b), pr in self.pairs.items():
            buf.write(f"# paired {a}-{b}: mean_diff = {num(pr.mean_diff)}, se = {num(pr.se_diff)}\n")
        return buf.getvalue()


def run_study(
    cfg: SimConfig,
    *,
    workers: int | None = None,
    custom: Mapping[str, Callable] | None = None,
    label: str = "",
) -> SimResult:
    """Simulated bias and MSE for every estimator in ``cfg``.

    Replications where an estimator is non-finite are counted as failures and
    excluded from that estimator's averages.  ``custom`` maps extra names in
    ``cfg.estimators`` to callables on :class:`SufficientStats`; these run
    in-process only.
    """
    for name in cfg.estimators:
        if not custom or name not in custom:
            resolve(name)
    n_chunks = -(-cfg.reps // CHUNK_SIZE)
    workers = worker_count() if workers is None else max(1, workers)
    if custom:
        workers = 1
    if workers == 1 or n_chunks == 1:
        parts = [_run_chunk(cfg, c, custom) for c in range(n_chunks)]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, n_chunks)) as pool:
            parts = list(pool.map(_run_chunk_star, [(cfg, c) for c in range(n_chunks)]))
    total = ChunkAccumulator()
    for part in parts:
        total = total.merge(part)
    records = {}
    for name in cfg.estimators:
        e, q = total.err[name], total.sq[name]
        if e.n == 0:
            raise AllReplicationsFailedError(f"{name}: all {cfg.reps} replications failed")
        records[name] = EstimatorRecord(
            bias=e.mean, mse=q.mean, se_bias=e.se, se_mse=q.se, failures=total.failures[name], n_used=e.n
        )
    pairs = {k: PairRecord(v.mean, v.se, v.n) for k, v in total.pair_diff.items()}
    return SimResult(config=cfg, lam=cfg.lam, records=records, pairs=pairs, label=label)


# -- simulation design ----------------------------------------------------------------

TABLE_N = (10, 30, 100)
TABLE_BLOCKS = ((0.1, 1.0), (0.1, 10.0), (5.0, 1.0), (5.0, 10.0))
TABLE4_ESTIMATORS = ("LS", "TLS", "BR1", "TBR1", "BR5", "TBR5", "GG", "TGG")
TABLE4_PAIRS = (("TLS", "LS"), ("TBR1", "BR1"), ("TBR5", "BR5"), ("TGG", "GG"))


@dataclass(frozen=True)
class LambdaCell:
    n: int
    sigma_xi2: float
    sigma2: float
    lam: float


def table3_lambdas() -> list[LambdaCell]:
    """``lam = p sigma_xi2 / (2 sigma2)`` over the simulation design."""
    return [
        LambdaCell(n, sx, s2, (n - 1) * sx / (2.0 * s2)) for sx, s2 in TABLE_BLOCKS for n in TABLE_N
    ]


def table4_config(
    n: int, sigma_xi2: float, sigma2: float, reps: int, seed: int, *, stream_id: int = 0, estimators=None
) -> SimConfig:
    if estimators is None:
        estimators = tuple(e for e in TABLE4_ESTIMATORS if not (n == 10 and e.endswith("5")))
    pairs = tuple(pr for pr in TABLE4_PAIRS if pr[0] in estimators and pr[1] in estimators)
    return SimConfig(
        n=n,
        r=2,
        beta=-5.0,
        tau2=10.0,
        sigma2=sigma2,
        xi=(math.sqrt(sigma_xi2),) * (n - 1),
        estimators=tuple(estimators),
        reps=reps,
        seed=seed,
        stream_id=stream_id,
        pairs=pairs,
    )


def table4_suite(reps: int, seed: int, *, workers: int | None = None) -> list[SimResult]:
    """The 4 parameter blocks x 3 sample sizes; BR5/TBR5 are skipped at n = 10."""
    out = []
    for i, (sx, s2) in enumerate(TABLE_BLOCKS):
        for j, n in enumerate(TABLE_N):
            cfg = table4_config(n, sx, s2, reps, seed, stream_id=3 * i + j)
            out.append(run_study(cfg, workers=workers, label=f"sigma_xi2={sx:g} sigma2={s2:g} n={n}"))
    return out
