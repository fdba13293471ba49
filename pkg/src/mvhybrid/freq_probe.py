"""Least-squares probe of the low-frequency bias of frozen negative-real poles.

The readout of a diagonal SSM is linear in its residues, so for fixed poles the
best achievable fit to a target sequence is an ordinary (ridge) least-squares
problem.  Targets are unit-RMS sums of sinusoids drawn from a frequency band;
the system is driven by a constant unit input, which keeps the DC path open.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SingularSystem
from .spectral import EigenInit
from .ssm_kernels import resolve_workers

DEFAULT_DT = 0.01
DEFAULT_SEQ_LEN = 1000
DEFAULT_RIDGE = 1e-8
DEFAULT_COMPONENTS = 8
CSV_FIELDS = ("init", "N", "band_lo", "band_hi", "seed", "rmse")


class BandKind(str, enum.Enum):
    LOW = "low"
    HIGH = "high"


@dataclass(frozen=True)
class FrequencyTarget:
    kind: BandKind
    band: tuple[float, float]
    values: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        lo, hi = self.band
        if not (0 <= lo < hi):
            raise DomainError(f"band must satisfy 0 <= lo < hi, got {self.band}")
        if hi * self.dt >= math.pi:
            raise DomainError(f"band top {hi} rad/s violates Nyquist for dt={self.dt}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0 or not np.all(np.isfinite(values)):
            raise DomainError("target values must be a nonempty finite 1-D sequence")
        object.__setattr__(self, "values", values)

    @property
    def seq_len(self) -> int:
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.seq_len)


def band_target(band, kind: BandKind | str, rng: np.random.Generator, seq_len: int = DEFAULT_SEQ_LEN,
                dt: float = DEFAULT_DT, components: int = DEFAULT_COMPONENTS) -> FrequencyTarget:
    """Sum of ``components`` cosines with frequencies uniform in ``band`` and random phases, unit RMS."""
    lo, hi = float(band[0]), float(band[1])
    omegas = rng.uniform(lo, hi, components)
    phases = rng.uniform(0.0, 2 * math.pi, components)
    t = dt * np.arange(seq_len)
    y = np.cos(np.outer(t, omegas) + phases).sum(axis=1)
    rms = math.sqrt(float(np.mean(y * y)))
    if rms == 0.0:
        raise DomainError("degenerate target with zero power")
    return FrequencyTarget(BandKind(kind), (lo, hi), y / rms, dt)


def step_features(eigs, seq_len: int, dt: float) -> np.ndarray:
    """Per-pole ZOH state trajectories under a constant unit input.

    Column j is ``x_k = (1 - exp(-lam_j * dt * (k + 1))) / lam_j``.
    """
    lam = np.asarray(eigs, dtype=float)
    if lam.ndim != 1 or lam.size == 0 or not np.all(lam > 0):
        raise DomainError("pole magnitudes must be a nonempty vector of positive reals")
    steps = dt * np.arange(1, seq_len + 1)
    return -np.expm1(-np.outer(steps, lam)) / lam


def _as_magnitudes(eigs) -> np.ndarray:
    lam = np.asarray(eigs, dtype=float)
    # accept either the poles themselves (negative) or their magnitudes
    return -lam if np.all(lam < 0) else lam


def fit_residues(eigs, target: FrequencyTarget, ridge: float = DEFAULT_RIDGE) -> tuple[np.ndarray, float]:
    """Exact minimiser of ``|Phi c - y|^2 + ridge |c|^2``; returns ``(c, rmse)``."""
    if ridge < 0:
        raise DomainError("ridge must be nonnegative")
    phi = step_features(_as_magnitudes(eigs), target.seq_len, target.dt)
    y = target.values
    n = phi.shape[1]
    if ridge == 0:
        if np.linalg.matrix_rank(phi) < n:
            raise SingularSystem(f"feature matrix is rank-deficient for poles {np.asarray(eigs).tolist()}")
        coef = np.linalg.lstsq(phi, y, rcond=None)[0]
    else:
        stacked = np.vstack([phi, math.sqrt(ridge) * np.eye(n)])
        coef = np.linalg.lstsq(stacked, np.concatenate([y, np.zeros(n)]), rcond=None)[0]
    resid = phi @ coef - y
    return coef, math.sqrt(float(np.mean(resid * resid)))


def default_bands(eigs) -> tuple[tuple[float, float], tuple[float, float]]:
    """Low band ``[0, min lam / 2]`` and high band ``[4 max lam, 8 max lam]``."""
    lam = _as_magnitudes(eigs)
    return (0.0, 0.5 * float(lam.min())), (4.0 * float(lam.max()), 8.0 * float(lam.max()))


def _target_rng(seed: int, band_index: int) -> np.random.Generator:
    # keyed on (seed, band) so every init sees the same targets
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, band_index])))


@dataclass(frozen=True)
class ProbeResult:
    init: str
    order: int
    seed: int
    low_err: float
    high_err: float

    @property
    def ratio(self) -> float:
        if self.low_err <= 0:
            raise ZeroDivisionError("ratio undefined when the low-band error is zero")
        return self.high_err / self.low_err


def probe_low_high(init: EigenInit, seed: int, low=None, high=None, ridge: float = DEFAULT_RIDGE,
                   seq_len: int = DEFAULT_SEQ_LEN, dt: float = DEFAULT_DT) -> ProbeResult:
    eigs = init.magnitudes()
    dlow, dhigh = default_bands(eigs)
    low, high = low or dlow, high or dhigh
    _, low_err = fit_residues(eigs, band_target(low, BandKind.LOW, _target_rng(seed, 0), seq_len, dt), ridge)
    _, high_err = fit_residues(eigs, band_target(high, BandKind.HIGH, _target_rng(seed, 1), seq_len, dt), ridge)
    return ProbeResult(init.label, init.order, seed, low_err, high_err)


@dataclass(frozen=True)
class SweepCell:
    init: str
    order: int
    band: tuple[float, float]
    seed: int
    rmse: float

    def row(self) -> list:
        return [self.init, self.order, repr(self.band[0]), repr(self.band[1]), self.seed, repr(self.rmse)]


def bias_sweep(inits, bands, seeds: int, ridge: float = DEFAULT_RIDGE, seq_len: int = DEFAULT_SEQ_LEN,
               dt: float = DEFAULT_DT, workers: int | None = 1) -> list[SweepCell]:
    """Full factorial ``init x band x seed`` sweep of :func:`fit_residues`.

    Targets depend only on ``(seed, band index)`` so inits are compared on
    identical data.  Output order is init-major, then band, then seed,
    regardless of ``workers``.
    """
    if seeds < 1:
        raise DomainError("seeds must be >= 1")
    bands = [tuple(map(float, b)) for b in bands]
    tasks = [(init, bi, band, seed) for init in inits for bi, band in enumerate(bands) for seed in range(seeds)]

    def run(task):
        init, bi, band, seed = task
        kind = BandKind.LOW if bi == 0 else BandKind.HIGH
        target = band_target(band, kind, _target_rng(seed, bi), seq_len, dt)
        _, rmse = fit_residues(init.magnitudes(), target, ridge)
        return SweepCell(init.label, init.order, band, seed, rmse)

    n = resolve_workers(workers)
    if n <= 1 or len(tasks) < 2:
        return [run(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(run, tasks))


def summarize_sweep(cells: list[SweepCell]) -> dict:
    """Per (init, N, band) mean/std of RMSE, and per init the ratio of the
    highest band's mean RMSE to the lowest band's."""
    groups: dict = {}
    for c in cells:
        groups.setdefault((c.init, c.order), {}).setdefault(c.band, []).append(c.rmse)
    out = []
    for (init, order), per_band in groups.items():
        ordered = sorted(per_band)
        stats = [{"band": list(b), "mean": float(np.mean(per_band[b])), "std": float(np.std(per_band[b])),
                  "count": len(per_band[b])} for b in ordered]
        entry = {"init": init, "N": order, "bands": stats}
        if len(ordered) >= 2 and stats[0]["mean"] > 0:
            entry["low_high_ratio"] = stats[-1]["mean"] / stats[0]["mean"]
        out.append(entry)
    return {"cells": out}


def sweep_csv(cells: list[SweepCell]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for c in cells:
        writer.writerow(c.row())
    return buf.getvalue()
