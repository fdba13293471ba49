"""Transfer functions of diagonal continuous-time SSMs and their total variation.

A diagonal SSM with eigenvalues ``a_j``, residues ``c_j`` and feedthrough ``D``
has the partial-fraction transfer function

    G(is) = sum_j c_j / (i s - a_j) + D

and its frequency bias is measured by the total variation of ``G`` over a band,
``V_a^b = int_a^b |dG(is)/ds| ds``.  This module evaluates ``G``, integrates
the total variation adaptively, and provides the closed-form high-frequency
expressions for real and complex spectra.
"""
from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidSpectrum, InvalidThreshold, LengthMismatch, NonConvergence, NotRealSpectrum

DEFAULT_PANEL_BUDGET = 10_000

# Gauss-Kronrod 7/15 rule on [-1, 1] (QUADPACK qk15 constants).
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])
# full 15-point node/weight arrays, symmetric about 0
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_KRONROD_W = np.concatenate([_WGK[:-1], _WGK[::-1]])
_GAUSS_W = np.zeros(15)
_GAUSS_W[[1, 3, 5]] = _WG[:3]
_GAUSS_W[[13, 11, 9]] = _WG[:3]
_GAUSS_W[7] = _WG[3]


@dataclass(frozen=True)
class TransferFunction:
    """Partial-fraction form of a stable diagonal SSM.

    Eigenvalues must all lie strictly in the left half plane.
    """

    eigenvalues: np.ndarray
    residues: np.ndarray
    feedthrough: float = 0.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.eigenvalues, dtype=complex)).ravel()
        c = np.atleast_1d(np.asarray(self.residues, dtype=complex)).ravel()
        if a.shape != c.shape:
            raise LengthMismatch(f"{a.size} eigenvalues but {c.size} residues")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(c))):
            raise InvalidSpectrum("eigenvalues and residues must be finite")
        if np.any(a.real >= 0):
            raise InvalidSpectrum("every eigenvalue needs a strictly negative real part")
        a.flags.writeable = False
        c.flags.writeable = False
        object.__setattr__(self, "eigenvalues", a)
        object.__setattr__(self, "residues", c)
        object.__setattr__(self, "feedthrough", float(self.feedthrough))

    @classmethod
    def from_real(cls, lambdas: Sequence[float], residues: Sequence[complex] | None = None,
                  feedthrough: float = 0.0) -> "TransferFunction":
        """Build a real-spectrum system with eigenvalues ``-|lambda_j|``."""
        lam = np.abs(np.asarray(lambdas, dtype=float))
        if residues is None:
            residues = np.ones_like(lam)
        return cls(-lam, residues, feedthrough)

    @property
    def order(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def is_real_spectrum(self) -> bool:
        return bool(np.all(self.eigenvalues.imag == 0))


@dataclass(frozen=True)
class FrequencyInterval:
    lo: float
    hi: float = math.inf

    def __post_init__(self):
        if not self.lo >= 0:
            raise ValueError(f"interval lower end must be >= 0, got {self.lo}")
        if not self.hi > self.lo:
            raise ValueError(f"interval needs hi > lo, got [{self.lo}, {self.hi}]")


class InitScheme(enum.Enum):
    CASCADED = "cascaded"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class EigenInit:
    """Eigenvalue initialisation: cascaded ``lambda_j = j`` or uniform ``lambda_j = 1``."""

    scheme: InitScheme
    order: int

    def __post_init__(self):
        object.__setattr__(self, "scheme", InitScheme(self.scheme))
        if int(self.order) < 1:
            raise ValueError("order must be a positive integer")
        object.__setattr__(self, "order", int(self.order))

    def magnitudes(self) -> np.ndarray:
        if self.scheme is InitScheme.CASCADED:
            return np.arange(1, self.order + 1, dtype=float)
        return np.ones(self.order)

    @property
    def label(self) -> str:
        return self.scheme.value


def build_init(init: EigenInit, residues: Sequence[complex], feedthrough: float = 0.0) -> TransferFunction:
    residues = np.atleast_1d(np.asarray(residues, dtype=complex))
    if residues.size != init.order:
        raise LengthMismatch(f"init of order {init.order} given {residues.size} residues")
    return TransferFunction(-init.magnitudes(), residues, feedthrough)


# --------------------------------------------------------------------------- evaluation

def transfer_eval(G: TransferFunction, s):
    """G(is); ``s`` may be a scalar or an array of real frequencies."""
    s_arr = np.asarray(s, dtype=float)
    den = 1j * s_arr[..., None] - G.eigenvalues
    out = np.sum(G.residues / den, axis=-1) + G.feedthrough
    return complex(out) if out.ndim == 0 else out


def transfer_derivative(G: TransferFunction, s):
    """dG(is)/ds = sum_j -i c_j / (i s - a_j)^2.  The feedthrough drops out."""
    s_arr = np.asarray(s, dtype=float)
    den = 1j * s_arr[..., None] - G.eigenvalues
    out = np.sum(-1j * G.residues / den**2, axis=-1)
    return complex(out) if out.ndim == 0 else out


def derivative_magnitude(G: TransferFunction, s):
    out = np.abs(transfer_derivative(G, s))
    return float(out) if np.ndim(out) == 0 else out


def modal_derivative_magnitude(G: TransferFunction, s):
    """sum_j |c_j| / |i s - a_j|^2, the triangle-inequality majorant of |dG/ds|."""
    s_arr = np.asarray(s, dtype=float)
    den = np.abs(1j * s_arr[..., None] - G.eigenvalues) ** 2
    out = np.sum(np.abs(G.residues) / den, axis=-1)
    return float(out) if out.ndim == 0 else out


def magnitude_response(G: TransferFunction, omegas: Sequence[float]) -> np.ndarray:
    omegas = np.asarray(omegas, dtype=float)
    if omegas.size == 0:
        raise ValueError("omegas must be nonempty")
    if np.any(omegas < 0):
        raise ValueError("frequencies must be >= 0")
    return np.abs(np.atleast_1d(transfer_eval(G, omegas)))


# --------------------------------------------------------------------------- quadrature

def _gk15(f, a: float, b: float) -> tuple[float, float]:
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    y = f(mid + half * _NODES)
    kronrod = half * float(_KRONROD_W @ y)
    gauss = half * float(_GAUSS_W @ y)
    return kronrod, abs(kronrod - gauss)


def adaptive_integrate(f, a: float, b: float, rel_tol: float = 1e-8,
                       max_panels: int = DEFAULT_PANEL_BUDGET) -> tuple[float, float, int]:
    """Globally adaptive Gauss-Kronrod quadrature of a vectorised ``f`` on [a, b].

    Returns ``(value, error_estimate, panels)``.  The panel with the largest
    error estimate is bisected until the summed estimate falls below
    ``rel_tol * |value|``.  ``a`` and ``b`` must be finite.
    """
    if not 0 < rel_tol < 1:
        raise ValueError("rel_tol must lie in (0, 1)")
    val, err = _gk15(f, a, b)
    heap = [(-err, a, b, val, err)]
    total, total_err = val, err
    panels = 1
    floor = 64 * np.finfo(float).eps
    while total_err > max(rel_tol * abs(total), floor * abs(total)):
        if panels >= max_panels:
            raise NonConvergence(
                f"adaptive quadrature exceeded {max_panels} panels "
                f"(estimate {total:.6g} +/- {total_err:.3g})")
        _, lo, hi, v, e = heapq.heappop(heap)
        m = 0.5 * (lo + hi)
        v1, e1 = _gk15(f, lo, m)
        v2, e2 = _gk15(f, m, hi)
        heapq.heappush(heap, (-e1, lo, m, v1, e1))
        heapq.heappush(heap, (-e2, m, hi, v2, e2))
        total += v1 + v2 - v
        total_err += e1 + e2 - e
        panels += 1
    # re-sum to shed accumulated cancellation from the running updates
    total = math.fsum(item[3] for item in heap)
    total_err = math.fsum(item[4] for item in heap)
    return total, total_err, panels


def _integrate_band(integrand, iv: FrequencyInterval, rel_tol: float, max_panels: int) -> float:
    if math.isinf(iv.hi):
        lo = iv.lo

        def mapped(t):
            # s = lo + t/(1-t); ds = dt/(1-t)^2
            one_minus = 1.0 - t
            return integrand(lo + t / one_minus) / one_minus**2

        value, _, _ = adaptive_integrate(mapped, 0.0, 1.0, rel_tol, max_panels)
    else:
        value, _, _ = adaptive_integrate(integrand, iv.lo, iv.hi, rel_tol, max_panels)
    return value


def total_variation_quadrature(G: TransferFunction, iv: FrequencyInterval, rel_tol: float = 1e-8,
                               max_panels: int = DEFAULT_PANEL_BUDGET) -> float:
    """Numerical total variation ``int_lo^hi |dG(is)/ds| ds`` using the true derivative."""
    if G.order == 0:
        return 0.0
    return _integrate_band(lambda s: np.abs(transfer_derivative(G, s)), iv, rel_tol, max_panels)


def modal_total_variation(G: TransferFunction, iv: FrequencyInterval, rel_tol: float = 1e-8,
                          max_panels: int = DEFAULT_PANEL_BUDGET) -> float:
    """Sum of the per-pole total variations, ``sum_j V(c_j / (is - a_j))``.

    Equals :func:`total_variation_quadrature` for a single pole and bounds it
    from above otherwise.  For real spectra this is the quantity the arctan
    closed form in :func:`tv_highfreq_exact_real` evaluates.
    """
    if G.order == 0:
        return 0.0
    return _integrate_band(lambda s: modal_derivative_magnitude(G, s), iv, rel_tol, max_panels)


# --------------------------------------------------------------------------- closed forms

def _require_real(G: TransferFunction) -> np.ndarray:
    if not G.is_real_spectrum:
        raise NotRealSpectrum("closed form needs purely real (negative) eigenvalues")
    return np.abs(G.eigenvalues.real)


def tv_highfreq_bound_complex(G: TransferFunction, omega0: float) -> float:
    """Upper bound sum_j |c_j| / |w_j - omega0| on V_{omega0}^inf, w_j = Im a_j."""
    w = G.eigenvalues.imag
    if G.order and not omega0 > np.max(np.abs(w)):
        raise InvalidThreshold(
            f"omega0={omega0} must exceed max |Im a_j| = {np.max(np.abs(w)):g}")
    return float(np.sum(np.abs(G.residues) / np.abs(w - omega0)))


def tv_highfreq_exact_real(G: TransferFunction, omega0: float) -> float:
    """sum_j (|c_j|/lambda_j) (pi/2 - arctan(omega0/lambda_j)).

    Exact for the per-pole (modal) variation; an upper bound on the true total
    variation whenever more than one pole contributes.
    """
    lam = _require_real(G)
    if omega0 < 0:
        raise ValueError("omega0 must be >= 0")
    # pi/2 - arctan(x) == arctan(1/x) keeps precision for large x
    tail = np.arctan2(lam, omega0)
    return float(np.sum(np.abs(G.residues) / lam * tail))


def tv_highfreq_approx_real(G: TransferFunction, omega0: float) -> float:
    """sum_j |c_j| / sqrt(lambda_j^2 + omega0^2)."""
    lam = _require_real(G)
    return float(np.sum(np.abs(G.residues) / np.hypot(lam, omega0)))


# --------------------------------------------------------------------------- reports

@dataclass
class TVRecord:
    omega0: float
    quadrature: float
    exact_real: float | None
    approx_real: float | None
    complex_bound: float | None

    def as_dict(self) -> dict:
        return {"omega0": self.omega0, "quadrature": self.quadrature, "exact_real": self.exact_real,
                "approx_real": self.approx_real, "complex_bound": self.complex_bound}


def tv_report(G: TransferFunction, omega0s: Sequence[float], rel_tol: float = 1e-8,
              max_panels: int = DEFAULT_PANEL_BUDGET) -> list[TVRecord]:
    """Quadrature next to every applicable closed form for each threshold."""
    records = []
    real = G.is_real_spectrum
    for w0 in omega0s:
        w0 = float(w0)
        quad = total_variation_quadrature(G, FrequencyInterval(w0), rel_tol, max_panels)
        try:
            bound = tv_highfreq_bound_complex(G, w0)
        except InvalidThreshold:
            bound = None
        records.append(TVRecord(
            omega0=w0,
            quadrature=quad,
            exact_real=tv_highfreq_exact_real(G, w0) if real else None,
            approx_real=tv_highfreq_approx_real(G, w0) if real else None,
            complex_bound=bound,
        ))
    return records


def frequency_sweep(G: TransferFunction, omegas: Sequence[float]) -> np.ndarray:
    """Rows of ``(omega, |G(i omega)|, |dG/ds|(omega))``."""
    omegas = np.asarray(omegas, dtype=float)
    return np.column_stack([omegas, magnitude_response(G, omegas), np.atleast_1d(derivative_magnitude(G, omegas))])


def loglog_slope(G: TransferFunction, w_lo: float, w_hi: float) -> float:
    mag = magnitude_response(G, [w_lo, w_hi])
    return float((math.log10(mag[1]) - math.log10(mag[0])) / (math.log10(w_hi) - math.log10(w_lo)))
