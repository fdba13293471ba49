"""Discrete-time diagonal SSM kernels.

Zero-order-hold discretisation, the linear recurrence

    x_k = a_bar * x_{k-1} + b_bar * u_k,    y_k = c . x_k + d * u_k

evaluated sequentially, as a chunked two-pass associative scan, with
input-dependent (selective) parameters, and bidirectionally; plus the
``A = -exp(A_log)`` parameterisation and exact reverse-mode gradients of the
LTI recurrence.

States are diagonal: ``a_bar``, ``b_bar`` and ``c`` are vectors of length
``state_dim`` and the input ``u`` is a single real channel.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeMismatch

DELTA_FLOOR = 1e-4


def resolve_workers(workers: int | None = None) -> int:
    """Worker count from the argument or ``MVH_THREADS`` (0 or unset = auto)."""
    if workers is None:
        workers = int(os.environ.get("MVH_THREADS", "0") or 0)
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


# --------------------------------------------------------------------------- parameter types

@dataclass(frozen=True)
class DiscreteSSM:
    """Discretised diagonal SSM for one channel.

    ``a_bar``/``b_bar`` may be shape ``(state_dim,)`` (time-invariant) or
    ``(T, state_dim)`` (per-step).
    """

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    d: float = 0.0
    delta: float | np.ndarray = 1.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a_bar, dtype=float))
        b = np.atleast_1d(np.asarray(self.b_bar, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if a.shape[-1] != c.shape[-1] or b.shape[-1] != c.shape[-1]:
            raise ShapeMismatch(f"state sizes differ: a_bar {a.shape}, b_bar {b.shape}, c {c.shape}")
        if np.any(np.abs(a) >= 1):
            raise DomainError("discretised system must satisfy |a_bar| < 1")
        if np.any(np.asarray(self.delta) <= 0):
            raise DomainError("step size delta must be positive")
        object.__setattr__(self, "a_bar", a)
        object.__setattr__(self, "b_bar", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    @property
    def state_dim(self) -> int:
        return int(self.c.shape[-1])

    @classmethod
    def from_continuous(cls, a, b, c, d: float = 0.0, delta: float = 1.0) -> "DiscreteSSM":
        a_bar, b_bar = discretize_zoh(np.asarray(a, dtype=float), np.asarray(b, dtype=float), delta)
        return cls(a_bar, b_bar, c, d, delta)


@dataclass(frozen=True)
class ALogParam:
    """Unconstrained log-magnitudes; the realised eigenvalues are ``-exp(a_log)``."""

    a_log: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a_log", np.asarray(self.a_log, dtype=float))

    def eigenvalues(self) -> np.ndarray:
        return realize_eigenvalues(self.a_log)


@dataclass(frozen=True)
class SelectiveParams:
    """Per-token step sizes and input/readout vectors for one channel."""

    delta_seq: np.ndarray   # (T,)
    b_seq: np.ndarray       # (T, state_dim)
    c_seq: np.ndarray       # (T, state_dim)

    def __post_init__(self):
        delta = np.asarray(self.delta_seq, dtype=float)
        b = np.atleast_2d(np.asarray(self.b_seq, dtype=float))
        c = np.atleast_2d(np.asarray(self.c_seq, dtype=float))
        if np.any(delta <= 0):
            raise DomainError("delta_seq must be strictly positive")
        if b.shape != c.shape or b.shape[0] != delta.shape[0]:
            raise ShapeMismatch(f"delta {delta.shape}, b {b.shape}, c {c.shape} disagree")
        object.__setattr__(self, "delta_seq", delta)
        object.__setattr__(self, "b_seq", b)
        object.__setattr__(self, "c_seq", c)

    @classmethod
    def from_raw(cls, raw_delta, b_seq, c_seq) -> "SelectiveParams":
        return cls(softplus_delta(raw_delta), b_seq, c_seq)


def softplus_delta(raw):
    """Map an unconstrained step size to ``softplus(raw) + 1e-4``."""
    raw = np.asarray(raw, dtype=float)
    return np.logaddexp(0.0, raw) + DELTA_FLOOR


# --------------------------------------------------------------------------- discretisation

def discretize_zoh(a, b, delta):
    """Exact zero-order hold for a diagonal channel.

    ``a_bar = exp(delta*a)``, ``b_bar = (a_bar - 1)/a * b``.
    """
    a = np.asarray(a, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(a >= 0):
        raise DomainError("continuous eigenvalues must be negative")
    if np.any(delta <= 0):
        raise DomainError("delta must be positive")
    a_bar = np.exp(delta * a)
    # expm1 keeps b_bar accurate as delta -> 0
    b_bar = np.expm1(delta * a) / a * np.asarray(b, dtype=float)
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def realize_eigenvalues(a_log):
    # clamp keeps A strictly negative where exp underflows
    return np.minimum(-np.exp(np.asarray(a_log, dtype=float)), -np.finfo(float).tiny)


def realize_eigenvalues_vjp(a_log, grad_eigs):
    """Pull a gradient w.r.t. ``A`` back to ``a_log``: dL/da_log = dL/dA * A."""
    return np.asarray(grad_eigs, dtype=float) * -np.exp(np.asarray(a_log, dtype=float))


# --------------------------------------------------------------------------- scans

def _as_input(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.size == 0:
        raise ShapeMismatch("input must be a nonempty 1-D sequence")
    return u


def _step_params(ssm: DiscreteSSM, T: int) -> tuple[np.ndarray, np.ndarray]:
    n = ssm.state_dim
    try:
        a = np.broadcast_to(ssm.a_bar, (T, n))
        b = np.broadcast_to(ssm.b_bar, (T, n))
    except ValueError as exc:
        raise ShapeMismatch(f"per-step parameters do not match sequence length {T}") from exc
    return a, b


def scan_states(ssm: DiscreteSSM, u) -> np.ndarray:
    """Hidden states ``x_k`` (shape ``(T, state_dim)``) from ``x_{-1} = 0``."""
    u = _as_input(u)
    a, b = _step_params(ssm, u.size)
    x = np.zeros(ssm.state_dim)
    states = np.empty((u.size, ssm.state_dim))
    for k in range(u.size):
        x = a[k] * x + b[k] * u[k]
        states[k] = x
    return states


def scan_sequential(ssm: DiscreteSSM, u) -> np.ndarray:
    u = _as_input(u)
    return scan_states(ssm, u) @ ssm.c + ssm.d * u


def _combine(a1, b1, a2, b2):
    # (a1, b1) then (a2, b2): x -> a2 (a1 x + b1) + b2
    return a1 * a2, a2 * b1 + b2


def _blelloch_exclusive(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Work-efficient exclusive scan (up-sweep then down-sweep) over axis 0."""
    n = a.shape[0]
    size = 1
    while size < n:
        size *= 2
    ta = np.ones((size,) + a.shape[1:])
    tb = np.zeros((size,) + b.shape[1:])
    ta[:n], tb[:n] = a, b
    step = 1
    while step < size:
        right = np.arange(2 * step - 1, size, 2 * step)
        left = right - step
        ta[right], tb[right] = _combine(ta[left], tb[left], ta[right], tb[right])
        step *= 2
    ta[-1], tb[-1] = 1.0, 0.0
    step = size // 2
    while step >= 1:
        right = np.arange(2 * step - 1, size, 2 * step)
        left = right - step
        la, lb = ta[left].copy(), tb[left].copy()
        ta[left], tb[left] = ta[right], tb[right]
        ta[right], tb[right] = _combine(ta[right], tb[right], la, lb)
        step //= 2
    return ta[:n], tb[:n]


def _local_prefix(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive prefix of the operator inside each chunk; inputs (chunks, L, N)."""
    pa = np.empty_like(a)
    pb = np.empty_like(b)
    pa[:, 0], pb[:, 0] = a[:, 0], b[:, 0]
    for j in range(1, a.shape[1]):
        pa[:, j], pb[:, j] = _combine(pa[:, j - 1], pb[:, j - 1], a[:, j], b[:, j])
    return pa, pb


def scan_parallel(ssm: DiscreteSSM, u, chunk: int, workers: int | None = 1) -> np.ndarray:
    """Chunked associative scan with the same contract as :func:`scan_sequential`.

    Pass one reduces every chunk to its local prefixes and a total; an
    exclusive Blelloch scan over the chunk totals yields each chunk's carry-in;
    pass two applies the carries.  Chunk boundaries and combine order depend
    only on ``chunk``, so results do not change with ``workers``.
    """
    u = _as_input(u)
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    T, n = u.size, ssm.state_dim
    a, b = _step_params(ssm, T)
    n_chunks = -(-T // chunk)
    pad = n_chunks * chunk - T
    # identity elements (1, 0) pad the final chunk
    ea = np.concatenate([a, np.ones((pad, n))]).reshape(n_chunks, chunk, n)
    eb = np.concatenate([b * u[:, None], np.zeros((pad, n))]).reshape(n_chunks, chunk, n)

    workers = min(resolve_workers(workers), n_chunks)
    if workers > 1:
        bounds = np.linspace(0, n_chunks, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda lo_hi: _local_prefix(ea[lo_hi[0]:lo_hi[1]], eb[lo_hi[0]:lo_hi[1]]),
                                  zip(bounds[:-1], bounds[1:])))
        pa = np.concatenate([p[0] for p in parts])
        pb = np.concatenate([p[1] for p in parts])
    else:
        pa, pb = _local_prefix(ea, eb)

    _, carry = _blelloch_exclusive(pa[:, -1], pb[:, -1])
    states = pa * carry[:, None, :] + pb
    states = states.reshape(n_chunks * chunk, n)[:T]
    return states @ ssm.c + ssm.d * u


def scan_selective(params: SelectiveParams, a_log_row, u, d: float = 0.0) -> np.ndarray:
    """Selective recurrence for one channel with per-token ZOH discretisation."""
    u = _as_input(u)
    if params.delta_seq.shape[0] != u.size:
        raise ShapeMismatch(f"selective parameters cover {params.delta_seq.shape[0]} tokens, input has {u.size}")
    a = realize_eigenvalues(a_log_row)
    if a.shape != params.b_seq.shape[1:]:
        raise ShapeMismatch(f"state size {a.shape} does not match b_seq {params.b_seq.shape}")
    a_bar, b_bar = discretize_zoh(a[None, :], params.b_seq, params.delta_seq[:, None])
    x = np.zeros(a.size)
    y = np.empty(u.size)
    for k in range(u.size):
        x = a_bar[k] * x + b_bar[k] * u[k]
        y[k] = params.c_seq[k] @ x + d * u[k]
    return y


def scan_bidirectional(ssm_fwd: DiscreteSSM, ssm_bwd: DiscreteSSM, u) -> np.ndarray:
    """Forward plus reversed scan with each token's own contribution counted once.

    The result is multiplication by a quasiseparable mixing matrix: strictly
    lower part from ``ssm_fwd``, strictly upper part from ``ssm_bwd`` and the
    diagonal ``c_fwd . b_bar_fwd + d`` with ``d = ssm_fwd.d``.  ``ssm_bwd.d``
    is not used.
    """
    u = _as_input(u)
    if ssm_fwd.state_dim != ssm_bwd.state_dim:
        raise ShapeMismatch("forward and backward systems must share a state size")
    if np.ndim(ssm_fwd.a_bar) != 1 or np.ndim(ssm_bwd.a_bar) != 1:
        raise ShapeMismatch("bidirectional scan expects time-invariant systems")
    fwd = scan_states(ssm_fwd, u) @ ssm_fwd.c
    bwd = (scan_states(ssm_bwd, u[::-1]) @ ssm_bwd.c)[::-1]
    bwd_diag = float(ssm_bwd.c @ ssm_bwd.b_bar)
    return fwd + bwd - bwd_diag * u + ssm_fwd.d * u


# --------------------------------------------------------------------------- gradients

@dataclass
class ScanGrads:
    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    d: float
    u: np.ndarray


def scan_backward(ssm: DiscreteSSM, u, dy) -> ScanGrads:
    """Reverse-mode gradients of ``sum_k dy_k * y_k`` for a time-invariant scan."""
    u = _as_input(u)
    dy = np.asarray(dy, dtype=float)
    if dy.shape != u.shape:
        raise ShapeMismatch(f"dy has shape {dy.shape}, input {u.shape}")
    if np.ndim(ssm.a_bar) != 1 or np.ndim(ssm.b_bar) != 1:
        raise ShapeMismatch("scan_backward expects time-invariant a_bar and b_bar")
    states = scan_states(ssm, u)
    prev = np.vstack([np.zeros((1, ssm.state_dim)), states[:-1]])

    # adjoint g_k = dL/dx_k, accumulated right to left
    g = np.empty_like(states)
    acc = np.zeros(ssm.state_dim)
    for k in range(u.size - 1, -1, -1):
        acc = dy[k] * ssm.c + ssm.a_bar * acc
        g[k] = acc

    return ScanGrads(
        a_bar=np.sum(g * prev, axis=0),
        b_bar=g.T @ u,
        c=states.T @ dy,
        d=float(dy @ u),
        u=g @ ssm.b_bar + ssm.d * dy,
    )


def state_bound(ssm: DiscreteSSM, max_abs_input: float) -> np.ndarray:
    """Geometric-series bound on ``|x_k|`` for inputs bounded by ``max_abs_input``."""
    return max_abs_input * np.abs(ssm.b_bar) / (1.0 - np.abs(ssm.a_bar))


def dc_gain(ssm: DiscreteSSM) -> float:
    return float(ssm.c @ (ssm.b_bar / (1.0 - ssm.a_bar)) + ssm.d)
