"""Sequence and channel mixers for the hybrid backbone.

Every mixer maps a ``(batch, tokens, channels)`` tensor to one of the same
shape.  Sequence mixers: MambaVision-style selective SSM (:class:`MVMixer`),
bidirectional Mamba (:class:`ViMMixer`), the quasiseparable bidirectional SSM
(:class:`HydraMixer`) and softmax self-attention (:class:`AttentionMixer`).
Channel mixers: Fourier-domain block-diagonal mixing (:class:`EinFFTMixer`)
and the tokenwise MLP (:class:`MLPMixer`).

Parameters are allocated empty and filled from an explicit numpy
``Generator`` by ``reset_parameters`` so that weights never depend on torch's
global RNG.  Everything runs in float64.
"""
from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConjugateSymmetryViolation, NonSquareGrid, ShapeMismatch
from .spectral import EigenInit, InitScheme

DTYPE = torch.float64
DELTA_FLOOR = 1e-4
IMAG_TOL = 1e-6
CONV_WIDTH = 3

_CHECKS = contextvars.ContextVar("mvh_runtime_checks", default=True)


@contextlib.contextmanager
def runtime_checks(enabled: bool):
    """Toggle data-dependent output checks (finiteness, imaginary residual).

    They are on by default; batched transforms such as ``torch.func.vmap``
    cannot trace them, so probes running under vmap switch them off.
    """
    token = _CHECKS.set(enabled)
    try:
        yield
    finally:
        _CHECKS.reset(token)


def checks_enabled() -> bool:
    return _CHECKS.get()


def _param(*shape) -> nn.Parameter:
    return nn.Parameter(torch.empty(*shape, dtype=DTYPE))


def _fill(p: torch.Tensor, values) -> None:
    if p.is_meta:
        return
    with torch.no_grad():
        p.copy_(torch.as_tensor(np.asarray(values), dtype=p.dtype).reshape(p.shape))


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def check_tensor3(x: torch.Tensor, channels: int | None = None) -> tuple[int, int, int]:
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (batch, tokens, channels), got shape {tuple(x.shape)}")
    if channels is not None and x.shape[-1] != channels:
        raise ShapeMismatch(f"expected {channels} channels, got {x.shape[-1]}")
    return tuple(x.shape)


def grid_side(tokens: int) -> int:
    side = math.isqrt(tokens)
    if side * side != tokens:
        raise NonSquareGrid(f"{tokens} tokens do not form a square grid")
    return side


# --------------------------------------------------------------------------- scan primitives

def selective_scan(u, delta, A, B, C, D=None):
    """Selective recurrence over tokens with exact ZOH discretisation.

    u, delta: (b, T, h); A: (h, N) negative; B, C: (b, T, N); D: (h,).
    Returns (b, T, h).
    """
    dA = delta.unsqueeze(-1) * A                       # (b, T, h, N)
    a_bar = torch.exp(dA)
    b_bar = torch.expm1(dA) / A * B.unsqueeze(2)
    x = u.new_zeros(u.shape[0], u.shape[2], A.shape[1])
    ys = []
    for k in range(u.shape[1]):
        x = a_bar[:, k] * x + b_bar[:, k] * u[:, k, :, None]
        ys.append((x * C[:, k, None, :]).sum(-1))
    y = torch.stack(ys, dim=1)
    if D is not None:
        y = y + u * D
    return y


def bidirectional_selective_scan(u, delta_fwd, delta_bwd, A, B, C, D):
    """Forward scan plus reversed scan, the reversed diagonal removed once.

    Token mixing is quasiseparable: causal part from ``delta_fwd``,
    anti-causal part from ``delta_bwd``, shared ``A``/``B``/``C`` and skip ``D``.
    """
    fwd = selective_scan(u, delta_fwd, A, B, C)
    flip = lambda t: torch.flip(t, dims=[1])
    bwd = flip(selective_scan(flip(u), flip(delta_bwd), A, flip(B), flip(C)))
    b_bar_bwd = torch.expm1(delta_bwd.unsqueeze(-1) * A) / A * B.unsqueeze(2)   # (b, T, h, N)
    self_bwd = (b_bar_bwd * C.unsqueeze(2)).sum(-1) * u
    return fwd + bwd - self_bwd + u * D


def realize_eigenvalues(a_log: torch.Tensor) -> torch.Tensor:
    # clamp keeps A strictly negative where exp underflows
    return torch.clamp(-torch.exp(a_log), max=-torch.finfo(a_log.dtype).tiny)


def depthwise_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, causal: bool = False):
    """Width-3 depthwise convolution over tokens of a (b, T, h) tensor."""
    h = x.shape[-1]
    xt = x.transpose(1, 2)
    if causal:
        xt = F.pad(xt, (CONV_WIDTH - 1, 0))
        out = F.conv1d(xt, weight.unsqueeze(1), bias, groups=h)
    else:
        out = F.conv1d(xt, weight.unsqueeze(1), bias, padding=CONV_WIDTH // 2, groups=h)
    return out.transpose(1, 2)


def softplus_delta(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) + DELTA_FLOOR


def modrelu(z: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """relu(|z| + b) * z / |z|, defined as 0 at z = 0."""
    mag = z.abs()
    nonzero = mag > 0
    safe = torch.where(nonzero, mag, torch.ones_like(mag))
    scale = torch.relu(mag + bias) / safe
    return torch.where(nonzero, scale * z, torch.zeros_like(z))


# --------------------------------------------------------------------------- SSM mixers

class _SelectiveBranch(nn.Module):
    """Projections producing (delta, B, C) from a (b, T, h) activation."""

    def __init__(self, inner: int, state_dim: int, dt_rank: int, n_dt: int = 1):
        super().__init__()
        self.inner, self.state_dim, self.dt_rank, self.n_dt = inner, state_dim, dt_rank, n_dt
        self.x_proj = _param(n_dt * dt_rank + 2 * state_dim, inner)
        self.dt_proj = nn.ParameterList([_param(inner, dt_rank) for _ in range(n_dt)])
        self.dt_bias = nn.ParameterList([_param(inner) for _ in range(n_dt)])

    def reset_parameters(self, rng: np.random.Generator) -> None:
        _fill(self.x_proj, _uniform(rng, self.x_proj.shape, self.inner ** -0.5))
        for w, b in zip(self.dt_proj, self.dt_bias):
            _fill(w, _uniform(rng, w.shape, self.dt_rank ** -0.5))
            # initial step sizes log-uniform in [1e-3, 1e-1]; bias = softplus^-1(dt)
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=self.inner))
            _fill(b, dt + np.log(-np.expm1(-dt)))

    def forward(self, x):
        dbc = F.linear(x, self.x_proj)
        r, n = self.dt_rank, self.state_dim
        deltas = [softplus_delta(F.linear(dbc[..., i * r:(i + 1) * r], w, b))
                  for i, (w, b) in enumerate(zip(self.dt_proj, self.dt_bias))]
        off = self.n_dt * r
        return deltas, dbc[..., off:off + n], dbc[..., off + n:off + 2 * n]


def _init_a_log(param: torch.Tensor, scheme: InitScheme) -> None:
    inner, n = param.shape
    lam = EigenInit(scheme, n).magnitudes()
    _fill(param, np.log(np.broadcast_to(lam, (inner, n))))


class MVMixer(nn.Module):
    """MambaVision mixer: SSM branch and gated skip branch, both with regular convolutions.

    The input projection feeds ``2 * channels`` features split half/half; the
    SSM half runs conv -> SiLU -> selective scan, the skip half runs
    conv -> SiLU.  Concatenation order is (SSM, skip).
    """

    kind = "mv"
    ssm_init = InitScheme.CASCADED

    def __init__(self, channels: int, state_dim: int = 4, dt_rank: int | None = None):
        super().__init__()
        self.channels = channels
        self.inner = channels
        dt_rank = dt_rank or max(1, channels // 4)
        self.in_proj = _param(2 * self.inner, channels)
        self.conv_x = _param(self.inner, CONV_WIDTH)
        self.conv_x_bias = _param(self.inner)
        self.conv_z = _param(self.inner, CONV_WIDTH)
        self.conv_z_bias = _param(self.inner)
        self.selective = _SelectiveBranch(self.inner, state_dim, dt_rank)
        self.A_log = _param(self.inner, state_dim)
        self.D = _param(self.inner)
        self.out_proj = _param(channels, 2 * self.inner)

    def reset_parameters(self, rng: np.random.Generator, scheme: InitScheme | None = None) -> None:
        _fill(self.in_proj, rng.normal(0, 0.02, self.in_proj.shape))
        _fill(self.out_proj, rng.normal(0, 0.02, self.out_proj.shape))
        for w, b in ((self.conv_x, self.conv_x_bias), (self.conv_z, self.conv_z_bias)):
            _fill(w, _uniform(rng, w.shape, CONV_WIDTH ** -0.5))
            _fill(b, np.zeros(b.shape))
        self.selective.reset_parameters(rng)
        _init_a_log(self.A_log, scheme or self.ssm_init)
        _fill(self.D, np.ones(self.D.shape))

    def ssm_branch(self, xs):
        xs = F.silu(depthwise_conv(xs, self.conv_x, self.conv_x_bias))
        (delta,), B, C = self.selective(xs)
        return selective_scan(xs, delta, realize_eigenvalues(self.A_log), B, C, self.D)

    def forward(self, x):
        check_tensor3(x, self.channels)
        grid_side(x.shape[1])
        xs, z = F.linear(x, self.in_proj).chunk(2, dim=-1)
        y = self.ssm_branch(xs)
        z = F.silu(depthwise_conv(z, self.conv_z, self.conv_z_bias))
        return F.linear(torch.cat([y, z], dim=-1), self.out_proj)


class ViMMixer(nn.Module):
    """Bidirectional Mamba: independent causal forward and backward branches, SiLU gate."""

    kind = "vim"
    ssm_init = InitScheme.CASCADED

    def __init__(self, channels: int, state_dim: int = 4, dt_rank: int | None = None, expand: int = 2):
        super().__init__()
        self.channels = channels
        self.inner = expand * channels
        dt_rank = dt_rank or max(1, channels // 4)
        self.in_proj = _param(2 * self.inner, channels)
        self.conv = nn.ParameterList([_param(self.inner, CONV_WIDTH) for _ in range(2)])
        self.conv_bias = nn.ParameterList([_param(self.inner) for _ in range(2)])
        self.selective = nn.ModuleList([_SelectiveBranch(self.inner, state_dim, dt_rank) for _ in range(2)])
        self.A_log = nn.ParameterList([_param(self.inner, state_dim) for _ in range(2)])
        self.D = nn.ParameterList([_param(self.inner) for _ in range(2)])
        self.out_proj = _param(channels, self.inner)

    def reset_parameters(self, rng: np.random.Generator, scheme: InitScheme | None = None) -> None:
        _fill(self.in_proj, rng.normal(0, 0.02, self.in_proj.shape))
        _fill(self.out_proj, rng.normal(0, 0.02, self.out_proj.shape))
        for i in range(2):
            _fill(self.conv[i], _uniform(rng, self.conv[i].shape, CONV_WIDTH ** -0.5))
            _fill(self.conv_bias[i], np.zeros(self.inner))
            self.selective[i].reset_parameters(rng)
            _init_a_log(self.A_log[i], scheme or self.ssm_init)
            _fill(self.D[i], np.ones(self.inner))

    def _direction(self, xs, i):
        xs = F.silu(depthwise_conv(xs, self.conv[i], self.conv_bias[i], causal=True))
        (delta,), B, C = self.selective[i](xs)
        return selective_scan(xs, delta, realize_eigenvalues(self.A_log[i]), B, C, self.D[i])

    def forward(self, x):
        check_tensor3(x, self.channels)
        xs, z = F.linear(x, self.in_proj).chunk(2, dim=-1)
        fwd = self._direction(xs, 0)
        bwd = torch.flip(self._direction(torch.flip(xs, dims=[1]), 1), dims=[1])
        return F.linear(0.5 * (fwd + bwd) * F.silu(z), self.out_proj)


class HydraMixer(nn.Module):
    """Bidirectional quasiseparable SSM with regular convolution and SiLU gate."""

    kind = "hydra"
    ssm_init = InitScheme.UNIFORM

    def __init__(self, channels: int, state_dim: int = 4, dt_rank: int | None = None, expand: int = 2):
        super().__init__()
        self.channels = channels
        self.inner = expand * channels
        dt_rank = dt_rank or max(1, channels // 4)
        self.in_proj = _param(2 * self.inner, channels)
        self.conv = _param(self.inner, CONV_WIDTH)
        self.conv_bias = _param(self.inner)
        self.selective = _SelectiveBranch(self.inner, state_dim, dt_rank, n_dt=2)
        self.A_log = _param(self.inner, state_dim)
        self.D = _param(self.inner)
        self.out_proj = _param(channels, self.inner)

    def reset_parameters(self, rng: np.random.Generator, scheme: InitScheme | None = None) -> None:
        _fill(self.in_proj, rng.normal(0, 0.02, self.in_proj.shape))
        _fill(self.out_proj, rng.normal(0, 0.02, self.out_proj.shape))
        _fill(self.conv, _uniform(rng, self.conv.shape, CONV_WIDTH ** -0.5))
        _fill(self.conv_bias, np.zeros(self.inner))
        self.selective.reset_parameters(rng)
        _init_a_log(self.A_log, scheme or self.ssm_init)
        _fill(self.D, np.ones(self.inner))

    def forward(self, x):
        check_tensor3(x, self.channels)
        xs, z = F.linear(x, self.in_proj).chunk(2, dim=-1)
        xs = F.silu(depthwise_conv(xs, self.conv, self.conv_bias))
        (d_fwd, d_bwd), B, C = self.selective(xs)
        y = bidirectional_selective_scan(xs, d_fwd, d_bwd, realize_eigenvalues(self.A_log), B, C, self.D)
        return F.linear(y * F.silu(z), self.out_proj)


# --------------------------------------------------------------------------- attention / MLP

class AttentionMixer(nn.Module):
    kind = "attention"

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ShapeMismatch(f"{heads} heads do not divide {channels} channels")
        self.channels, self.heads = channels, heads
        self.qkv = _param(3 * channels, channels)
        self.qkv_bias = _param(3 * channels)
        self.proj = _param(channels, channels)
        self.proj_bias = _param(channels)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        _fill(self.qkv, rng.normal(0, 0.02, self.qkv.shape))
        _fill(self.qkv_bias, np.zeros(self.qkv_bias.shape))
        _fill(self.proj, rng.normal(0, 0.02, self.proj.shape))
        _fill(self.proj_bias, np.zeros(self.proj_bias.shape))

    def _qkv(self, x):
        b, t, c = check_tensor3(x, self.channels)
        qkv = F.linear(x, self.qkv, self.qkv_bias).reshape(b, t, 3, self.heads, c // self.heads)
        return qkv.permute(2, 0, 3, 1, 4).unbind(0)         # each (b, heads, t, d)

    def attention_weights(self, x):
        q, k, _ = self._qkv(x)
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        return scores.softmax(dim=-1)

    def forward(self, x):
        b, t, c = check_tensor3(x, self.channels)
        q, k, v = self._qkv(x)
        attn = (q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return F.linear(out, self.proj, self.proj_bias)


class MLPMixer(nn.Module):
    kind = "mlp"

    def __init__(self, channels: int, hidden_ratio: int = 4):
        super().__init__()
        self.channels = channels
        hidden = hidden_ratio * channels
        self.fc1 = _param(hidden, channels)
        self.fc1_bias = _param(hidden)
        self.fc2 = _param(channels, hidden)
        self.fc2_bias = _param(channels)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for p in (self.fc1, self.fc2):
            _fill(p, rng.normal(0, 0.02, p.shape))
        for p in (self.fc1_bias, self.fc2_bias):
            _fill(p, np.zeros(p.shape))

    def forward(self, x):
        check_tensor3(x, self.channels)
        return F.linear(F.gelu(F.linear(x, self.fc1, self.fc1_bias)), self.fc2, self.fc2_bias)


# --------------------------------------------------------------------------- EinFFT

def _conjugate_masks(h: int, w: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Masks over the (h, w) frequency grid: primary half, its mirror, self-conjugate bins."""
    p = np.arange(h)[:, None]
    q = np.arange(w)[None, :]
    flat = p * w + q
    mirror = ((-p) % h) * w + ((-q) % w)
    as_t = lambda m: torch.as_tensor(m[..., None], dtype=DTYPE)
    return as_t(flat < mirror), as_t(flat > mirror), as_t(flat == mirror)


class EinFFTMixer(nn.Module):
    """Channel mixing in the 2-D Fourier domain of the token grid.

    Per frequency bin, channels are mixed by block-diagonal complex weights,
    passed through modReLU and mixed again.  Weights at a bin and its mirror
    are complex conjugates and self-conjugate bins use the real part, so the
    inverse transform of a real input is real up to rounding.
    """

    kind = "einfft"

    def __init__(self, channels: int, blocks: int = 4):
        super().__init__()
        if channels % blocks:
            raise ShapeMismatch(f"{blocks} blocks do not divide {channels} channels")
        self.channels, self.blocks = channels, blocks
        bs = channels // blocks
        # (real/imag, block, in, out)
        self.w1 = _param(2, blocks, bs, bs)
        self.b1 = _param(channels)
        self.w2 = _param(2, blocks, bs, bs)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for p in (self.w1, self.w2):
            _fill(p, rng.normal(0, 0.02, p.shape))
        _fill(self.b1, rng.normal(0, 0.02, self.b1.shape))

    def _mix(self, X, w, masks):
        weight = torch.complex(w[0], w[1])
        primary, mirror, selfc = masks
        b, h, ww, c = X.shape
        Xb = X.reshape(b, h, ww, self.blocks, c // self.blocks)
        mix = lambda W: torch.einsum("bhwki,kij->bhwkj", Xb, W).reshape(b, h, ww, c)
        return (primary * mix(weight) + mirror * mix(weight.conj())
                + selfc * mix(torch.complex(w[0], torch.zeros_like(w[0]))))

    def forward(self, x):
        b, t, c = check_tensor3(x, self.channels)
        side = grid_side(t)
        X = torch.fft.fft2(x.reshape(b, side, side, c), dim=(1, 2))
        masks = _conjugate_masks(side, side)
        Y = self._mix(modrelu(self._mix(X, self.w1, masks), self.b1), self.w2, masks)
        y = torch.fft.ifft2(Y, dim=(1, 2))
        if checks_enabled() and y.numel():
            residual = y.imag.abs().max().item()
            if residual > IMAG_TOL:
                raise ConjugateSymmetryViolation(f"inverse transform has imaginary part {residual:.3g}")
        return y.real.reshape(b, t, c)


SEQUENCE_MIXERS = {"mv": MVMixer, "vim": ViMMixer, "hydra": HydraMixer, "attention": AttentionMixer}
CHANNEL_MIXERS = {"einfft": EinFFTMixer, "mlp": MLPMixer}
SSM_MIXERS = (MVMixer, ViMMixer, HydraMixer)
