"""Straight-line numpy references used as oracles for the torch modules."""
import math

import numpy as np


def np_silu(v):
    return v / (1 + np.exp(-v))


def np_softplus(v):
    return np.logaddexp(0, v)


def ref_conv(x, w, b, causal=False):
    """x: (T, h); width-3 depthwise cross-correlation with zero padding."""
    T, h = x.shape
    out = np.zeros((T, h))
    for t in range(T):
        for j in range(3):
            src = t + j - (2 if causal else 1)
            if 0 <= src < T:
                out[t] += w[:, j] * x[src]
    return out + b


def ref_selective(xs, x_proj, dt_projs, dt_biases, A_log, D, state):
    """Scan for one sample, every channel and state handled by explicit loops."""
    T, h = xs.shape
    r = dt_projs[0].shape[1]
    dbc = xs @ x_proj.T
    deltas = [np_softplus(dbc[:, i * r:(i + 1) * r] @ w.T + b) + 1e-4 for i, (w, b) in enumerate(zip(dt_projs, dt_biases))]
    off = len(dt_projs) * r
    B, C = dbc[:, off:off + state], dbc[:, off + state:off + 2 * state]
    A = -np.exp(A_log)
    return deltas, B, C, A


def ref_scan(xs, delta, A, B, C):
    T, h = xs.shape
    y = np.zeros((T, h))
    for ch in range(h):
        for n in range(A.shape[1]):
            x = 0.0
            for t in range(T):
                a = A[ch, n]
                x = math.exp(delta[t, ch] * a) * x + math.expm1(delta[t, ch] * a) / a * B[t, n] * xs[t, ch]
                y[t, ch] += C[t, n] * x
    return y


def ref_mv(m, x):
    P = {k: v.detach().numpy() for k, v in m.named_parameters()}
    out = []
    for xb in x.numpy():
        proj = xb @ P["in_proj"].T
        xs, z = proj[:, :m.inner], proj[:, m.inner:]
        xs = np_silu(ref_conv(xs, P["conv_x"], P["conv_x_bias"]))
        (delta,), B, C, A = ref_selective(xs, P["selective.x_proj"], [P["selective.dt_proj.0"]],
                                          [P["selective.dt_bias.0"]], P["A_log"], P["D"], m.A_log.shape[1])
        y = ref_scan(xs, delta, A, B, C) + xs * P["D"]
        z = np_silu(ref_conv(z, P["conv_z"], P["conv_z_bias"]))
        out.append(np.concatenate([y, z], axis=1) @ P["out_proj"].T)
    return np.stack(out)


def ref_attention(m, x):
    P = {k: v.detach().numpy() for k, v in m.named_parameters()}
    c, H = m.channels, m.heads
    d = c // H
    out = []
    for xb in x.numpy():
        qkv = xb @ P["qkv"].T + P["qkv_bias"]
        heads = []
        for h in range(H):
            q = qkv[:, h * d:(h + 1) * d]
            k = qkv[:, c + h * d:c + (h + 1) * d]
            v = qkv[:, 2 * c + h * d:2 * c + (h + 1) * d]
            s = q @ k.T / math.sqrt(d)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            heads.append((e / e.sum(axis=1, keepdims=True)) @ v)
        out.append(np.concatenate(heads, axis=1) @ P["proj"].T + P["proj_bias"])
    return np.stack(out)


def ref_mlp(m, x):
    P = {k: v.detach().numpy() for k, v in m.named_parameters()}
    gelu = np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))
    return gelu(x.numpy() @ P["fc1"].T + P["fc1_bias"]) @ P["fc2"].T + P["fc2_bias"]


def naive_dft2(grid, sign):
    """O(T^2) 2-D DFT of an (h, w, c) array; sign -1 forward, +1 inverse (unnormalised)."""
    h, w, _ = grid.shape
    out = np.zeros(grid.shape, dtype=complex)
    for p in range(h):
        for q in range(w):
            for i in range(h):
                for j in range(w):
                    out[p, q] += grid[i, j] * np.exp(sign * 2j * np.pi * (p * i / h + q * j / w))
    return out


def ref_einfft(m, x):
    P = {k: v.detach().numpy() for k, v in m.named_parameters()}
    bsz, t, c = x.shape
    side = int(math.isqrt(t))
    nb, bs = m.blocks, c // m.blocks

    def weight_at(w, p, q):
        W = w[0] + 1j * w[1]
        mp, mq = (-p) % side, (-q) % side
        flat, mirror = p * side + q, mp * side + mq
        if flat == mirror:
            return W.real.astype(complex)
        return W if flat < mirror else W.conj()

    def mix(X, w):
        Y = np.zeros_like(X)
        for p in range(side):
            for q in range(side):
                W = weight_at(w, p, q)
                for k in range(nb):
                    Y[p, q, k * bs:(k + 1) * bs] = X[p, q, k * bs:(k + 1) * bs] @ W[k]
        return Y

    def mod(z, b):
        mag = np.abs(z)
        return np.where(mag > 0, np.maximum(mag + b, 0) / np.where(mag > 0, mag, 1) * z, 0)

    out = []
    for xb in x.numpy():
        X = naive_dft2(xb.reshape(side, side, c), -1)
        Y = mix(mod(mix(X, P["w1"]), P["b1"]), P["w2"])
        y = naive_dft2(Y, +1) / (side * side)
        assert np.abs(y.imag).max() < 1e-9
        out.append(y.real.reshape(t, c))
    return np.stack(out)


def ref_layer_norm(x, w, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b
