"""Pure-numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors every function
here with the same signature. ``muwarm.kernels`` picks one at import time.
"""

import numpy as np


def layernorm_fwd(x, gain, bias, eps):
    """Row-wise normalization of a 2-D array. Returns (y, mean, rstd)."""
    mean = x.mean(axis=1, dtype=np.float64)
    xc = x - mean[:, None].astype(x.dtype)
    var = np.mean(np.square(xc, dtype=np.float64), axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None].astype(x.dtype)
    y = xhat * gain + bias
    return y, mean, rstd


def layernorm_bwd(gy, x, mean, rstd, gain):
    dt = x.dtype
    xhat = (x - mean[:, None].astype(dt)) * rstd[:, None].astype(dt)
    ggain = np.sum(gy * xhat, axis=0, dtype=np.float64).astype(dt)
    gbias = np.sum(gy, axis=0, dtype=np.float64).astype(dt)
    gxhat = gy * gain
    a = np.mean(gxhat, axis=1, dtype=np.float64)
    b = np.mean(gxhat * xhat, axis=1, dtype=np.float64)
    gx = (gxhat - a[:, None].astype(dt) - xhat * b[:, None].astype(dt)) * rstd[:, None].astype(dt)
    return gx, ggain, gbias


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_fwd(x):
    """tanh-approximate gelu (GPT-2). Returns (y, t) with t the tanh term."""
    dt = x.dtype.type
    t = np.tanh(dt(_GELU_C) * (x + dt(0.044715) * x * x * x))
    return dt(0.5) * x * (1 + t), t


def gelu_bwd(gy, x, t):
    dt = x.dtype.type
    dinner = dt(_GELU_C) * (1 + dt(3 * 0.044715) * x * x)
    return gy * (dt(0.5) * (1 + t) + dt(0.5) * x * (1 - t * t) * dinner)


def _causal_mask(t):
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def causal_softmax_fwd(x, scale):
    """Softmax over the last axis of (N, T, T) scores, keys j > query i masked."""
    t = x.shape[-1]
    z = x * x.dtype.type(scale)
    z[:, _causal_mask(t)] = -np.inf
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def causal_softmax_bwd(gp, p, scale):
    s = np.sum(gp * p, axis=-1, keepdims=True)
    return (gp - s) * p * p.dtype.type(scale)


def xent_fwd(logits, targets):
    """Mean cross-entropy of (N, V) logits. Returns (loss, probs)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, dtype=np.float64)
    n = logits.shape[0]
    picked = z[np.arange(n), targets].astype(np.float64)
    loss = float(np.mean(np.log(se) - picked))
    probs = ez / se[:, None].astype(logits.dtype)
    return loss, probs


def xent_bwd(probs, targets, gscale):
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), targets] -= 1
    g *= probs.dtype.type(gscale / n)
    return g


def embedding_bwd(gy, ids, vocab):
    """Scatter-add rows of (N, d) gradient into a (vocab, d) table."""
    out = np.zeros((vocab, gy.shape[1]), dtype=gy.dtype)
    np.add.at(out, ids, gy)
    return out


def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    """In-place bias-corrected Adam on flat float arrays. No weight decay."""
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    denom = np.sqrt(v / bc2) + eps
    p -= (lr / bc1) * m / denom


def markov_walk(out, uniforms, bucket_of, cand, cand_cdf, uni_cdf, mix, alphabet):
    """Sample an order-3 chain over ``alphabet`` symbols into ``out`` (int64).

    ``out[:3]`` must already hold the seed context.
    """
    k = cand.shape[1]
    a = alphabet
    o = out.tolist()
    u = uniforms.tolist()
    bucket_of = bucket_of.tolist()
    cand = cand.tolist()
    cand_cdf = cand_cdf.tolist()
    uni_cdf = uni_cdf.tolist()
    for i in range(3, len(o)):
        ui = u[i]
        if ui < mix:
            b = bucket_of[(o[i - 3] * a + o[i - 2]) * a + o[i - 1]]
            r = ui / mix
            row = cand_cdf[b]
            j = 0
            while j < k - 1 and r >= row[j]:
                j += 1
            o[i] = cand[b][j]
        else:
            r = (ui - mix) / (1.0 - mix)
            j = 0
            while j < a - 1 and r >= uni_cdf[j]:
                j += 1
            o[i] = j
    out[:] = o
    return out
