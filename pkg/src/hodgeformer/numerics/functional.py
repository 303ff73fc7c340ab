"""Neural network primitives with hand-written backward passes."""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse

from .tensor import Tensor, add, as_tensor, matmul, record, relu, spmm

LN_EPS = 1e-5
GATHER_BUDGET = 1 << 22  # elements per gathered block


def sparse_signed_apply(ops, side, x):
    """Apply ``d0``, ``d0T``, ``d1`` or ``d1T`` of ``ops`` to the rows of ``x``.

    The operators hold only +-1 entries, so the products are exact sums and
    differences; backward applies the transposed operator.
    """
    m = ops.get(side)
    if m.shape[1] != as_tensor(x).shape[0]:
        raise ValueError(f"{side} expects {m.shape[1]} rows, got {as_tensor(x).shape[0]}")
    return spmm(m, x)


# ---------------------------------------------------------------- attention

def _split_heads(x, heads):
    n, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    return x.reshape(n, heads, d // heads)


def _gathered_dots(a3, b3, index):
    """``out[i, h, t] = a3[i, h] . b3[index[i, t], h]`` in row blocks."""
    n, h, dh = a3.shape
    s = index.shape[1]
    out = np.empty((n, h, s), dtype=np.result_type(a3, b3))
    step = max(1, GATHER_BUDGET // max(1, s * dh))
    for head in range(h):
        bh = np.ascontiguousarray(b3[:, head])
        ah = np.ascontiguousarray(a3[:, head])
        for lo in range(0, n, step):
            hi = min(n, lo + step)
            out[lo:hi, head] = np.matmul(bh[index[lo:hi]], ah[lo:hi, :, None])[..., 0]
    return out


def _weight_matrix(w, index, n_keys):
    """CSR matrix with ``w[i, t]`` at ``(i, index[i, t])``; duplicates are summed."""
    n, s = index.shape
    return sparse.csr_matrix((w.ravel(), index.ravel(), np.arange(0, n * s + 1, s)),
                             shape=(n, n_keys))


def attention_weights(q, k, pattern, heads=1):
    """Row-stochastic weights ``softmax_{j in S_i}(q_i . k_j / sqrt(d_h))``, shape (n, heads, s)."""
    q3 = _split_heads(np.asarray(q), heads)
    k3 = _split_heads(np.asarray(k), heads)
    if not pattern.mask.any(axis=1).all():
        raise ValueError("attention pattern has an empty row")
    if pattern.index.size and (pattern.index.min() < 0 or pattern.index.max() >= k3.shape[0]):
        raise ValueError("attention pattern index out of range")
    logits = _gathered_dots(q3, k3, pattern.index)
    logits *= logits.dtype.type(1.0 / math.sqrt(q3.shape[2]))
    logits[np.broadcast_to(~pattern.mask[:, None, :], logits.shape)] = -np.inf
    logits -= logits.max(axis=2, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=2, keepdims=True)
    return w


def masked_softmax_attention(q, k, v, pattern, heads=1):
    """Sparse multi-head attention over the key sets of ``pattern``.

    ``out_i = sum_{j in S_i} softmax_j(q_i . k_j / sqrt(d_h)) v_j`` for each head,
    computed by gathering key rows; no n x n matrix is formed. The weights of
    the forward pass are kept on ``out.weights`` (n, heads, s).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0] or q.shape[0] != pattern.n:
        raise ValueError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} pattern n={pattern.n}")
    n_keys = k.shape[0]
    w = attention_weights(q.data, k.data, pattern, heads)
    v3 = _split_heads(v.data, heads)
    mats = [_weight_matrix(w[:, h], pattern.index, n_keys) for h in range(heads)]
    out = np.empty((q.shape[0],) + v3.shape[1:], dtype=v.dtype)
    for h in range(heads):
        out[:, h] = mats[h] @ v3[:, h]
    inv_sqrt = 1.0 / math.sqrt(q.shape[1] // heads)

    def backward(g):
        g3 = g.reshape(out.shape)
        dw = _gathered_dots(g3, v3, pattern.index)
        dlogits = w * (dw - (w * dw).sum(axis=2, keepdims=True))
        dlogits *= dlogits.dtype.type(inv_sqrt)
        q3 = _split_heads(q.data, heads)
        k3 = _split_heads(k.data, heads)
        dq = np.empty_like(q3) if q.requires_grad else None
        dk = np.empty_like(k3) if k.requires_grad else None
        dv = np.empty_like(v3) if v.requires_grad else None
        for h in range(heads):
            if dv is not None:
                dv[:, h] = mats[h].T @ g3[:, h]
            if dq is not None or dk is not None:
                dm = _weight_matrix(dlogits[:, h], pattern.index, n_keys)
                if dq is not None:
                    dq[:, h] = dm @ k3[:, h]
                if dk is not None:
                    dk[:, h] = dm.T @ q3[:, h]
        return tuple(None if a is None else a.reshape(a.shape[0], -1) for a in (dq, dk, dv))

    res = record(out.reshape(out.shape[0], -1), (q, k, v), backward)
    res.weights = w
    return res


def linear_attention(phi_q, phi_k, v, offsets, heads=1):
    """Kernelized attention ``phi(q_i) . sum_j phi(k_j) v_j^T / phi(q_i) . sum_j phi(k_j)``.

    Sums run over the rows of each segment ``offsets[b]:offsets[b+1]`` so
    that stacked meshes never attend to each other. Feature maps must be
    strictly positive.
    """
    a_t, b_t, v_t = as_tensor(phi_q), as_tensor(phi_k), as_tensor(v)
    # head-major copies: (h, n, d_h)
    a, b, vv = (np.ascontiguousarray(_split_heads(t.data, heads).transpose(1, 0, 2))
                for t in (a_t, b_t, v_t))
    out = np.empty_like(vv)
    saved = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        kv = np.matmul(b[:, lo:hi].transpose(0, 2, 1), vv[:, lo:hi])  # (h, d, d)
        z = b[:, lo:hi].sum(axis=1)[:, :, None]  # (h, d, 1)
        den = np.matmul(a[:, lo:hi], z)  # (h, m, 1)
        out[:, lo:hi] = np.matmul(a[:, lo:hi], kv) / den
        saved.append((kv, z, den))

    def backward(g):
        g3 = np.ascontiguousarray(g.reshape(g.shape[0], heads, -1).transpose(1, 0, 2))
        da, db, dv = np.empty_like(a), np.empty_like(b), np.empty_like(vv)
        for (lo, hi), (kv, z, den) in zip(zip(offsets[:-1], offsets[1:]), saved):
            dnum = g3[:, lo:hi] / den
            dden = -(g3[:, lo:hi] * out[:, lo:hi]).sum(axis=2, keepdims=True) / den
            a_s = a[:, lo:hi]
            da[:, lo:hi] = np.matmul(dnum, kv.transpose(0, 2, 1)) + dden * z.transpose(0, 2, 1)
            dkv = np.matmul(a_s.transpose(0, 2, 1), dnum)
            dz = np.matmul(a_s.transpose(0, 2, 1), dden)  # (h, d, 1)
            db[:, lo:hi] = np.matmul(vv[:, lo:hi], dkv.transpose(0, 2, 1)) + dz.transpose(0, 2, 1)
            dv[:, lo:hi] = np.matmul(b[:, lo:hi], dkv)
        n = g.shape[0]
        return tuple(x.transpose(1, 0, 2).reshape(n, -1) for x in (da, db, dv))

    return record(out.transpose(1, 0, 2).reshape(out.shape[1], -1), (a_t, b_t, v_t), backward)


# ---------------------------------------------------------------- normalization, MLP, dropout

def layernorm_noaffine(x, groups=1, eps=LN_EPS):
    """Normalize each row (or each of ``groups`` column blocks) to zero mean, unit variance."""
    x = as_tensor(x)
    n, d = x.shape
    if d // groups < 2:
        raise ValueError("layer norm needs at least two features per group")
    x3 = x.data.reshape(n, groups, d // groups)
    mu = x3.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(x3.var(axis=2, keepdims=True) + eps)
    y = (x3 - mu) * inv

    def backward(g):
        g3 = g.reshape(y.shape)
        dx = inv * (g3 - g3.mean(axis=2, keepdims=True) - y * (g3 * y).mean(axis=2, keepdims=True))
        return (dx.reshape(n, d).astype(x.dtype, copy=False),)

    return record(y.reshape(n, d).astype(x.dtype, copy=False), (x,), backward)


def dropout(x, p, rng=None, train=False):
    x = as_tensor(x)
    if not train or p <= 0:
        return x
    keep = rng.random(x.shape) >= p
    factor = x.dtype.type(1.0 / (1.0 - p))
    m = keep * factor
    return record(x.data * m, (x,), lambda g: (g * m,))


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mlp2(x, w1, b1, w2, b2, dropout_p=0.0, train=False, rng=None):
    """Two-layer perceptron with ReLU; dropout acts on the hidden activation."""
    h = relu(linear(x, w1, b1))
    h = dropout(h, dropout_p, rng, train)
    return linear(h, w2, b2)


# ---------------------------------------------------------------- loss

def cross_entropy(logits, targets, smoothing=0.0, class_weights=None):
    """Class-weighted cross entropy against label-smoothed targets.

    The target distribution is ``(1 - smoothing) * onehot + smoothing / C``;
    per-element losses are averaged with weights ``class_weights[target]``.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target class outside [0, {c})")
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must lie in [0, 1)")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = np.full((n, c), smoothing / c)
    t[np.arange(n), targets] += 1.0 - smoothing
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[targets]
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    wsum = w.sum()
    per = -(t * logp).sum(axis=1)
    loss = float((w * per).sum() / wsum)

    def backward(g):
        d = (np.exp(logp) - t) * (w / wsum)[:, None] * float(g)
        return (d.astype(logits.dtype),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


__all__ = [
    "Tensor", "sparse_signed_apply", "attention_weights", "masked_softmax_attention",
    "linear_attention", "layernorm_noaffine", "dropout", "linear", "mlp2", "cross_entropy",
]
