"""Hodge attention layers, vanilla linear-attention layers, embeddings and heads.

A learned Laplacian is applied right to left as a chain of sparse incidence
products and attention-parameterized Hodge stars, e.g. for vertex values

    a1 = d0 V            (vertices -> edges)
    a2 = star1 (*) a1    (attention over edges, queries/keys from x_e)
    a3 = d0^T a2         (edges -> vertices)
    out = star0_inv (*) a3

where ``(*)`` is sparse attention whose keys come from the pattern of the
element kind the star acts on.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse

from .numerics import (
    add,
    dropout,
    elu1,
    layernorm_noaffine,
    linear,
    linear_attention,
    masked_softmax_attention,
    mlp2,
    sparse_signed_apply,
    spmm,
)
from .numerics.tensor import Tensor

KINDS = ("v", "e", "f")
ROLE_SOURCE = {"star0_inv": "v", "star1": "e", "star1_inv": "e", "star2": "f"}
ROLES_FOR = {
    "v": ("star0_inv", "star1"),
    "e": ("star0_inv", "star1", "star1_inv", "star2"),
    "f": ("star1_inv", "star2"),
}
REQUIRES = {"v": ("v", "e"), "e": ("v", "e", "f"), "f": ("e", "f")}


class ConfigurationError(ValueError):
    pass


class Module:
    """Minimal parameter container with hierarchical names."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, array):
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {prefix + k: v for k, v in self._params.items()}
        for name, c in self._children.items():
            out.update(c.named_parameters(f"{prefix}{name}."))
        return out

    def __getitem__(self, name):
        return self._params[name]


def uniform_init(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class MLP(Module):
    def __init__(self, d_in, d_hidden, d_out, rng, dtype=np.float32, zero_out=False):
        super().__init__()
        self.param("w1", uniform_init(rng, d_in, (d_in, d_hidden), dtype))
        self.param("b1", uniform_init(rng, d_in, (d_hidden,), dtype))
        if zero_out:
            self.param("w2", np.zeros((d_hidden, d_out), dtype))
            self.param("b2", np.zeros(d_out, dtype))
        else:
            self.param("w2", uniform_init(rng, d_hidden, (d_hidden, d_out), dtype))
            self.param("b2", uniform_init(rng, d_hidden, (d_out,), dtype))

    def __call__(self, x, dropout_p=0.0, train=False, rng=None):
        p = self._params
        return mlp2(x, p["w1"], p["b1"], p["w2"], p["b2"], dropout_p, train, rng)


# ---------------------------------------------------------------- Hodge stars and Laplacians

def hodge_star_attention(x_src, values, wq, wk, pattern, heads=1, trace=None, role=None):
    """Apply an attention-parameterized Hodge star to ``values``.

    Queries and keys are ``LN(x_src @ wq)`` and ``LN(x_src @ wk)`` with the
    layer norm taken per head; ``values`` is the operand being transported.
    """
    if x_src.shape[0] != values.shape[0] or values.shape[0] != pattern.n:
        raise ValueError(f"star {role}: {x_src.shape[0]} sources, {values.shape[0]} values, "
                         f"pattern over {pattern.n}")
    q = layernorm_noaffine(x_src @ wq, groups=heads)
    k = layernorm_noaffine(x_src @ wk, groups=heads)
    out = masked_softmax_attention(q, k, values, pattern, heads)
    if trace is not None:
        trace.append((role, out.weights))
    return out


def _star(role, xs, values, stars, patterns, heads, trace):
    src = ROLE_SOURCE[role]
    wq, wk = stars[role]
    return hodge_star_attention(xs[src], values, wq, wk, patterns[src], heads, trace, role)


def apply_Lv(x_v, x_e, V_v, ops, patterns, stars, heads=1, trace=None):
    """``star0_inv d0^T star1 d0 V_v``."""
    xs = {"v": x_v, "e": x_e}
    a = sparse_signed_apply(ops, "d0", V_v)
    a = _star("star1", xs, a, stars, patterns, heads, trace)
    a = sparse_signed_apply(ops, "d0T", a)
    return _star("star0_inv", xs, a, stars, patterns, heads, trace)


def apply_Le(x_v, x_e, x_f, V_e, ops, patterns, stars, heads=1, trace=None):
    """``d0 star0_inv d0^T star1 V_e + star1_inv d1^T star2 d1 V_e``."""
    xs = {"v": x_v, "e": x_e, "f": x_f}
    a = _star("star1", xs, V_e, stars, patterns, heads, trace)
    a = sparse_signed_apply(ops, "d0T", a)
    a = _star("star0_inv", xs, a, stars, patterns, heads, trace)
    term1 = sparse_signed_apply(ops, "d0", a)
    b = sparse_signed_apply(ops, "d1", V_e)
    b = _star("star2", xs, b, stars, patterns, heads, trace)
    b = sparse_signed_apply(ops, "d1T", b)
    term2 = _star("star1_inv", xs, b, stars, patterns, heads, trace)
    return add(term1, term2)


def apply_Lf(x_e, x_f, V_f, ops, patterns, stars, heads=1, trace=None):
    """``d1 star1_inv d1^T star2 V_f``."""
    xs = {"e": x_e, "f": x_f}
    a = _star("star2", xs, V_f, stars, patterns, heads, trace)
    a = sparse_signed_apply(ops, "d1T", a)
    a = _star("star1_inv", xs, a, stars, patterns, heads, trace)
    return sparse_signed_apply(ops, "d1", a)


def apply_laplacian(kind, xs, values, ops, patterns, stars, heads=1, trace=None):
    if kind == "v":
        return apply_Lv(xs["v"], xs["e"], values, ops, patterns, stars, heads, trace)
    if kind == "e":
        return apply_Le(xs["v"], xs["e"], xs["f"], values, ops, patterns, stars, heads, trace)
    if kind == "f":
        return apply_Lf(xs["e"], xs["f"], values, ops, patterns, stars, heads, trace)
    raise ValueError(f"unknown element kind {kind!r}")


# ---------------------------------------------------------------- layers

def _check_elements(elements):
    elements = tuple(k for k in KINDS if k in set(elements))
    if not elements:
        raise ConfigurationError("a layer must update at least one element kind")
    return elements


class HodgeFormerLayer(Module):
    """Multi-head Hodge attention followed by per-element MLPs, both pre-LN residual.

    Each updated kind ``k`` gets ``x_k + drop(concat_heads(L_k V_k) W_O)`` and then
    ``x + MLP(LN(x))``. Kinds that are not updated pass through unchanged.
    """

    kind = "hodgeformer"

    def __init__(self, d, heads, d_hidden, elements, rng, dropout_p=0.1, dtype=np.float32,
                 zero_init=True):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"d={d} is not divisible by h={heads}")
        self.d, self.heads, self.dropout_p = d, heads, dropout_p
        self.elements = _check_elements(elements)
        self.roles = tuple(r for r in ROLE_SOURCE if any(r in ROLES_FOR[k] for k in self.elements))
        self.requires = tuple(k for k in KINDS if any(k in REQUIRES[u] for u in self.elements))
        for role in self.roles:
            self.param(f"{role}.wq", uniform_init(rng, d, (d, d), dtype))
            self.param(f"{role}.wk", uniform_init(rng, d, (d, d), dtype))
        for k in self.elements:
            self.param(f"{k}.wv", uniform_init(rng, d, (d, d), dtype))
            if zero_init:
                self.param(f"{k}.wo", np.zeros((d, d), dtype))
                self.param(f"{k}.bo", np.zeros(d, dtype))
            else:
                self.param(f"{k}.wo", uniform_init(rng, d, (d, d), dtype))
                self.param(f"{k}.bo", uniform_init(rng, d, (d,), dtype))
            self.child(f"{k}.mlp", MLP(d, d_hidden, d, rng, dtype, zero_out=zero_init))

    def stars(self):
        return {r: (self[f"{r}.wq"], self[f"{r}.wk"]) for r in self.roles}

    def __call__(self, xs, ops, patterns, train=False, rng=None, trace=None):
        missing = [k for k in self.requires if xs.get(k) is None]
        if missing:
            raise ConfigurationError(f"HodgeFormer layer updating {self.elements} needs inputs {missing}")
        ln = {k: layernorm_noaffine(xs[k]) for k in self.requires}
        stars = self.stars()
        out = dict(xs)
        for k in self.elements:
            values = ln[k] @ self[f"{k}.wv"]
            att = apply_laplacian(k, ln, values, ops, patterns, stars, self.heads, trace)
            att = dropout(linear(att, self[f"{k}.wo"], self[f"{k}.bo"]), self.dropout_p, rng, train)
            x = add(xs[k], att)
            mlp = self._children[f"{k}.mlp"]
            out[k] = add(x, mlp(layernorm_noaffine(x), self.dropout_p, train, rng))
        return out


def hodgeformer_layer(xs, layer, ops, patterns, train=False, rng=None):
    return layer(xs, ops, patterns, train, rng)


def vanilla_attention(x, wq, wk, wv, offsets, heads):
    """Per-segment linear attention with the ``elu + 1`` feature map."""
    return linear_attention(elu1(x @ wq), elu1(x @ wk), x @ wv, offsets, heads)


class VanillaLayer(Module):
    """Pre-LN transformer layer with linear attention, one per updated element kind."""

    kind = "vanilla"

    def __init__(self, d, heads, d_hidden, elements, rng, dropout_p=0.1, dtype=np.float32,
                 zero_init=True):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"d={d} is not divisible by h={heads}")
        self.d, self.heads, self.dropout_p = d, heads, dropout_p
        self.elements = _check_elements(elements)
        self.requires = self.elements
        for k in self.elements:
            for w in ("wq", "wk", "wv"):
                self.param(f"{k}.{w}", uniform_init(rng, d, (d, d), dtype))
            if zero_init:
                self.param(f"{k}.wo", np.zeros((d, d), dtype))
                self.param(f"{k}.bo", np.zeros(d, dtype))
            else:
                self.param(f"{k}.wo", uniform_init(rng, d, (d, d), dtype))
                self.param(f"{k}.bo", uniform_init(rng, d, (d,), dtype))
            self.child(f"{k}.mlp", MLP(d, d_hidden, d, rng, dtype, zero_out=zero_init))

    def __call__(self, xs, offsets, train=False, rng=None):
        out = dict(xs)
        for k in self.elements:
            if xs.get(k) is None:
                raise ConfigurationError(f"vanilla layer needs {k} inputs")
            out[k] = vanilla_layer(xs[k], self, k, offsets[k], train, rng)
        return out


def vanilla_layer(x, layer, k, offsets, train=False, rng=None):
    p = layer._params
    ln = layernorm_noaffine(x)
    att = vanilla_attention(ln, p[f"{k}.wq"], p[f"{k}.wk"], p[f"{k}.wv"], offsets, layer.heads)
    att = dropout(linear(att, p[f"{k}.wo"], p[f"{k}.bo"]), layer.dropout_p, rng, train)
    x = add(x, att)
    mlp = layer._children[f"{k}.mlp"]
    return add(x, mlp(layernorm_noaffine(x), layer.dropout_p, train, rng))


# ---------------------------------------------------------------- embedding and heads

def neighbor_mean_matrix(adj):
    """``I + D^-1 A``; rows of isolated elements reduce to the identity."""
    adj = sparse.csr_matrix(adj, dtype=np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return (sparse.identity(adj.shape[0], format="csr") + sparse.diags(inv) @ adj).tocsr()


class NeighborEmbedding(Module):
    """``MLP(x_in + mean of one-hop neighbors of x_in)``."""

    def __init__(self, d_raw, d, d_hidden, rng, dtype=np.float32):
        super().__init__()
        self.d_raw = d_raw
        self.mlp = self.child("mlp", MLP(d_raw, d_hidden, d, rng, dtype))

    def __call__(self, x_in, agg, train=False, rng=None):
        if x_in.shape[1] != self.d_raw:
            raise ValueError(f"embedding expects {self.d_raw} raw features, got {x_in.shape[1]}")
        x = Tensor(np.asarray(agg @ x_in, dtype=self.mlp["w1"].dtype))
        return self.mlp(x)


def neighbor_embedding(x_in, adjacency, embedding):
    return embedding(x_in, neighbor_mean_matrix(adjacency))


def pooling_matrix(offsets, dtype=np.float64):
    """(B, n) matrix averaging the rows of each segment."""
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)
    rows = np.repeat(np.arange(len(counts)), counts)
    vals = np.repeat(1.0 / np.maximum(counts, 1), counts).astype(dtype)
    return sparse.csr_matrix((vals, (rows, np.arange(offsets[-1]))), shape=(len(counts), offsets[-1]))


def face_average_matrix(faces, n_cols):
    """(n_f, n_cols) matrix averaging the three indexed rows of each face."""
    n_f = len(faces)
    return sparse.csr_matrix((np.full(3 * n_f, 1.0 / 3.0), (np.repeat(np.arange(n_f), 3), faces.ravel())),
                             shape=(n_f, n_cols))


class TaskHead(Module):
    """Mean-pool classifier or per-face segmenter on top of a final layer norm."""

    def __init__(self, task, d, d_hidden, num_classes, element, rng, dtype=np.float32):
        super().__init__()
        if task not in ("classification", "segmentation"):
            raise ConfigurationError(f"unknown task {task!r}")
        if element not in KINDS:
            raise ConfigurationError(f"unknown element kind {element!r}")
        self.task, self.element, self.num_classes = task, element, num_classes
        self.mlp = self.child("mlp", MLP(d, d_hidden, num_classes, rng, dtype))

    def __call__(self, xs, batch, train=False, rng=None, dropout_p=0.0):
        x = layernorm_noaffine(xs[self.element])
        if self.task == "classification":
            pooled = spmm(batch.pooling(self.element), x)
            return self.mlp(pooled, dropout_p, train, rng)
        if self.element != "f":
            x = spmm(batch.face_average(self.element), x)
        return self.mlp(x, dropout_p, train, rng)


def task_heads(xs, head, batch):
    return head(xs, batch)
