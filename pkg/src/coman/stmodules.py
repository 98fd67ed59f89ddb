"""Spatio-temporal conditioning: embeddings, temporal activation, temporal target
attention, the FPM parameter generator and a small PLE multi-task backbone."""
from __future__ import annotations

from enum import IntEnum
from typing import Sequence

import numpy as np

from . import diffcore as dc


class Period(IntEnum):
    BREAKFAST = 0
    LUNCH = 1
    AFTERNOON_TEA = 2
    DINNER = 3
    MIDNIGHT_SNACK = 4


# start hour of each period; midnight snack wraps past 24:00
_PERIOD_STARTS = ((4, Period.BREAKFAST), (10, Period.LUNCH), (14, Period.AFTERNOON_TEA),
                  (17, Period.DINNER), (20, Period.MIDNIGHT_SNACK))


def period_of(hour: float) -> Period:
    """Map a clock time in hours ``[0, 24)`` to its meal period."""
    if not 0 <= hour < 24:
        raise ValueError(f"hour must be in [0, 24), got {hour}")
    current = Period.MIDNIGHT_SNACK
    for start, period in _PERIOD_STARTS:
        if hour >= start:
            current = period
    return current


class EmbeddingSet(dc.Module):
    """Named embedding tables with a reserved out-of-vocabulary row 0.

    Ids ``0..vocab-1`` map to rows ``1..vocab``; anything else (negative
    padding, unseen ids) maps to row 0.
    """

    def __init__(self, vocab: dict[str, int], dims: dict[str, int], rng: np.random.Generator):
        self.vocab = dict(vocab)
        self.dims = {k: dims[k] for k in vocab}
        self.tables = [dc.Parameter(rng.normal(0.0, 0.1, size=(vocab[k] + 1, self.dims[k]))) for k in vocab]
        self._index = {k: i for i, k in enumerate(vocab)}

    def rows(self, name: str, ids) -> np.ndarray:
        ids = np.asarray(ids).astype(np.int64)
        ok = (ids >= 0) & (ids < self.vocab[name])
        return np.where(ok, ids + 1, 0)

    def __call__(self, name: str, ids) -> dc.Node:
        return dc.take(self.tables[self._index[name]], self.rows(name, ids))


def equal_frequency_edges(values: np.ndarray, n_bins: int = 16) -> np.ndarray:
    """Interior bin edges splitting ``values`` into ``n_bins`` equally populated bins."""
    qs = np.quantile(np.asarray(values, dtype=float), np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.unique(qs)


def discretize(values, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(values, dtype=float), side="right")


class TemporalActivation(dc.Module):
    def __init__(self, d_st: int, d_l: int, rng: np.random.Generator):
        self.d_l = d_l
        self.project = dc.Linear(d_st, d_l, rng)

    def __call__(self, e_st: dc.Node, e_l: dc.Node) -> dc.Node:
        return temporal_activation(e_st, e_l, self.project)


def temporal_activation(e_st, e_l, project) -> dc.Node:
    """``sigmoid(proj(e_st) . e_l / sqrt(d)) * e_l + e_l`` row-wise."""
    e_l = dc._as_node(e_l)
    q = project(dc._as_node(e_st))
    if q.shape[-1] != e_l.shape[-1]:
        raise dc.ShapeError("temporal_activation", q.shape, e_l.shape)
    d = e_l.shape[-1]
    score = dc.sum_(q * e_l, axis=-1, keepdims=True) * (1.0 / np.sqrt(d))
    return dc.sigmoid(score) * e_l + e_l


class TemporalTargetAttention(dc.Module):
    """Query/key/value projections whose weights and biases are generated from e_st."""

    def __init__(self, d_st: int, d_item: int, d_k: int, rng: np.random.Generator):
        self.d_item, self.d_k = d_item, d_k
        self.gen_w = dc.Linear(d_st, 3 * d_k * d_item, rng)
        self.gen_b = dc.Linear(d_st, 3 * d_k, rng)

    def projections(self, e_st: dc.Node):
        n = e_st.shape[0]
        w = dc.reshape(self.gen_w(e_st) * (1.0 / np.sqrt(self.d_item)), (n, 3, self.d_k, self.d_item))
        b = dc.reshape(self.gen_b(e_st), (n, 3, 1, self.d_k))
        return [(w[:, i], b[:, i]) for i in range(3)]

    def __call__(self, e_q: dc.Node, e_s: dc.Node, e_st: dc.Node, mask=None) -> dc.Node:
        return temporal_target_attention(e_q, e_s, self.projections(e_st), mask)


def temporal_target_attention(e_q, e_s, projections, mask=None) -> dc.Node:
    """Single-query attention over a behaviour sequence.

    ``e_q`` is ``(n, d)``, ``e_s`` is ``(n, L, d)``; ``projections`` holds per-sample
    ``(w, b)`` pairs for query, key and value with ``w`` of shape ``(n, d_k, d)``
    and ``b`` of shape ``(n, 1, d_k)``. ``mask`` flags real (non-padding) items;
    rows with no real items return zeros.
    """
    e_q, e_s = dc._as_node(e_q), dc._as_node(e_s)
    (wq, bq), (wk, bk), (wv, bv) = projections
    n, L = e_s.shape[0], e_s.shape[1]
    if L == 0:
        return dc.constant(np.zeros((n, wv.shape[1])))
    q = dc.matmul(dc.reshape(e_q, (n, 1, -1)), dc.transpose(wq)) + bq
    k = dc.matmul(e_s, dc.transpose(wk)) + bk
    v = dc.matmul(e_s, dc.transpose(wv)) + bv
    d_k = q.shape[-1]
    logits = dc.matmul(q, dc.transpose(k)) * (1.0 / np.sqrt(d_k))
    mask = np.ones((n, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    logits = logits + np.where(mask, 0.0, -1e30)[:, None, :]
    weights = dc.softmax(logits, axis=-1)
    out = dc.reshape(dc.matmul(weights, v), (n, -1))
    any_real = mask.any(axis=1, keepdims=True).astype(float)
    return out * any_real


def attention_weights(logits) -> np.ndarray:
    return dc.softmax(np.atleast_2d(np.asarray(logits, dtype=float))).value


class StAttention(dc.Module):
    """Generate per-sample FPM parameters from the fused representation and e_st.

    Each of the four parameters is ``FC(<w_i(e_st), FC(r_f)> + b_i(e_st))``
    followed by its squashing: sigmoid for the floor, floor plus sigmoid share
    of the headroom for the ceiling, softplus for the slope and a sigmoid onto
    the unit interval (the normalized treatment range) for the inflection.
    """

    def __init__(self, d_rf: int, d_st: int, rng: np.random.Generator, d_hidden: int = 8,
                 slope_init: float = 6.0):
        self.d_hidden = d_hidden
        self.encode = dc.Linear(d_rf, d_hidden, rng)
        self.gen_w = dc.Linear(d_st, 4 * d_hidden, rng)
        self.gen_b = dc.Linear(d_st, 4, rng)
        self.out_scale = dc.Parameter(np.full(4, 0.5))
        self.out_bias = dc.Parameter(np.array([-1.5, np.log(np.expm1(slope_init)), 0.0, 0.5]))

    def raw(self, r_f: dc.Node, e_st: dc.Node) -> dc.Node:
        n = r_f.shape[0]
        z = dc.leaky_relu(self.encode(r_f))
        w = dc.reshape(self.gen_w(e_st), (n, 4, self.d_hidden))
        u = dc.sum_(w * dc.reshape(z, (n, 1, self.d_hidden)), axis=-1) + self.gen_b(e_st)
        return u * self.out_scale + self.out_bias

    def __call__(self, r_f: dc.Node, e_st: dc.Node) -> tuple[dc.Node, dc.Node, dc.Node, dc.Node]:
        return squash_fpm(self.raw(r_f, e_st))


def squash_fpm(raw: dc.Node) -> tuple[dc.Node, dc.Node, dc.Node, dc.Node]:
    """Map unconstrained ``(n, 4)`` scores to valid FPM parameters, each ``(n, 1)``."""
    w0 = dc.sigmoid(raw[:, 0:1])
    w1 = dc.softplus(raw[:, 1:2])
    w2 = dc.sigmoid(raw[:, 2:3])
    w3 = w0 + (1.0 - w0) * dc.sigmoid(raw[:, 3:4])
    return w0, w1, w2, w3


def st_attention_params(r_f, e_st, module: StAttention):
    """Numeric FPM parameters per row: array of shape ``(n, 4)``."""
    omegas = module(dc._as_node(r_f), dc._as_node(e_st))
    return np.concatenate([w.value for w in omegas], axis=1)


class MLP(dc.Module):
    def __init__(self, widths: Sequence[int], rng: np.random.Generator, dropout: float = 0.0,
                 final_activation: bool = True):
        self.layers = [dc.Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.dropout = dropout
        self.final_activation = final_activation

    def __call__(self, x: dc.Node, rng: np.random.Generator | None = None) -> dc.Node:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1 or self.final_activation:
                x = dc.dropout(dc.relu(x), self.dropout, rng)
        return x


class PleBackbone(dc.Module):
    """Single extraction level: shared and task-specific experts mixed by per-task gates."""

    def __init__(self, d_in: int, n_tasks: int, rng: np.random.Generator, n_shared: int = 2,
                 n_specific: int = 1, expert_widths: Sequence[int] = (32, 16), gate_hidden: int = 16,
                 dropout: float = 0.0):
        if n_shared + n_specific < 1:
            raise ValueError("need at least one expert per task")
        self.n_tasks, self.n_shared, self.n_specific = n_tasks, n_shared, n_specific
        widths = [d_in, *expert_widths]
        self.shared = [MLP(widths, rng, dropout) for _ in range(n_shared)]
        self.specific = [[MLP(widths, rng, dropout) for _ in range(n_specific)] for _ in range(n_tasks)]
        self.gates = [MLP([d_in, gate_hidden, n_shared + n_specific], rng, dropout, final_activation=False)
                      for _ in range(n_tasks)]
        self.d_out = expert_widths[-1]

    def named_parameters(self, prefix: str = ""):
        out = {}
        for i, m in enumerate(self.shared):
            out.update(m.named_parameters(f"{prefix}shared.{i}."))
        for t, experts in enumerate(self.specific):
            for i, m in enumerate(experts):
                out.update(m.named_parameters(f"{prefix}specific.{t}.{i}."))
        for t, g in enumerate(self.gates):
            out.update(g.named_parameters(f"{prefix}gates.{t}."))
        return out

    def gate_weights(self, x: dc.Node, task: int, rng=None) -> dc.Node:
        return dc.softmax(self.gates[task](x, rng), axis=-1)

    def __call__(self, x: dc.Node, rng: np.random.Generator | None = None) -> tuple[dc.Node, list[dc.Node]]:
        return ple_forward(self, x, rng)


def ple_forward(ple: PleBackbone, x, rng=None) -> tuple[dc.Node, list[dc.Node]]:
    """Return the fused representation (first task's mixture) and every task's mixture."""
    x = dc._as_node(x)
    shared = [e(x, rng) for e in ple.shared]
    mixtures = []
    for t in range(ple.n_tasks):
        experts = shared + [e(x, rng) for e in ple.specific[t]]
        g = ple.gate_weights(x, t, rng)
        mix = None
        for k, out in enumerate(experts):
            term = g[:, k:k + 1] * out
            mix = term if mix is None else mix + term
        mixtures.append(mix)
    return mixtures[0], mixtures
