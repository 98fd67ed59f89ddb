"""Constrained monotone layers, adaptive activation gates and response heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .activations import (
    ActivationSelection,
    BASES,
    CluParams,
    ConvexBase,
    FpmParams,
    JUNCTION_LIMIT,
    combined,
    fpm,
    fpm_graph,
    unit_triplet,
)

HEADS = ("sigmoid", "fpm", "linear")


def check_indicator(t, require_monotone: bool = False) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 1 or not np.all(np.isin(t, (-1, 0, 1))):
        raise ValueError(f"monotonicity indicator must be a vector over {{-1, 0, 1}}, got {t!r}")
    if require_monotone and not np.any(t != 0):
        raise ValueError("indicator has no monotone entry")
    return t.astype(np.int64)


class ConstrainedLinear(dc.Module):
    """Affine layer whose effective weights follow the indicator's sign pattern.

    Column ``i`` of the effective weight is ``|w|`` where ``t_i = 1``,
    ``-|w|`` where ``t_i = -1`` and ``w`` itself where ``t_i = 0``. Biases are free.
    """

    def __init__(self, n_in: int, n_out: int, indicator, rng: np.random.Generator):
        self.indicator = check_indicator(indicator)
        if self.indicator.size != n_in:
            raise ValueError(f"indicator has {self.indicator.size} entries for {n_in} inputs")
        self.n_in, self.n_out = n_in, n_out
        self.w = dc.uniform_init(rng, (n_out, n_in), n_in)
        self.b = dc.uniform_init(rng, (n_out,), n_in)
        self._pos = (self.indicator == 1).astype(float)
        self._neg = (self.indicator == -1).astype(float)
        self._free = (self.indicator == 0).astype(float)

    def effective_weight(self) -> dc.Node:
        a = dc.abs_(self.w)
        w = a * (self._pos - self._neg)
        if self._free.any():
            w = w + self.w * self._free
        wv = w.value
        assert np.all(wv[:, self.indicator == 1] >= 0) and np.all(wv[:, self.indicator == -1] <= 0)
        return w

    def __call__(self, x: dc.Node) -> dc.Node:
        return constrained_forward(x, self)


def constrained_forward(x, layer: ConstrainedLinear) -> dc.Node:
    x = dc._as_node(x)
    if x.shape[-1] != layer.n_in:
        raise dc.ShapeError("constrained_forward", x.shape, (layer.n_out, layer.n_in))
    return dc.matmul(x, dc.transpose(layer.effective_weight())) + layer.b


class TrainableClu(dc.Module):
    """CLU shape parameters kept inside the convex domain by construction.

    ``omega0 = exp(u)`` and ``omega0 * omega1 = 4 * sigmoid(v)``, so the junction
    condition holds for every real ``(u, v)`` without clamping.
    """

    def __init__(self, omega0: float = 2.0, product: float = 3.9):
        self.u = dc.Parameter(np.log(omega0))
        self.v = dc.Parameter(np.log(product / (JUNCTION_LIMIT - product)))

    def omegas(self) -> tuple[dc.Node, dc.Node]:
        w0 = dc.exp(self.u)
        w1 = JUNCTION_LIMIT * dc.sigmoid(self.v) / w0
        return w0, w1

    def base(self) -> ConvexBase:
        return ConvexBase(*self.omegas())

    def params(self) -> CluParams:
        w0, w1 = self.omegas()
        return CluParams(float(w0.value), float(w1.value))


def check_gates(gates) -> np.ndarray:
    g = gates.value if isinstance(gates, dc.Node) else np.asarray(gates, dtype=float)
    if g.shape[-1] != 3 or np.any(g < -1e-12) or np.any(np.abs(g.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("gates must have a trailing axis of 3 with rows on the simplex")
    return g


def adaptive_combined(h, gates, p: CluParams = CluParams(), base: Callable | None = None):
    """Per-unit convex mix ``g1*convex(h) + g2*concave(h) + g3*saturated(h)``.

    ``gates`` has shape ``h.shape + (3,)``. Works on numpy arrays or graph nodes.
    """
    check_gates(gates)
    convex, conc, sat = unit_triplet(base if base is not None else ConvexBase(p.omega0, p.omega1))
    if isinstance(h, dc.Node) or isinstance(gates, dc.Node):
        g = dc._as_node(gates)
        return g[..., 0] * convex(h) + g[..., 1] * conc(h) + g[..., 2] * sat(h)
    g = np.asarray(gates, dtype=float)
    return g[..., 0] * convex(h) + g[..., 1] * conc(h) + g[..., 2] * sat(h)


class AdaptiveGates(dc.Module):
    """Context-only gate generator: per-unit attention over the three unit kinds."""

    def __init__(self, d_context: int, width: int, rng: np.random.Generator, d_key: int = 4):
        self.width, self.d_key = width, d_key
        self.query = dc.Linear(d_context, width * d_key, rng)
        self.keys = dc.uniform_init(rng, (3, d_key), d_key)
        self.bias = dc.Parameter(np.zeros((width, 3)))

    def __call__(self, context: dc.Node) -> dc.Node:
        q = dc.relu(self.query(context))
        q = dc.reshape(q, q.shape[:-1] + (self.width, self.d_key))
        logits = dc.matmul(q, dc.transpose(self.keys)) * (1.0 / np.sqrt(self.d_key)) + self.bias
        return dc.softmax(logits, axis=-1)


class GlobalFpm(dc.Module):
    """Context-free FPM head with reparameterized, always-valid parameters."""

    def __init__(self, floor: float = 0.1, ceiling: float = 0.7, slope: float = 4.0, inflection: float = 0.5):
        self.a0 = dc.Parameter(np.log(floor / (1 - floor)))
        r = (ceiling - floor) / (1 - floor)
        self.a3 = dc.Parameter(np.log(r / (1 - r)))
        self.a1 = dc.Parameter(np.log(np.expm1(slope)))
        self.a2 = dc.Parameter(inflection)

    def omegas(self):
        w0 = dc.sigmoid(self.a0)
        w3 = w0 + (1.0 - w0) * dc.sigmoid(self.a3)
        return w0, dc.softplus(self.a1), self.a2, w3

    def params(self) -> FpmParams:
        return FpmParams(*(float(w.value) for w in self.omegas()))


def fpm_head(h, p: FpmParams):
    """Increasing map of a scalar score into ``(omega0, omega3)``."""
    if isinstance(h, dc.Node):
        return fpm_graph(h, *p.as_tuple())
    return fpm(h, p)


@dataclass
class MonotoneNetworkSpec:
    """Layer widths ``[n_in, hidden..., 1]`` plus per-hidden-layer activation choices."""

    widths: list[int]
    indicator: list[int]
    selections: list[ActivationSelection] = field(default_factory=list)
    head: str = "sigmoid"
    base: str = "clu"
    gated: bool = False
    d_context: int = 0

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ValueError("widths must run from input width to a single output")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.base not in ("clu", "sigmoid", *BASES):
            raise ValueError(f"unknown base activation {self.base!r}")
        hidden = self.widths[1:-1]
        if not self.selections:
            self.selections = [ActivationSelection.split(m) for m in hidden]
        if len(self.selections) != len(hidden):
            raise ValueError("one selection per hidden layer is required")
        for m, sel in zip(hidden, self.selections):
            if sel.width != m:
                raise ValueError(f"selection {sel} does not cover width {m}")
        if len(self.indicator) != self.widths[0]:
            raise ValueError("indicator length must equal the input width")
        check_indicator(self.indicator)
        if self.gated and self.d_context <= 0:
            raise ValueError("gated networks need a positive context width")

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "indicator": [int(v) for v in self.indicator],
            "selections": [[s.s_convex, s.s_concave, s.s_saturated] for s in self.selections],
            "head": self.head,
            "base": self.base,
            "gated": self.gated,
            "d_context": self.d_context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneNetworkSpec":
        d = dict(d)
        d["selections"] = [ActivationSelection(*s) for s in d["selections"]]
        return cls(**d)


class MonotoneNetwork(dc.Module):
    """Stack of constrained layers; monotone in inputs with a nonzero indicator.

    Only the first layer uses the supplied indicator. Later layers see
    increasing functions of the monotone inputs and use all-ones indicators.
    """

    def __init__(self, spec: MonotoneNetworkSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers = []
        for k, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            t = spec.indicator if k == 0 else np.ones(a, dtype=int)
            self.layers.append(ConstrainedLinear(a, b, t, rng))
        hidden = spec.widths[1:-1]
        self.units = [TrainableClu() for _ in hidden] if spec.base == "clu" else []
        self.gates = [AdaptiveGates(spec.d_context, m, rng) for m in hidden] if spec.gated else []
        self.fpm = GlobalFpm() if spec.head == "fpm" else None

    def _base(self, k: int):
        return self.units[k].base() if self.spec.base == "clu" else BASES[self.spec.base]

    def layer_gates(self, context) -> list[dc.Node]:
        context = dc._as_node(context)
        return [g(context) for g in self.gates]

    def score(self, x, context=None) -> dc.Node:
        """Pre-head scalar score of shape ``(batch, 1)``."""
        h = dc._as_node(x)
        gates = self.layer_gates(context) if self.spec.gated else None
        for k, layer in enumerate(self.layers[:-1]):
            h = layer(h)
            if self.spec.base == "sigmoid":
                h = dc.sigmoid(h)
            elif gates is not None:
                h = adaptive_combined(h, gates[k], base=self._base(k))
            else:
                h = combined(h, self.spec.selections[k], base=self._base(k))
        return self.layers[-1](h)

    def head(self, h: dc.Node, fpm_params: Sequence | None = None) -> dc.Node:
        kind = self.spec.head
        if kind == "linear":
            return h
        if kind == "sigmoid":
            return dc.sigmoid(h)
        omegas = fpm_params if fpm_params is not None else self.fpm.omegas()
        return fpm_graph(h, *omegas)

    def __call__(self, x, context=None, fpm_params: Sequence | None = None) -> dc.Node:
        return self.head(self.score(x, context), fpm_params)

    def predict(self, x, context=None) -> np.ndarray:
        return self(np.asarray(x, dtype=float), context).value[:, 0]


def monotone_forward(x, spec: MonotoneNetworkSpec, params: dict[str, np.ndarray], context=None) -> np.ndarray:
    """Evaluate a network described by ``spec`` with the given named parameter values."""
    net = MonotoneNetwork(spec, np.random.default_rng(0))
    load_parameters(net, params)
    return net.predict(x, context)


def load_parameters(module: dc.Module, values: dict[str, np.ndarray]) -> None:
    named = module.named_parameters()
    missing = set(named) - set(values)
    extra = set(values) - set(named)
    if missing or extra:
        raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, p in named.items():
        v = np.asarray(values[k], dtype=np.float64)
        if v.shape != p.shape:
            raise dc.ShapeError(f"load {k}", p.shape, v.shape)
        p.value = v.copy()


@dataclass
class ViolationReport:
    count: int
    n_chains: int
    worst_gap: float = 0.0
    worst_pair: tuple[np.ndarray, np.ndarray] | None = None


def monotone_violation_scan(
    predict: Callable[[np.ndarray], np.ndarray],
    sample: Callable[[np.random.Generator, int], np.ndarray],
    indicator,
    n_chains: int,
    seed: int = 0,
    max_step: float = 1.0,
    tol: float = 1e-12,
) -> ViolationReport:
    """Look for pairs ``x <= y`` (in the indicator's order) with ``f(x) > f(y) + tol``.

    ``y`` moves each monotone coordinate of ``x`` by a random non-negative
    amount in the indicator's direction; free coordinates are left equal.
    """
    t = check_indicator(indicator)
    if n_chains <= 0:
        return ViolationReport(0, 0)
    rng = np.random.default_rng(seed)
    x = np.asarray(sample(rng, n_chains), dtype=float)
    step = rng.uniform(0.0, max_step, size=x.shape) * t
    y = x + step
    fx, fy = predict(x), predict(y)
    gap = fx - fy
    bad = gap > tol
    report = ViolationReport(int(bad.sum()), n_chains)
    if bad.any():
        k = int(np.argmax(gap))
        report.worst_gap = float(gap[k])
        report.worst_pair = (x[k], y[k])
    return report
