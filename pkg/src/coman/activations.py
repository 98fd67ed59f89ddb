"""Monotone activation functions built from a convex base unit.

The convex linear unit (CLU) is the identity for ``x >= 0`` and a shifted,
scaled sigmoid for ``x < 0``. From any convex, increasing, lower-bounded,
zero-centred base ``f`` we derive

* a concave unit ``-f(-x)`` (point reflection), and
* a saturated unit that follows ``f`` shifted left of zero and the concave
  unit shifted right of zero, bounded on both sides.

All functions accept numpy arrays; the ``*_from`` builders and :class:`ConvexBase`
also accept :class:`~coman.diffcore.Node` inputs so the same definitions are
used in training graphs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from . import diffcore as dc

# omega0 * omega1 above this breaks convexity at the junction x = 0
JUNCTION_LIMIT = 4.0


@dataclass(frozen=True)
class CluParams:
    omega0: float = 2.0
    omega1: float = 2.0

    def __post_init__(self):
        if not (self.omega0 > 0 and self.omega1 > 0):
            raise ValueError(f"CLU parameters must be positive, got {self.omega0}, {self.omega1}")
        if self.omega0 * self.omega1 > JUNCTION_LIMIT * (1 + 1e-12):
            raise ValueError(
                f"omega0*omega1 = {self.omega0 * self.omega1:.6g} exceeds {JUNCTION_LIMIT}; "
                "the unit would not be convex at 0"
            )

    @classmethod
    def unchecked(cls, omega0: float, omega1: float) -> "CluParams":
        """Build params skipping the junction check (for counterexample studies)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "omega0", float(omega0))
        object.__setattr__(obj, "omega1", float(omega1))
        return obj


@dataclass(frozen=True)
class FpmParams:
    """Four-parameter sigmoid response: floor, slope scale, inflection, ceiling."""

    omega0: float
    omega1: float
    omega2: float
    omega3: float

    def __post_init__(self):
        if not (0.0 <= self.omega0 < self.omega3 <= 1.0):
            raise ValueError(f"need 0 <= omega0 < omega3 <= 1, got {self.omega0}, {self.omega3}")
        if not self.omega1 > 0:
            raise ValueError(f"omega1 must be positive, got {self.omega1}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.omega0, self.omega1, self.omega2, self.omega3)


@dataclass(frozen=True)
class ActivationSelection:
    s_convex: int
    s_concave: int
    s_saturated: int

    def __post_init__(self):
        if min(self.s_convex, self.s_concave, self.s_saturated) < 0:
            raise ValueError("selection counts must be non-negative")

    @property
    def width(self) -> int:
        return self.s_convex + self.s_concave + self.s_saturated

    @classmethod
    def split(cls, m: int, kind: str = "mixed") -> "ActivationSelection":
        if kind == "convex":
            return cls(m, 0, 0)
        if kind == "concave":
            return cls(0, m, 0)
        if kind == "saturated":
            return cls(0, 0, m)
        a = m // 3 + (m % 3 > 0)
        b = m // 3 + (m % 3 > 1)
        return cls(a, b, m - a - b)


# ---------------------------------------------------------------------------
# numpy kernels

def _clu_np(x, omega0, omega1):
    x = np.asarray(x, dtype=np.float64)
    neg = -0.5 * omega0 + omega0 * expit(omega1 * np.minimum(x, 0.0))
    return np.where(x >= 0, x, neg)


def clu(x, p: CluParams = CluParams()):
    """Convex linear unit."""
    out = _clu_np(x, p.omega0, p.omega1)
    return float(out) if np.ndim(out) == 0 else out


def clu_derivative(x, p: CluParams = CluParams()):
    x = np.asarray(x, dtype=np.float64)
    s = expit(p.omega1 * np.minimum(x, 0.0))
    return np.where(x >= 0, 1.0, p.omega0 * p.omega1 * s * (1.0 - s))


def clu_graph(x, omega0, omega1) -> dc.Node:
    """CLU as a graph op, differentiable in ``x`` and both shape parameters."""
    x, w0, w1 = dc._as_node(x), dc._as_node(omega0), dc._as_node(omega1)
    xv = x.value
    negmask = xv < 0
    xn = np.where(negmask, xv, 0.0)
    s = expit(w1.value * xn)
    ds = s * (1.0 - s)
    out = np.where(negmask, -0.5 * w0.value + w0.value * s, xv)

    def backward(g):
        gx = g * np.where(negmask, w0.value * w1.value * ds, 1.0)
        g0 = g * np.where(negmask, s - 0.5, 0.0)
        g1 = g * np.where(negmask, w0.value * xn * ds, 0.0)
        return gx, g0, g1

    return dc.Node(out, "clu", (x, w0, w1), backward)


def relu(x):
    if isinstance(x, dc.Node):
        return dc.relu(x)
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def elu(x, alpha: float = 1.0):
    if isinstance(x, dc.Node):
        return dc.elu(x, alpha)
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


class ConvexBase:
    """Polymorphic CLU: numpy in, numpy out; any Node involved, Node out."""

    def __init__(self, omega0=2.0, omega1=2.0):
        self.omega0 = omega0
        self.omega1 = omega1

    def __call__(self, x):
        if isinstance(x, dc.Node) or isinstance(self.omega0, dc.Node) or isinstance(self.omega1, dc.Node):
            return clu_graph(x, self.omega0, self.omega1)
        return _clu_np(x, self.omega0, self.omega1)


BASES: dict[str, Callable] = {"relu": relu, "elu": elu}


def _where(cond, a, b):
    if isinstance(a, dc.Node) or isinstance(b, dc.Node):
        return dc.where(cond, a, b)
    return np.where(cond, a, b)


def _value(x):
    return x.value if isinstance(x, dc.Node) else np.asarray(x, dtype=np.float64)


def _one_like(x):
    return dc.constant(1.0) if isinstance(x, dc.Node) else 1.0


# ---------------------------------------------------------------------------
# derived units

def concave_from(base: Callable) -> Callable:
    def concave(x):
        return -base(-x)

    return concave


def saturated_from(base: Callable) -> Callable:
    concave = concave_from(base)

    def saturated(x):
        one = _one_like(x)
        at_one = base(one)
        left = base(x + 1.0) - at_one
        right = concave(x - 1.0) + at_one
        return _where(_value(x) < 0, left, right)

    return saturated


def concave(x, p: CluParams = CluParams()):
    return concave_from(ConvexBase(p.omega0, p.omega1))(x)


def saturated(x, p: CluParams = CluParams()):
    return saturated_from(ConvexBase(p.omega0, p.omega1))(x)


def unit_triplet(base: Callable) -> tuple[Callable, Callable, Callable]:
    return base, concave_from(base), saturated_from(base)


def combined(h, sel: ActivationSelection, p: CluParams = CluParams(), base: Callable | None = None):
    """Apply convex, concave and saturated units to consecutive blocks of the last axis."""
    m = _value(h).shape[-1]
    if sel.width != m:
        raise ValueError(f"selection covers {sel.width} units but h has width {m}")
    convex, conc, sat = unit_triplet(base if base is not None else ConvexBase(p.omega0, p.omega1))
    col = np.arange(m)
    out = _where(col < sel.s_convex + sel.s_concave, conc(h), sat(h))
    return _where(col < sel.s_convex, convex(h), out)


def heaviside_approx(x, a: float, p: CluParams = CluParams()):
    """Affinely normalized saturated unit evaluated at ``a * x``; tends to the step as a grows."""
    if not a > 0:
        raise ValueError("scale a must be positive")
    lower = -0.5 * p.omega0
    c1 = clu(1.0, p)
    return (saturated(a * np.asarray(x, dtype=np.float64), p) - lower + c1) / (2.0 * (-lower + c1))


def fpm(t, p: FpmParams):
    """Four-parameter response ``omega0 + (omega3 - omega0) * sigmoid(omega1 * (t - omega2))``."""
    out = p.omega0 + (p.omega3 - p.omega0) * expit(p.omega1 * (np.asarray(t, dtype=np.float64) - p.omega2))
    return float(out) if np.ndim(out) == 0 else out


def fpm_slope(t, p: FpmParams):
    s = expit(p.omega1 * (np.asarray(t, dtype=np.float64) - p.omega2))
    return (p.omega3 - p.omega0) * p.omega1 * s * (1.0 - s)


def fpm_graph(h, omega0, omega1, omega2, omega3) -> dc.Node:
    return omega0 + (omega3 - omega0) * dc.sigmoid(omega1 * (h - omega2))
