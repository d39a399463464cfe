"""Comparison-function algebra: class K, class K-infinity, and extended variants.

These scalar maps (strictly increasing, zero at zero) parameterize every
safety condition in the package: the barrier decay rate, the disturbance
gain, the set-inflation gain, and the sandwich bounds used by compatible
projections. Closed forms are kept wherever they exist so that inverses and
compositions stay cheap and exact.

Families:
    Linear(k)              k * r
    Power(c, p)            c * |r|**p * sign(r)   (odd extension on r < 0)
    Composition(o, i)      o(i(r))
    TabulatedMonotone(..)  monotone piecewise-linear interpolation

The odd extension for ``Power`` is the library's canonical rule for
extending class-K functions to negative arguments; it makes every family
usable as an extended class-K function without separate code paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CLASS_K = "class_k"
CLASS_K_INF = "class_k_inf"
EXTENDED_CLASS_K = "extended_class_k"
EXTENDED_CLASS_K_INF = "extended_class_k_inf"

#: Fixed geometric grid used for unboundedness probes and spot checks.
PROBE_GRID = tuple(sorted(s * 10.0**j for s in (-1.0, 1.0) for j in range(-3, 4)))


class DomainError(ValueError):
    """Argument lies outside the comparison function's domain."""


class NotInvertibleError(ValueError):
    """The comparison function has no closed-form or tabulated inverse."""


@dataclass(frozen=True)
class DomainKind:
    """Domain descriptor for a comparison function.

    ``kind`` is one of the four class names above. Bounded class-K domains
    are [0, upper); bounded extended domains are (lower, upper). Tabulated
    families close both endpoints so interpolation covers the whole table.
    """

    kind: str
    lower: float = 0.0
    upper: float = math.inf
    closed: bool = False

    @property
    def extended(self) -> bool:
        return self.kind in (EXTENDED_CLASS_K, EXTENDED_CLASS_K_INF)

    @property
    def unbounded(self) -> bool:
        return self.kind in (CLASS_K_INF, EXTENDED_CLASS_K_INF)

    def contains(self, r: float) -> bool:
        if r == 0.0:
            return True
        if self.closed:
            return self.lower <= r <= self.upper
        low_ok = r > self.lower if self.extended else r >= 0.0
        return low_ok and r < self.upper


def class_k(a: float = math.inf) -> DomainKind:
    if a == math.inf:
        return DomainKind(CLASS_K_INF, 0.0, math.inf)
    return DomainKind(CLASS_K, 0.0, a)


def extended_class_k(a: float = math.inf, b: float = math.inf) -> DomainKind:
    if a == math.inf and b == math.inf:
        return DomainKind(EXTENDED_CLASS_K_INF, -math.inf, math.inf)
    return DomainKind(EXTENDED_CLASS_K, -b, a)


class ComparisonFunction:
    """Base class. Instances are immutable and safe to share across tasks."""

    domain_kind: DomainKind

    def __call__(self, r: float) -> float:
        if not self.domain_kind.contains(r):
            raise DomainError(
                f"{r!r} outside domain ({self.domain_kind.lower}, "
                f"{self.domain_kind.upper}) of {self!r}"
            )
        return self._eval(float(r))

    def _eval(self, r: float) -> float:
        raise NotImplementedError

    def inverse(self) -> "ComparisonFunction":
        raise NotInvertibleError(f"{type(self).__name__} has no closed-form inverse")


@dataclass(frozen=True)
class Linear(ComparisonFunction):
    """r -> k * r with k > 0. Extended class K-infinity."""

    k: float
    domain_kind: DomainKind = extended_class_k()

    def __post_init__(self):
        if not self.k > 0.0:
            raise ValueError(f"Linear slope must be positive, got {self.k}")

    def _eval(self, r: float) -> float:
        return self.k * r

    def inverse(self) -> "Linear":
        return Linear(1.0 / self.k, self.domain_kind)


@dataclass(frozen=True)
class Power(ComparisonFunction):
    """r -> c * |r|**p * sign(r) with c, p > 0 (odd extension)."""

    c: float
    p: float
    domain_kind: DomainKind = extended_class_k()

    def __post_init__(self):
        if not (self.c > 0.0 and self.p > 0.0):
            raise ValueError(f"Power needs c > 0 and p > 0, got c={self.c}, p={self.p}")

    def _eval(self, r: float) -> float:
        if r == 0.0:
            return 0.0
        return self.c * abs(r) ** self.p * math.copysign(1.0, r)

    def inverse(self) -> "Power":
        # y = c |r|^p sign(r)  =>  r = (|y|/c)^(1/p) sign(y)
        return Power(self.c ** (-1.0 / self.p), 1.0 / self.p, self.domain_kind)


@dataclass(frozen=True)
class Composition(ComparisonFunction):
    """outer(inner(r)). Build through :func:`compose` to get domain checks."""

    outer: ComparisonFunction
    inner: ComparisonFunction
    domain_kind: DomainKind

    def _eval(self, r: float) -> float:
        return self.outer(self.inner(r))

    def inverse(self) -> "Composition":
        # (o . i)^-1 = i^-1 . o^-1; raises if either part lacks an inverse.
        return compose(self.inner.inverse(), self.outer.inverse())


@dataclass(frozen=True)
class TabulatedMonotone(ComparisonFunction):
    """Monotone piecewise-linear interpolant through (r, value) breakpoints.

    Lets callers certify with empirically sampled comparison functions. The
    constructor only requires strictly increasing abscissae; whether the
    table actually describes a class-K function is checked by
    :func:`verify_class_membership`, not here, so deliberately broken tables
    can be built and reported on.
    """

    breakpoints: tuple

    def __init__(self, breakpoints: Sequence[Sequence[float]]):
        pts = tuple((float(r), float(v)) for r, v in breakpoints)
        if len(pts) < 2:
            raise ValueError("need at least two breakpoints")
        rs = [r for r, _ in pts]
        if any(r2 <= r1 for r1, r2 in zip(rs, rs[1:])):
            raise ValueError("breakpoint abscissae must be strictly increasing")
        object.__setattr__(self, "breakpoints", pts)
        lo, hi = rs[0], rs[-1]
        kind = EXTENDED_CLASS_K if lo < 0.0 else CLASS_K
        object.__setattr__(self, "domain_kind", DomainKind(kind, lo, hi, closed=True))

    def _eval(self, r: float) -> float:
        rs = [p[0] for p in self.breakpoints]
        vs = [p[1] for p in self.breakpoints]
        return float(np.interp(r, rs, vs))

    def inverse(self) -> "TabulatedMonotone":
        vs = [p[1] for p in self.breakpoints]
        if any(v2 <= v1 for v1, v2 in zip(vs, vs[1:])):
            raise NotInvertibleError("table values are not strictly increasing")
        return TabulatedMonotone([(v, r) for r, v in self.breakpoints])


def compose(outer: ComparisonFunction, inner: ComparisonFunction) -> Composition:
    """Composition outer(inner(r)).

    The range of ``inner`` must sit inside the domain of ``outer``
    (checked at the domain endpoints, which suffices by monotonicity).
    The result carries the weakest common class of the two operands:
    extended only if both are extended, unbounded only if both are, with
    the inner function's domain bounds.
    """
    ik, ok = inner.domain_kind, outer.domain_kind
    if math.isinf(ik.upper):
        if not math.isinf(ok.upper):
            raise DomainError("inner range is unbounded above but outer domain is not")
    else:
        top = inner._eval(ik.upper if ik.closed else math.nextafter(ik.upper, 0.0))
        if not ok.contains(top):
            raise DomainError(f"range of inner reaches {top}, outside domain of outer")
    if ik.extended:
        if math.isinf(ik.lower):
            if not (ok.extended and math.isinf(ok.lower)):
                raise DomainError("inner range is unbounded below but outer domain is not")
        else:
            bottom = inner._eval(ik.lower if ik.closed else math.nextafter(ik.lower, 0.0))
            if not ok.contains(bottom):
                raise DomainError(f"range of inner reaches {bottom}, outside domain of outer")
    extended = ik.extended and ok.extended
    unbounded = ik.unbounded and ok.unbounded
    if unbounded:
        kind = extended_class_k() if extended else class_k()
    else:
        name = EXTENDED_CLASS_K if extended else CLASS_K
        lower = ik.lower if extended else 0.0
        kind = DomainKind(name, lower, ik.upper, ik.closed)
    return Composition(outer, inner, kind)


@dataclass(frozen=True)
class MembershipReport:
    """Outcome of the sampled class-K membership checks.

    ``first_violation`` holds the offending grid pair for a monotonicity
    failure, or (r, value) for a zero/sign failure. Violations are report
    content, never exceptions.
    """

    passed: bool
    zero_at_origin: bool
    strictly_increasing: bool
    signs_ok: bool
    failure: str | None = None
    first_violation: tuple | None = None


def verify_class_membership(alpha: ComparisonFunction, grid: Sequence[float]) -> MembershipReport:
    """Check alpha(0) = 0, strict monotonicity, and sign conditions on a grid.

    The grid must be sorted, lie inside alpha's claimed domain, and contain 0.
    """
    grid = [float(r) for r in grid]
    if any(r2 <= r1 for r1, r2 in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted strictly increasing")
    if 0.0 not in grid:
        raise ValueError("grid must contain 0")
    if not all(alpha.domain_kind.contains(r) for r in grid):
        raise ValueError("grid must lie inside the claimed domain")

    values = [alpha(r) for r in grid]

    zero_ok = values[grid.index(0.0)] == 0.0
    failure = None
    violation = None
    if not zero_ok:
        failure, violation = "zero", (0.0, values[grid.index(0.0)])

    monotone_ok = True
    for (r1, v1), (r2, v2) in zip(zip(grid, values), zip(grid[1:], values[1:])):
        if v2 <= v1:
            monotone_ok = False
            if failure is None:
                failure, violation = "monotonicity", (r1, r2)
            break

    signs_ok = True
    for r, v in zip(grid, values):
        if (r > 0.0 and v <= 0.0) or (r < 0.0 and v >= 0.0):
            signs_ok = False
            if failure is None:
                failure, violation = "sign", (r, v)
            break

    return MembershipReport(
        passed=zero_ok and monotone_ok and signs_ok,
        zero_at_origin=zero_ok,
        strictly_increasing=monotone_ok,
        signs_ok=signs_ok,
        failure=failure,
        first_violation=violation,
    )


def probe_unboundedness(alpha: ComparisonFunction) -> bool:
    """Heuristic unboundedness evidence on the fixed geometric probe grid.

    True when values keep growing across the in-domain part of
    :data:`PROBE_GRID` (in both directions for extended functions). A sampled
    check cannot prove unboundedness; this is the documented artifact probe.
    """
    pts = [r for r in PROBE_GRID if alpha.domain_kind.contains(r)]
    vals = [alpha(r) for r in pts]
    return all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))


_FAMILY_TAGS = {"linear": Linear, "power": Power}


def to_config(alpha: ComparisonFunction) -> dict:
    """Serialize to the scenario-config form (named family + parameters)."""
    if isinstance(alpha, Linear):
        return {"family": "linear", "k": alpha.k}
    if isinstance(alpha, Power):
        return {"family": "power", "c": alpha.c, "p": alpha.p}
    if isinstance(alpha, Composition):
        return {"family": "composition", "outer": to_config(alpha.outer), "inner": to_config(alpha.inner)}
    if isinstance(alpha, TabulatedMonotone):
        return {"family": "tabulated", "breakpoints": [[r, v] for r, v in alpha.breakpoints]}
    raise TypeError(f"cannot serialize {type(alpha).__name__}")


def from_config(spec: dict) -> ComparisonFunction:
    """Inverse of :func:`to_config`. Unknown families or keys are errors."""
    if not isinstance(spec, dict) or "family" not in spec:
        raise ValueError(f"comparison function spec needs a 'family' key: {spec!r}")
    family = spec["family"]
    extra = set(spec) - {"family"}
    if family == "linear":
        if extra != {"k"}:
            raise ValueError(f"linear takes exactly 'k', got {sorted(extra)}")
        return Linear(float(spec["k"]))
    if family == "power":
        if extra != {"c", "p"}:
            raise ValueError(f"power takes exactly 'c' and 'p', got {sorted(extra)}")
        return Power(float(spec["c"]), float(spec["p"]))
    if family == "composition":
        if extra != {"outer", "inner"}:
            raise ValueError(f"composition takes exactly 'outer' and 'inner', got {sorted(extra)}")
        return compose(from_config(spec["outer"]), from_config(spec["inner"]))
    if family == "tabulated":
        if extra != {"breakpoints"}:
            raise ValueError(f"tabulated takes exactly 'breakpoints', got {sorted(extra)}")
        return TabulatedMonotone(spec["breakpoints"])
    raise ValueError(f"unknown comparison function family {family!r}")
