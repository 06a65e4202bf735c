"""Closed-form and quadrature references for the perturbation models.

The two-dimensional closed forms cover the scale-1 uniform and two-point
families; everything else goes through :func:`smooth_argmax_quadrature`
or the Monte-Carlo estimators.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    DimensionError,
    DomainError,
    Family,
    NoDensityError,
    PerturbationSpec,
    ProbVector,
    as_values,
    family_cdf,
    family_pdf,
    family_quantile,
    log_sum_exp,
    softmax,
)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, error_bound: float):
        super().__init__(f"{message} (achieved error bound {error_bound:.3e})")
        self.error_bound = error_bound


@dataclass(frozen=True)
class PiecewiseReport:
    region: str
    value: float | np.ndarray

    def to_json(self) -> dict:
        v = self.value
        return {"region": self.region,
                "value": v.tolist() if isinstance(v, np.ndarray) else float(v)}


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.lo <= self.hi <= 1.0:
            raise DomainError(f"invalid probability interval [{self.lo}, {self.hi}]")

    def __contains__(self, p: float) -> bool:
        return self.lo <= p <= self.hi

    def widened(self, margin: float) -> tuple[float, float]:
        return self.lo - margin, self.hi + margin

    def to_json(self) -> dict:
        return {"lo": float(self.lo), "hi": float(self.hi)}


@dataclass(frozen=True)
class QuadConfig:
    abs_tol: float = 1e-8
    tail_mass: float = 1e-12
    max_intervals: int = 2**20

    def __post_init__(self) -> None:
        if not (0 < self.abs_tol < 1 and 0 < self.tail_mass < 0.5):
            raise DomainError("abs_tol must be in (0, 1) and tail_mass in (0, 1/2)")


# --- Gumbel identities -------------------------------------------------------

def gumbel_argmax_exact(theta) -> ProbVector:
    """Argmax law under zero-mean Gumbel noise: softmax(theta)."""
    return softmax(theta, 1.0)


def gumbel_expected_max_exact(theta) -> float:
    """E[max(theta + gamma)] under zero-mean Gumbel noise: log-sum-exp(theta)."""
    return log_sum_exp(as_values(theta))


# --- adaptive Simpson ----------------------------------------------------------

def adaptive_simpson(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                     tol: float, breakpoints: Sequence[float] = (),
                     initial_pieces: int = 64,
                     max_intervals: int = 2**20) -> tuple[float, float]:
    """Integrate a vectorised ``f`` over [a, b] to absolute tolerance ``tol``.

    Intervals are refined breadth-first; an interval of width w is accepted
    once its Richardson error estimate is below ``tol * w / (b - a)``.
    ``breakpoints`` inside (a, b) become interval edges, so kinks never sit
    inside a panel. Returns ``(integral, error_estimate)``.
    """
    if not b > a:
        return 0.0, 0.0
    inner = [x for x in breakpoints if a < x < b]
    edges = np.unique(np.concatenate([[a, b], inner]))
    # pre-split each piece so a narrow peak cannot slip between three nodes
    lo_parts, hi_parts = [], []
    for x0, x1 in zip(edges[:-1], edges[1:]):
        g = np.linspace(x0, x1, initial_pieces + 1)
        lo_parts.append(g[:-1])
        hi_parts.append(g[1:])
    lo = np.concatenate(lo_parts)
    hi = np.concatenate(hi_parts)
    mid = 0.5 * (lo + hi)
    flo, fmid, fhi = f(lo), f(mid), f(hi)
    whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)

    span = b - a
    total = 0.0
    err = 0.0
    n_intervals = lo.size
    while lo.size:
        m1 = 0.5 * (lo + mid)
        m2 = 0.5 * (mid + hi)
        f1, f2 = f(m1), f(m2)
        left = (mid - lo) / 6.0 * (flo + 4.0 * f1 + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * f2 + fhi)
        diff = left + right - whole
        ok = np.abs(diff) <= 15.0 * tol * (hi - lo) / span
        total += float(np.sum((left + right + diff / 15.0)[ok]))
        err += float(np.sum(np.abs(diff[ok]))) / 15.0
        bad = ~ok
        if not bad.any():
            break
        n_intervals += int(bad.sum())
        if n_intervals > max_intervals:
            pending = err + float(np.sum(np.abs(diff[bad]))) / 15.0
            raise ConvergenceError("adaptive Simpson exceeded its subdivision budget", pending)
        lo, mid, hi = lo[bad], mid[bad], hi[bad]
        flo, fmid, fhi = flo[bad], fmid[bad], fhi[bad]
        f1, f2 = f1[bad], f2[bad]
        m1, m2 = m1[bad], m2[bad]
        left, right = left[bad], right[bad]
        lo, mid, hi, flo, fmid, fhi, whole = (
            np.concatenate([lo, mid]),
            np.concatenate([m1, m2]),
            np.concatenate([mid, hi]),
            np.concatenate([flo, fmid]),
            np.concatenate([f1, f2]),
            np.concatenate([fmid, fhi]),
            np.concatenate([left, right]),
        )
    return total, err


def integration_bounds(theta: np.ndarray, spec: PerturbationSpec,
                       tail_mass: float) -> tuple[float, float]:
    """Range outside which every argmax integrand has mass below ``tail_mass``.

    Below L the factor cdf(t - max(theta)) (or the density itself, for the
    top coordinate) is at most ``tail_mass``; above U the density factor
    has at most ``tail_mass`` left, since every theta_i <= max(theta).
    """
    top = float(theta.max())
    if spec.family is Family.UNIFORM:
        return top - spec.scale, top + spec.scale
    lo = float(family_quantile(spec, tail_mass))
    hi = float(family_quantile(spec, 1.0 - tail_mass))
    return top + lo, top + hi


def smooth_argmax_quadrature(theta, spec: PerturbationSpec,
                             quad: QuadConfig = QuadConfig()) -> ProbVector:
    """Argmax probabilities of theta + gamma for a continuous family.

    Coordinate i is the integral of pdf(t - theta_i) * prod_{j != i}
    cdf(t - theta_j) over t.
    """
    if not spec.continuous:
        raise NoDensityError("quadrature needs a continuous perturbation family")
    v = as_values(theta)
    d = v.size
    lo, hi = integration_bounds(v, spec, quad.tail_mass)
    breaks: list[float] = []
    if spec.family is Family.UNIFORM:
        breaks = sorted({float(x) for x in np.concatenate([v - spec.scale, v + spec.scale])})

    probs = np.empty(d)
    for i in range(d):
        others = np.delete(v, i)

        def integrand(t, i=i, others=others):
            out = family_pdf(spec, t - v[i])
            if others.size:
                out = out * np.prod(family_cdf(spec, t[:, None] - others[None, :]), axis=1)
            return out

        probs[i], _ = adaptive_simpson(integrand, lo, hi, quad.abs_tol, breaks,
                                       max_intervals=quad.max_intervals)
    total = probs.sum()
    if abs(total - 1.0) > 10 * quad.abs_tol:
        raise ConvergenceError(f"argmax probabilities sum to {total!r}", abs(total - 1.0))
    return ProbVector(np.clip(probs, 0.0, None) / total)


# --- two-dimensional closed forms ----------------------------------------------

def _pair(theta) -> tuple[float, float]:
    v = as_values(theta)
    if v.size != 2:
        raise DimensionError(f"closed form needs exactly 2 parameters, got {v.size}")
    return float(v[0]), float(v[1])


def uniform_diff_pdf(z):
    """Density of gamma_1 - gamma_2 for independent U(-1, 1): the (2 - |z|)/4 tent."""
    z = np.asarray(z, dtype=np.float64)
    out = np.where(np.abs(z) <= 2.0, (2.0 - np.abs(z)) / 4.0, 0.0)
    return out[()] if out.ndim == 0 else out


def _u_mid_pos(t1, t2):
    x = t1 - t2
    return 0.25 * (4.0 / 3.0 + 2.0 * (t1 + t2) + x * x - x**3 / 6.0)


def _u_mid_neg(t1, t2):
    x = t1 - t2
    return 0.25 * (4.0 / 3.0 + 2.0 * (t1 + t2) + x * x + x**3 / 6.0)


# (label, condition on x = theta_1 - theta_2, value) in evaluation order
UNIFORM2_MAX_BRANCHES = (
    ("theta > 2", lambda x: x > 2, lambda t1, t2: t1),
    ("2 >= theta >= 0", lambda x: 0 <= x <= 2, _u_mid_pos),
    ("0 >= theta >= -2", lambda x: -2 <= x <= 0, _u_mid_neg),
    ("theta < -2", lambda x: x < -2, lambda t1, t2: t2),
)

UNIFORM2_ARGMAX_BRANCHES = (
    ("theta > 2", lambda x: x > 2, lambda x: 1.0),
    ("2 >= theta >= 0", lambda x: 0 <= x <= 2, lambda x: 0.5 + 0.5 * x - x * x / 8.0),
    ("0 >= theta >= -2", lambda x: -2 <= x <= 0, lambda x: 0.5 + 0.5 * x + x * x / 8.0),
    ("theta < -2", lambda x: x < -2, lambda x: 0.0),
)

DISCRETE2_MAX_BRANCHES = (
    ("theta1 >= theta2 + 2", lambda t1, t2: t1 >= t2 + 2, lambda t1, t2: t1),
    ("theta2 + 2 >= theta1 >= theta2", lambda t1, t2: t2 + 2 >= t1 >= t2,
     lambda t1, t2: 0.75 * t1 + 0.25 * t2 + 0.5),
    ("theta2 - 2 <= theta1 <= theta2", lambda t1, t2: t2 - 2 <= t1 <= t2,
     lambda t1, t2: 0.75 * t2 + 0.25 * t1 + 0.5),
    ("theta1 <= theta2 - 2", lambda t1, t2: t1 <= t2 - 2, lambda t1, t2: t2),
)


def uniform2_branch_value(label: str, theta) -> float:
    """Evaluate one named branch of the uniform expected-max formula, ignoring its condition."""
    t1, t2 = _pair(theta)
    for name, _, fn in UNIFORM2_MAX_BRANCHES:
        if name == label:
            return fn(t1, t2)
    raise KeyError(label)


def discrete2_branch_value(label: str, theta) -> float:
    t1, t2 = _pair(theta)
    for name, _, fn in DISCRETE2_MAX_BRANCHES:
        if name == label:
            return fn(t1, t2)
    raise KeyError(label)


def uniform2_expected_max(theta) -> PiecewiseReport:
    """E[max(theta_1 + g_1, theta_2 + g_2)] for g_i ~ U(-1, 1), piecewise cubic in theta_1 - theta_2."""
    t1, t2 = _pair(theta)
    x = t1 - t2
    for label, cond, fn in UNIFORM2_MAX_BRANCHES:
        if cond(x):
            return PiecewiseReport(label, fn(t1, t2))
    raise AssertionError("unreachable")


def uniform2_argmax(theta) -> PiecewiseReport:
    t1, t2 = _pair(theta)
    x = t1 - t2
    for label, cond, fn in UNIFORM2_ARGMAX_BRANCHES:
        if cond(x):
            p1 = fn(x)
            return PiecewiseReport(label, np.array([p1, 1.0 - p1]))
    raise AssertionError("unreachable")


def discrete2_expected_max(theta) -> PiecewiseReport:
    """E[max(theta + gamma)] for gamma_i uniform on {+1, -1}; piecewise linear."""
    t1, t2 = _pair(theta)
    for label, cond, fn in DISCRETE2_MAX_BRANCHES:
        if cond(t1, t2):
            return PiecewiseReport(label, fn(t1, t2))
    raise AssertionError("unreachable")


def discrete2_argmax_subdifferential(theta) -> Interval:
    """First coordinate of the sub-differential of the two-point expected max."""
    t1, t2 = _pair(theta)
    if t1 > t2 + 2:
        return Interval(1.0, 1.0)
    if t1 == t2 + 2:
        return Interval(0.75, 1.0)
    if t1 > t2:
        return Interval(0.75, 0.75)
    if t1 == t2:
        return Interval(0.25, 0.75)
    if t1 > t2 - 2:
        return Interval(0.25, 0.25)
    if t1 == t2 - 2:
        return Interval(0.0, 0.25)
    return Interval(0.0, 0.0)
