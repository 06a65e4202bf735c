"""Numerical checks of completeness, minimality and identifiability.

Each probe returns a :class:`ProbeResult` whose thresholds are explicit
keyword arguments; none of these are proofs, only reproducible evidence.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import DomainError, Family, PerturbationSpec, as_values, softmax_rows
from .estimators import (
    McConfig,
    expected_logsumexp_mc,
    expected_max_mc,
    mc_average,
    perturb_argmax_mc,
    perturb_softmax_mc,
)
from .exact import discrete2_expected_max, uniform2_argmax


class MapKind(enum.Enum):
    SOFTMAX = "softmax"
    ARGMAX = "argmax"


class Potential(enum.Enum):
    LOGSUMEXP = "logsumexp"
    MAX = "max"


@dataclass(frozen=True)
class ProbeResult:
    name: str
    passed: bool
    observed: list[float]
    threshold: list[float]
    detail: str

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "observed": [float(x) for x in self.observed],
            "threshold": [float(x) for x in self.threshold],
            "detail": self.detail,
        }


class CompletenessPoint(NamedTuple):
    n: float
    p: float
    std_error: float


def completeness_probe(spec: PerturbationSpec, map_kind: MapKind, target_index: int,
                       levels: Sequence[float], d: int, mc: McConfig,
                       temperature: float = 1.0) -> list[CompletenessPoint]:
    """Probability of ``target_index`` along theta = n * e_i for each level n.

    The same random stream is reused at every level, so the series is
    monotone per sample and not just in expectation.
    """
    if not 0 <= target_index < d:
        raise DomainError(f"target_index {target_index} outside [0, {d})")
    lv = np.asarray(levels, dtype=float)
    if lv.size == 0 or np.any(lv < 0) or np.any(np.diff(lv) <= 0):
        raise DomainError("levels must be non-negative and strictly increasing")
    out = []
    for n in lv:
        theta = np.zeros(d)
        theta[target_index] = n
        if MapKind(map_kind) is MapKind.SOFTMAX:
            est = perturb_softmax_mc(theta, spec, temperature, mc)
        else:
            est = perturb_argmax_mc(theta, spec, mc)
        out.append(CompletenessPoint(float(n), float(est.mean[target_index]),
                                     float(est.std_error[target_index])))
    return out


def is_monotone(points: Sequence[CompletenessPoint], z: float = 2.0) -> bool:
    """Non-decreasing up to ``z`` combined standard errors between neighbours."""
    return all(b.p >= a.p - z * (a.std_error + b.std_error)
               for a, b in zip(points, points[1:]))


def completeness_result(points: Sequence[CompletenessPoint], label: str = "",
                        z: float = 2.0) -> ProbeResult:
    """Summarise a completeness series as a monotonicity check.

    ``threshold[k]`` is the floor that ``observed[k]`` must reach given its
    predecessor and ``z`` combined standard errors.
    """
    floors = [0.0] + [a.p - z * (a.std_error + b.std_error)
                      for a, b in zip(points, points[1:])]
    name = f"completeness[{label}]" if label else "completeness"
    return ProbeResult(name, is_monotone(points, z), [pt.p for pt in points], floors,
                       "levels " + ",".join(f"{pt.n:g}" for pt in points)
                       + f"; p must be non-decreasing up to {z} combined std_errors")


def translation_invariance_check(theta, c, spec: PerturbationSpec, mc: McConfig,
                                 temperature: float = 1.0) -> ProbeResult:
    """Compare both perturb maps at theta and theta + c (same seed), bit for bit.

    ``c`` is normally a scalar; a vector shift is accepted to show that
    non-constant shifts do change the maps.
    """
    v = as_values(theta)
    shifted = v + np.broadcast_to(np.asarray(c, dtype=float), v.shape)
    sm0 = perturb_softmax_mc(v, spec, temperature, mc)
    sm1 = perturb_softmax_mc(shifted, spec, temperature, mc)
    am0 = perturb_argmax_mc(v, spec, mc)
    am1 = perturb_argmax_mc(shifted, spec, mc)
    same_sm = np.array_equal(sm0.mean, sm1.mean)
    same_am = np.array_equal(am0.mean, am1.mean)
    observed = [float(np.max(np.abs(sm0.mean - sm1.mean))),
                float(np.max(np.abs(am0.mean - am1.mean)))]
    return ProbeResult(
        "translation_invariance",
        same_sm and same_am,
        observed,
        [0.0, 0.0],
        f"max |difference| of softmax and argmax estimates must be exactly 0; "
        f"softmax identical={same_sm}, argmax identical={same_am}",
    )


def _second_difference(potential: Potential, theta: np.ndarray, v: np.ndarray, h: float,
                       temperature: float):
    hv = h * v

    def fn(gamma, gen):
        x = theta + gamma
        y = x - x.max(axis=1, keepdims=True)
        if potential is Potential.MAX:
            up = (y + hv).max(axis=1)
            down = (y - hv).max(axis=1)
        else:
            # log-ratios against the unshifted potential, accurate for small h
            s = softmax_rows(x, temperature)
            up = temperature * np.log1p(s @ np.expm1(hv / temperature))
            down = temperature * np.log1p(s @ np.expm1(-hv / temperature))
        return (up + down) / (h * h)

    return fn


def strict_convexity_probe(theta, v, potential: Potential, spec: PerturbationSpec,
                           mc: McConfig, h: float, temperature: float = 1.0,
                           z: float = 3.0, affine_tol: float = 1e-9) -> ProbeResult:
    """Second directional difference of an expected potential with common random numbers.

    Along the all-ones direction both potentials are affine, so the
    difference must vanish; along any other direction strict convexity
    requires it to be significantly positive.
    """
    if h < 1e-7:
        raise DomainError(f"step h={h} is too small for double precision")
    th = as_values(theta)
    vv = as_values(v)
    if vv.shape != th.shape:
        raise DomainError("direction and theta differ in length")
    potential = Potential(potential)
    d2, se = mc_average(_second_difference(potential, th, vv, h, temperature),
                        th.size, spec, mc)
    constant = np.ptp(vv) <= 1e-12 * np.max(np.abs(vv))
    if constant:
        passed = abs(d2) <= affine_tol
        threshold = affine_tol
        detail = "direction is constant: require |D2| <= threshold"
    else:
        passed = d2 > z * se
        threshold = z * se
        detail = f"direction is not constant: require D2 > {z} * std_error = threshold"
    return ProbeResult(f"strict_convexity[{potential.value}]", bool(passed),
                       [d2, se], [threshold], detail)


def softmax_gradient_check(theta, spec: PerturbationSpec, temperature: float,
                           mc: McConfig, h: float) -> ProbeResult:
    """Finite differences of the expected log-sum-exp against perturb-softmax."""
    if not 1e-6 <= h <= 1e-2:
        raise DomainError("h must lie in [1e-6, 1e-2]")
    th = as_values(theta)
    grad = perturb_softmax_mc(th, spec, temperature, mc).mean
    fd = np.empty_like(th)
    for j in range(th.size):
        e = np.zeros_like(th)
        e[j] = h
        up = expected_logsumexp_mc(th + e, spec, mc, temperature).mean
        down = expected_logsumexp_mc(th - e, spec, mc, temperature).mean
        fd[j] = (up - down) / (2 * h)
    dev = float(np.max(np.abs(fd - grad)))
    bound = 10 * h * h + 1e-9
    return ProbeResult("softmax_gradient", dev <= bound, [dev], [bound],
                       "max |central difference - perturb-softmax| <= 10 h^2 + 1e-9")


def _uniform_kink_distance(theta: np.ndarray, scale: float) -> float:
    diffs = np.abs(theta[:, None] - theta[None, :])
    return float(np.min(np.abs(diffs - 2 * scale)))


def argmax_gradient_check(theta, spec: PerturbationSpec, mc: McConfig,
                          h: float) -> ProbeResult:
    """Finite differences of the expected max against perturb-argmax.

    Samples whose argmax changes between theta - h e_j and theta + h e_j
    are counted; each one can move the difference by at most 1/N.
    """
    if spec.family is Family.DISCRETE:
        raise DomainError("two-point perturbations give a sub-differential only; "
                          "the expected max is not differentiable")
    th = as_values(theta)
    d = th.size
    if spec.family is Family.UNIFORM and _uniform_kink_distance(th, spec.scale) <= h:
        raise DomainError("theta lies within h of a kink of the uniform expected max")
    grad = perturb_argmax_mc(th, spec, mc).mean
    fd = np.empty(d)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fd[j] = (expected_max_mc(th + e, spec, mc).mean
                 - expected_max_mc(th - e, spec, mc).mean) / (2 * h)

    base = th - th.max()

    def flips(gamma, gen):
        x = base + gamma
        out = np.empty((x.shape[0], d))
        for j in range(d):
            up = x.copy()
            up[:, j] += h
            down = x.copy()
            down[:, j] -= h
            out[:, j] = np.argmax(up, axis=1) != np.argmax(down, axis=1)
        return out

    flip_rate, _ = mc_average(flips, d, spec, mc)
    dev = np.abs(fd - grad)
    bound = np.maximum(2.0 * flip_rate, 1e-9)
    return ProbeResult("argmax_gradient", bool(np.all(dev <= bound)),
                       dev.tolist(), bound.tolist(),
                       "per coordinate |central difference - perturb-argmax| <= "
                       "max(2 * flips / N, 1e-9)")


def uniform2_noninjectivity_demo() -> ProbeResult:
    """Two parameters that are not translates yet give the same argmax law."""
    a = np.array([3.0, 0.0])
    b = np.array([4.0, 0.0])
    pa = uniform2_argmax(a).value
    pb = uniform2_argmax(b).value
    diff = b - a
    not_translation = np.ptp(diff) > 0
    same = np.array_equal(pa, pb) and np.array_equal(pa, [1.0, 0.0])
    return ProbeResult(
        "uniform2_noninjectivity",
        bool(same and not_translation),
        [*pa, *pb],
        [1.0, 0.0, 1.0, 0.0],
        f"argmax law at {a.tolist()} and {b.tolist()} must both equal (1, 0) "
        f"while their difference {diff.tolist()} is not constant",
    )


_COMPASS = [np.array(v, dtype=float) for v in
            [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]]


def discrete2_multivalue_demo(p1: float, step: float = 0.5) -> ProbeResult:
    """Sub-gradient test for (p1, 1 - p1) at theta = (0, 0) under two-point noise.

    Uses the exact piecewise-linear expected max; within distance 2 of the
    origin it is linear along each ray, so one step of size ``step`` gives the
    directional derivative without truncation error.
    """
    if not 0.0 <= p1 <= 1.0:
        raise DomainError(f"p1={p1} is not a probability")
    if not 0 < step < 1:
        raise DomainError("step must lie in (0, 1)")
    origin = np.zeros(2)
    f0 = discrete2_expected_max(origin).value
    # <p, v> written as v2 + p1 (v1 - v2): exact at the dyadic boundary values
    slack = min((discrete2_expected_max(origin + step * v).value - f0) / step
                - (v[1] + p1 * (v[0] - v[1]))
                for v in _COMPASS)
    member = slack >= 0
    expected = 0.25 <= p1 <= 0.75
    return ProbeResult(
        "discrete2_multivalue",
        bool(member == expected),
        [p1, slack],
        [0.25, 0.75],
        f"member={bool(member)}; membership must hold exactly when p1 in [threshold]",
    )
