"""Monte-Carlo estimators for perturb-softmax / perturb-argmax maps.

Every estimator draws its perturbations through :func:`mc_average`, which
splits the sample budget into fixed-size chunks of one ``RngStream``.
Two calls with the same stream see the same perturbation sequence (common
random numbers), and the chunk-ordered reduction makes the result
independent of the worker count.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    DomainError,
    PerturbationSpec,
    ProbVector,
    RngStream,
    as_values,
    chunk_sizes,
    sample_chunk,
    softmax_rows,
)


class TieBreak(enum.Enum):
    LOWEST_INDEX = "lowest-index"
    SPLIT_MASS = "split-mass"
    RANDOM_UNIFORM = "random-uniform"


@dataclass(frozen=True)
class McConfig:
    n_samples: int
    rng: RngStream = field(default_factory=RngStream)
    tie_break: TieBreak = TieBreak.SPLIT_MASS
    threads: int = 1

    def __post_init__(self) -> None:
        if int(self.n_samples) < 1:
            raise DomainError("n_samples must be >= 1")
        if int(self.threads) < 1:
            raise DomainError("threads must be >= 1")
        object.__setattr__(self, "tie_break", TieBreak(self.tie_break))

    def to_json(self) -> dict:
        return {
            "n_samples": int(self.n_samples),
            "seed": self.rng.seed,
            "stream_index": self.rng.stream_index,
            "tie_break": self.tie_break.value,
        }


@dataclass(frozen=True)
class Estimate:
    mean: np.ndarray | float
    std_error: np.ndarray | float
    n_samples: int
    seed: int

    def as_prob(self) -> ProbVector:
        return ProbVector(self.mean)

    def to_json(self) -> dict:
        return {
            "mean": _jsonable(self.mean),
            "std_error": _jsonable(self.std_error),
            "n_samples": int(self.n_samples),
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Estimate:
        mean, se = obj["mean"], obj["std_error"]
        if isinstance(mean, list):
            mean, se = np.asarray(mean, dtype=float), np.asarray(se, dtype=float)
        return cls(mean, se, int(obj["n_samples"]), int(obj["seed"]))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    return float(x)


# --- CRN engine --------------------------------------------------------------

SampleFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def _chunk_moments(fn: SampleFn, spec: PerturbationSpec, d: int, rng: RngStream,
                   chunk: int, rows: int):
    gamma, gen = sample_chunk(spec, d, rng, chunk, rows)
    vals = np.asarray(fn(gamma, gen), dtype=np.float64)
    mean = vals.mean(axis=0)
    m2 = ((vals - mean) ** 2).sum(axis=0)
    return rows, mean, m2


def mc_average(fn: SampleFn, d: int, spec: PerturbationSpec, mc: McConfig):
    """Average per-sample values of ``fn`` over ``mc.n_samples`` perturbations.

    ``fn(gamma, gen)`` receives a (rows, d) perturbation block and the chunk
    generator (already advanced past the perturbations) and returns an array
    whose leading axis indexes samples. Returns ``(mean, std_error)``.
    Chunk moments are merged pairwise in chunk order.
    """
    sizes = chunk_sizes(int(mc.n_samples))

    def work(args):
        k, m = args
        return _chunk_moments(fn, spec, d, mc.rng, k, m)

    if mc.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=mc.threads) as pool:
            parts = list(pool.map(work, enumerate(sizes)))
    else:
        parts = [work(a) for a in enumerate(sizes)]

    n, mean, m2 = parts[0]
    for nb, mb, m2b in parts[1:]:
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * (nb / tot)
        m2 = m2 + m2b + delta * delta * (n * nb / tot)
        n = tot
    var = m2 / (n - 1) if n > 1 else np.zeros_like(m2)
    se = np.sqrt(var / n)
    if np.ndim(mean) == 0:
        return float(mean), float(se)
    return mean, se


def _estimate(mean, se, mc: McConfig) -> Estimate:
    return Estimate(mean, se, int(mc.n_samples), mc.rng.seed)


def _prob_estimate(mean, se, mc: McConfig) -> Estimate:
    return Estimate(ProbVector(mean).probs, se, int(mc.n_samples), mc.rng.seed)


def _shifted(theta) -> tuple[np.ndarray, float]:
    # subtracting the max first makes adding c*1 to theta a no-op whenever
    # theta + c is exactly representable
    v = as_values(theta)
    top = float(v.max())
    return v - top, top


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")


def argmax_weights(x: np.ndarray, tie_break: TieBreak,
                   gen: np.random.Generator | None = None) -> np.ndarray:
    """Per-row argmax indicator of a (n, d) array under a tie policy.

    Ties are exact floating-point equalities with the row maximum.
    """
    n, d = x.shape
    if tie_break is TieBreak.LOWEST_INDEX:
        w = np.zeros_like(x)
        w[np.arange(n), np.argmax(x, axis=1)] = 1.0
        return w
    tied = x == x.max(axis=1, keepdims=True)
    counts = tied.sum(axis=1)
    if tie_break is TieBreak.SPLIT_MASS:
        return tied / counts[:, None]
    if gen is None:
        raise DomainError("random tie breaking needs a generator")
    pick = gen.integers(0, counts)
    rank = np.cumsum(tied, axis=1) - 1
    return (tied & (rank == pick[:, None])).astype(np.float64)


# --- estimators --------------------------------------------------------------

def perturb_softmax_mc(theta, spec: PerturbationSpec, temperature: float,
                       mc: McConfig) -> Estimate:
    """Estimate E[softmax((theta + gamma) / temperature)]."""
    _check_temperature(temperature)
    base, _ = _shifted(theta)

    def fn(gamma, gen):
        return softmax_rows(base + gamma, temperature)

    return _prob_estimate(*mc_average(fn, base.size, spec, mc), mc)


def perturb_argmax_mc(theta, spec: PerturbationSpec, mc: McConfig) -> Estimate:
    """Estimate the distribution of argmax(theta + gamma)."""
    base, _ = _shifted(theta)

    def fn(gamma, gen):
        return argmax_weights(base + gamma, mc.tie_break, gen)

    return _prob_estimate(*mc_average(fn, base.size, spec, mc), mc)


def expected_logsumexp_mc(theta, spec: PerturbationSpec, mc: McConfig,
                          temperature: float = 1.0) -> Estimate:
    """Estimate E[T * logsumexp((theta + gamma) / T)].

    With T = 1 this is the expected log-sum-exp potential whose gradient is
    the perturb-softmax map; for other T the gradient is the
    temperature-T perturb-softmax.
    """
    _check_temperature(temperature)
    base, top = _shifted(theta)

    def fn(gamma, gen):
        z = (base + gamma) / temperature
        m = z.max(axis=1)
        return temperature * (m + np.log(np.exp(z - m[:, None]).sum(axis=1)))

    mean, se = mc_average(fn, base.size, spec, mc)
    return _estimate(top + mean, se, mc)


def expected_max_mc(theta, spec: PerturbationSpec, mc: McConfig) -> Estimate:
    """Estimate E[max_i(theta_i + gamma_i)]."""
    base, top = _shifted(theta)

    def fn(gamma, gen):
        return (base + gamma).max(axis=1)

    mean, se = mc_average(fn, base.size, spec, mc)
    return _estimate(top + mean, se, mc)


def pathwise_softmax_jacobian_mc(theta, spec: PerturbationSpec, temperature: float,
                                 mc: McConfig) -> Estimate:
    """Average of the per-sample softmax Jacobians (diag(s) - s s^T) / T.

    ``mean`` and ``std_error`` are (d, d) arrays.
    """
    _check_temperature(temperature)
    base, _ = _shifted(theta)

    def fn(gamma, gen):
        s = softmax_rows(base + gamma, temperature)
        jac = -s[:, :, None] * s[:, None, :]
        idx = np.arange(s.shape[1])
        jac[:, idx, idx] += s
        return jac / temperature

    return _estimate(*mc_average(fn, base.size, spec, mc), mc)


def expected_gamma_at_argmax_mc(theta, spec: PerturbationSpec, mc: McConfig) -> Estimate:
    """Estimate E[gamma_i*] where i* = argmax(theta + gamma) under the tie policy.

    Its negation is the value of the convex conjugate of the expected-max
    potential at the argmax probabilities.
    """
    base, _ = _shifted(theta)

    def fn(gamma, gen):
        w = argmax_weights(base + gamma, mc.tie_break, gen)
        return (w * gamma).sum(axis=1)

    return _estimate(*mc_average(fn, base.size, spec, mc), mc)


def fenchel_gap(theta, spec: PerturbationSpec, mc: McConfig) -> float:
    """|E[max] - <p, theta> - E[gamma_i*]| on one shared sample set.

    Zero up to rounding: max(theta + gamma) = theta_i* + gamma_i* per sample.
    """
    v = as_values(theta)
    d = v.size

    def fn(gamma, gen):
        x = v + gamma
        w = argmax_weights(x, mc.tie_break, gen)
        out = np.empty((x.shape[0], d + 2))
        out[:, 0] = x.max(axis=1)
        out[:, 1] = (w * gamma).sum(axis=1)
        out[:, 2:] = w
        return out

    mean, _ = mc_average(fn, d, spec, mc)
    return abs(float(mean[0] - mean[2:] @ v - mean[1]))

