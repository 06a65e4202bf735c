"""Numeric primitives shared by every other module.

Parameter vectors, probability vectors, the four perturbation families,
deterministic random streams and the stable log-sum-exp / softmax pair.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy import special

EULER_GAMMA = float(np.euler_gamma)

# samples drawn per stream chunk; fixed so reductions never depend on worker count
CHUNK_SIZE = 4096

_TWO_POW_52 = 2**52


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NoDensityError(ValueError):
    """Raised when a density is requested from the two-point family."""


class ParamSpace(enum.Enum):
    FREE = "free"
    FIRST_ANCHORED = "first-anchored"
    ZERO_SUM = "zero-sum"


class Family(enum.Enum):
    GUMBEL = "gumbel"
    NORMAL = "normal"
    UNIFORM = "uniform"
    DISCRETE = "discrete"

    @property
    def continuous(self) -> bool:
        return self is not Family.DISCRETE


def _as_vector(values: Any) -> np.ndarray:
    if isinstance(values, Logits):
        values = values.values
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError("empty vector")
    if not np.all(np.isfinite(arr)):
        raise DomainError("vector has non-finite entries")
    return arr


def as_values(theta: Any) -> np.ndarray:
    """Return the raw float64 vector behind a Logits or any array-like."""
    return _as_vector(theta)


@dataclass(frozen=True)
class Logits:
    values: np.ndarray
    space: ParamSpace = ParamSpace.FREE

    def __post_init__(self) -> None:
        arr = _as_vector(self.values).copy()
        if arr.size < 2:
            raise DimensionError("logits need at least two entries")
        if self.space is ParamSpace.FIRST_ANCHORED and arr[0] != 0.0:
            raise DomainError("first-anchored logits must have values[0] == 0")
        if self.space is ParamSpace.ZERO_SUM and abs(arr.sum()) > 1e-12 * arr.size:
            raise DomainError("zero-sum logits must sum to 0")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def d(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ProbVector:
    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise DimensionError("probability vector must be a non-empty 1-D array")
        if not np.all(np.isfinite(arr)):
            raise DomainError("probability vector has non-finite entries")
        if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
            raise DomainError(f"entries outside [0, 1]: {arr}")
        arr = np.clip(arr, 0.0, 1.0)
        if abs(arr.sum() - 1.0) > 1e-9:
            raise DomainError(f"probabilities sum to {arr.sum()!r}, not 1")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.size

    def __getitem__(self, i):
        return self.probs[i]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype)


@dataclass(frozen=True)
class PerturbationSpec:
    """A zero-mean perturbation family.

    ``scale`` is the half-width for ``UNIFORM`` and the magnitude for
    ``DISCRETE``; it is ignored by the Gumbel and Normal families. A zero
    scale is accepted for the bounded families as a degenerate
    (no-perturbation) case.
    """

    family: Family
    scale: float = 1.0

    def __post_init__(self) -> None:
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        scale = float(self.scale)
        if not math.isfinite(scale) or scale < 0:
            raise DomainError(f"scale must be finite and non-negative, got {scale}")
        if scale == 0 and family.continuous and family is not Family.UNIFORM:
            raise DomainError(f"{family.value} family does not take a zero scale")
        object.__setattr__(self, "scale", scale)

    @classmethod
    def gumbel(cls) -> PerturbationSpec:
        return cls(Family.GUMBEL)

    @classmethod
    def normal(cls) -> PerturbationSpec:
        return cls(Family.NORMAL)

    @classmethod
    def uniform(cls, scale: float = 1.0) -> PerturbationSpec:
        return cls(Family.UNIFORM, scale)

    @classmethod
    def discrete(cls, scale: float = 1.0) -> PerturbationSpec:
        return cls(Family.DISCRETE, scale)

    @property
    def continuous(self) -> bool:
        return self.family.continuous

    @property
    def mean(self) -> float:
        return 0.0

    def to_json(self) -> dict:
        return {"family": self.family.value, "scale": self.scale}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> PerturbationSpec:
        if not isinstance(obj, Mapping) or "family" not in obj:
            raise DomainError("perturbation spec must be an object with a 'family' key")
        extra = set(obj) - {"family", "scale"}
        if extra:
            raise DomainError(f"unknown perturbation spec keys: {sorted(extra)}")
        try:
            family = Family(obj["family"])
        except ValueError:
            raise DomainError(f"unknown family {obj['family']!r}") from None
        return cls(family, obj.get("scale", 1.0))

    def sample(self, d: int, rng: RngStream) -> np.ndarray:
        return sample_perturbation(self, d, rng)

    def cdf(self, t):
        return family_cdf(self, t)

    def pdf(self, t):
        return family_pdf(self, t)

    def pmf(self, t):
        return family_pmf(self, t)

    def quantile(self, q):
        return family_quantile(self, q)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream.

    Chunk ``k`` of stream ``(seed, stream_index)`` is produced by a Philox
    generator keyed on ``(seed, stream_index, k)``, so any chunk can be
    generated independently of the others.
    """

    seed: int = 0
    stream_index: int = 0

    def __post_init__(self) -> None:
        if self.stream_index < 0:
            raise DomainError("stream_index must be non-negative")
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    def chunk_generator(self, chunk: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_index, chunk))
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, index: int) -> RngStream:
        return RngStream(self.seed, index)


def open_uniform(gen: np.random.Generator, size) -> np.ndarray:
    """Uniform draws on the open interval (0, 1).

    Values are (k + 1/2) / 2**52 with k < 2**52, exact in double precision,
    so neither endpoint (nor 1/2) can occur.
    """
    k = gen.integers(0, _TWO_POW_52, size=size, dtype=np.uint64)
    return (k.astype(np.float64) + 0.5) * (1.0 / _TWO_POW_52)


def _draw(spec: PerturbationSpec, gen: np.random.Generator, shape) -> np.ndarray:
    fam = spec.family
    if fam is Family.NORMAL:
        return gen.standard_normal(shape)
    u = open_uniform(gen, shape)
    if fam is Family.GUMBEL:
        return -np.log(-np.log(u)) - EULER_GAMMA
    if fam is Family.UNIFORM:
        return spec.scale * (2.0 * u - 1.0)
    return spec.scale * np.sign(u - 0.5)


def chunk_sizes(n: int) -> list[int]:
    full, rest = divmod(n, CHUNK_SIZE)
    return [CHUNK_SIZE] * full + ([rest] if rest else [])


def sample_chunk(spec: PerturbationSpec, d: int, rng: RngStream, chunk: int,
                 rows: int) -> tuple[np.ndarray, np.random.Generator]:
    """Draw chunk ``chunk`` as a (rows, d) block.

    The generator is returned so callers needing extra randomness (random
    tie breaking) consume it *after* the perturbations, keeping the
    perturbation sequence identical across estimator calls.
    """
    gen = rng.chunk_generator(chunk)
    return _draw(spec, gen, (rows, d)), gen


def sample_block(spec: PerturbationSpec, n: int, d: int, rng: RngStream) -> np.ndarray:
    """All ``n`` perturbation vectors of a stream, stacked as an (n, d) array."""
    if n < 1 or d < 1:
        raise DimensionError("need n >= 1 and d >= 1")
    parts = [sample_chunk(spec, d, rng, k, m)[0] for k, m in enumerate(chunk_sizes(n))]
    return np.concatenate(parts, axis=0)


def sample_perturbation(spec: PerturbationSpec, d: int, rng: RngStream) -> np.ndarray:
    """d i.i.d. draws; identical to the first row of ``sample_block``."""
    if d < 1:
        raise DimensionError("d must be >= 1")
    return sample_chunk(spec, d, rng, 0, 1)[0][0]


def family_cdf(spec: PerturbationSpec, t):
    t = np.asarray(t, dtype=np.float64)
    fam, s = spec.family, spec.scale
    if fam is Family.GUMBEL:
        with np.errstate(over="ignore"):
            out = np.exp(-np.exp(-(t + EULER_GAMMA)))
    elif fam is Family.NORMAL:
        out = special.ndtr(t)
    elif fam is Family.UNIFORM:
        if s == 0:
            out = (t >= 0).astype(np.float64)
        else:
            out = np.clip((t + s) / (2 * s), 0.0, 1.0)
    else:
        # right-continuous step with jumps of 1/2 at -s and +s
        out = 0.5 * (t >= -s) + 0.5 * (t >= s)
    return out[()] if out.ndim == 0 else out


def family_pdf(spec: PerturbationSpec, t):
    t = np.asarray(t, dtype=np.float64)
    fam, s = spec.family, spec.scale
    if fam is Family.DISCRETE:
        raise NoDensityError("two-point family has no density; use family_pmf")
    if fam is Family.GUMBEL:
        z = t + EULER_GAMMA
        out = np.exp(-z - np.exp(-z))
    elif fam is Family.NORMAL:
        out = np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    else:
        if s == 0:
            raise NoDensityError("zero-width uniform has no density")
        out = np.where(np.abs(t) <= s, 1.0 / (2 * s), 0.0)
    return out[()] if out.ndim == 0 else out


def family_pmf(spec: PerturbationSpec, t):
    if spec.family is not Family.DISCRETE:
        raise DomainError("pmf is defined for the two-point family only")
    t = np.asarray(t, dtype=np.float64)
    s = spec.scale
    out = np.where((t == s) | (t == -s), 0.5, 0.0)
    if s == 0:
        out = np.where(t == 0, 1.0, 0.0)
    return out[()] if out.ndim == 0 else out


def family_quantile(spec: PerturbationSpec, q):
    q = np.asarray(q, dtype=np.float64)
    if np.any((q <= 0) | (q >= 1)):
        raise DomainError("quantile level must lie in (0, 1)")
    fam, s = spec.family, spec.scale
    if fam is Family.GUMBEL:
        out = -np.log(-np.log(q)) - EULER_GAMMA
    elif fam is Family.NORMAL:
        out = special.ndtri(q)
    elif fam is Family.UNIFORM:
        out = -s + 2 * s * q
    else:
        out = np.where(q <= 0.5, -s, s)
    return out[()] if out.ndim == 0 else out


def log_sum_exp(theta, axis: int = -1):
    """Max-shifted log-sum-exp along ``axis``; accepts batches."""
    x = np.asarray(theta.values if isinstance(theta, Logits) else theta, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("log_sum_exp of an empty vector")
    m = np.max(x, axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of a 2-D array (no validation, used in hot loops)."""
    z = x / temperature if temperature != 1.0 else x
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(theta, temperature: float = 1.0) -> ProbVector:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    x = as_values(theta)
    return ProbVector(softmax_rows(x, temperature))


def canonicalize(theta, space: ParamSpace | None = None) -> Logits:
    """Shift ``theta`` onto the representative of ``space``.

    ``space`` defaults to the tag carried by ``theta``. A Logits value
    already tagged with the target space satisfies its invariant by
    construction and is returned unchanged, which makes the map idempotent.
    """
    if space is None:
        space = theta.space if isinstance(theta, Logits) else ParamSpace.FREE
    if isinstance(theta, Logits) and theta.space is space:
        return theta
    v = as_values(theta)
    if space is ParamSpace.FIRST_ANCHORED:
        v = v - v[0]
    elif space is ParamSpace.ZERO_SUM:
        v = v - v.mean()
    return Logits(v, space)
