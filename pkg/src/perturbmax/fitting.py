"""L1 fitting of perturb-softmax models to discrete target distributions.

Parameters are optimised with Adam on a Monte-Carlo L1 objective; each
step draws a fresh perturbation batch from its own random stream so a fit
is fully determined by its config.
"""
from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence, Union

import numpy as np
from scipy.special import gammaln

from .core import (
    DimensionError,
    DomainError,
    Logits,
    ParamSpace,
    PerturbationSpec,
    ProbVector,
    RngStream,
    canonicalize,
    sample_block,
    softmax_rows,
)
from .estimators import McConfig, pathwise_softmax_jacobian_mc, perturb_softmax_mc

# stream indices below STEP_STREAM_OFFSET are reserved for non-step draws
TARGET_STREAM = 0
INIT_STREAM = 1
EVAL_STREAM = 2
STEP_STREAM_OFFSET = 16


class TruncationWarning(UserWarning):
    pass


class FitDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite parameters at step {step}")
        self.step = step


# --- targets -------------------------------------------------------------------

@dataclass(frozen=True)
class Binomial:
    n: int
    p: float

    @property
    def label(self) -> str:
        return f"binomial(n={self.n},p={self.p:g})"


@dataclass(frozen=True)
class Poisson:
    lam: float
    d: int = 100

    @property
    def label(self) -> str:
        return f"poisson(lambda={self.lam:g},d={self.d})"


@dataclass(frozen=True)
class NegBinomial:
    """Failures before the r-th success, success probability p."""

    r: float
    p: float
    d: int = 100

    @property
    def label(self) -> str:
        return f"negbinomial(r={self.r:g},p={self.p:g},d={self.d})"


@dataclass(frozen=True)
class Explicit:
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def label(self) -> str:
        return f"explicit(d={len(self.weights)})"


TargetDistribution = Union[Binomial, Poisson, NegBinomial, Explicit]

DEFAULT_EXPLICIT = Explicit(tuple(w / 68 for w in (10, 3, 4, 5, 10, 10, 3, 4, 5, 10)))
BENCHMARK_TARGETS: tuple[TargetDistribution, ...] = (
    DEFAULT_EXPLICIT,
    Binomial(12, 0.3),
    Poisson(50.0, 100),
    NegBinomial(50.0, 0.6, 100),
)


def target_to_json(target: TargetDistribution) -> dict:
    kind = {Binomial: "binomial", Poisson: "poisson",
            NegBinomial: "negbinomial", Explicit: "explicit"}[type(target)]
    out = {"kind": kind}
    out.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(target).items()})
    return out


def _log_pmf(target: TargetDistribution) -> np.ndarray:
    if isinstance(target, Binomial):
        n, p = int(target.n), float(target.p)
        if n < 1 or not 0 < p < 1:
            raise DomainError("binomial needs n >= 1 and 0 < p < 1")
        k = np.arange(n + 1)
        return (gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
                + k * math.log(p) + (n - k) * math.log1p(-p))
    if isinstance(target, Poisson):
        lam = float(target.lam)
        if not lam > 0 or target.d < 2:
            raise DomainError("poisson needs lambda > 0 and d >= 2")
        k = np.arange(target.d)
        return k * math.log(lam) - lam - gammaln(k + 1)
    if isinstance(target, NegBinomial):
        r, p = float(target.r), float(target.p)
        if not r > 0 or not 0 < p < 1 or target.d < 2:
            raise DomainError("negative binomial needs r > 0, 0 < p < 1 and d >= 2")
        k = np.arange(target.d)
        return (gammaln(k + r) - gammaln(k + 1) - gammaln(r)
                + r * math.log(p) + k * math.log1p(-p))
    raise TypeError(f"not a parametric target: {target!r}")


def captured_mass(target: TargetDistribution) -> float:
    """Probability mass of the untruncated law that falls on {0, ..., d-1}."""
    if isinstance(target, Explicit):
        return 1.0
    return float(np.exp(_log_pmf(target)).sum())


def target_pmf(target: TargetDistribution) -> ProbVector:
    """Target pmf on {0, ..., d-1}, renormalised after truncation.

    Emits :class:`TruncationWarning` when truncation keeps under 99% of the mass.
    """
    if isinstance(target, Explicit):
        w = np.asarray(target.weights, dtype=float)
        if w.size < 2 or np.any(w < 0) or not w.sum() > 0:
            raise DomainError("explicit weights must be non-negative with positive sum")
        return ProbVector(w / w.sum())
    pmf = np.exp(_log_pmf(target))
    mass = float(pmf.sum())
    if mass < 0.99:
        warnings.warn(f"{target.label} keeps only {mass:.4f} of its mass after truncation",
                      TruncationWarning, stacklevel=2)
    return ProbVector(pmf / mass)


def empirical_histogram(pmf: ProbVector, n_samples: int, rng: RngStream) -> ProbVector:
    gen = rng.chunk_generator(0)
    draws = gen.choice(len(pmf), size=n_samples, p=pmf.probs)
    return ProbVector(np.bincount(draws, minlength=len(pmf)) / n_samples)


# --- objective -------------------------------------------------------------------

def l1_loss(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


def l1_gradient_mc(theta, target, spec: PerturbationSpec, temperature: float,
                   mc: McConfig) -> np.ndarray:
    """sign(p_hat - q)^T J_hat, with p_hat and J_hat from the same samples."""
    q = np.asarray(target, dtype=float)
    p_hat = perturb_softmax_mc(theta, spec, temperature, mc).mean
    jac = pathwise_softmax_jacobian_mc(theta, spec, temperature, mc).mean
    return np.sign(p_hat - q) @ jac


def _batch_step(theta: np.ndarray, q: np.ndarray, gamma: np.ndarray,
                temperature: float) -> tuple[np.ndarray, float, np.ndarray]:
    s = softmax_rows(theta + gamma, temperature)
    p_hat = s.mean(axis=0)
    u = np.sign(p_hat - q)
    # u^T J for the symmetric per-sample Jacobian (diag(s) - s s^T) / T
    grad = (s * u - s * (s @ u)[:, None]).mean(axis=0) / temperature
    return p_hat, float(np.abs(p_hat - q).sum()), grad


class Adam:
    def __init__(self, dim: int, lr: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Return the parameter update (to be added) for ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --- fitting ---------------------------------------------------------------------

class Init(enum.Enum):
    UNIFORM_CONSTANT = "uniform"
    SEEDED = "seeded"


class Objective(enum.Enum):
    EXACT_PMF = "exact"
    EMPIRICAL_HISTOGRAM = "empirical"


@dataclass(frozen=True)
class FitConfig:
    target: TargetDistribution
    spec: PerturbationSpec
    temperature: float = 1.0
    lr: float = 1e-2
    iters: int = 300
    batch: int = 256
    init: Init = Init.UNIFORM_CONSTANT
    init_noise: float = 0.1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    objective: Objective = Objective.EXACT_PMF
    n_target_samples: int = 1000
    space: ParamSpace = ParamSpace.FREE
    eval_samples: int = 100_000

    def __post_init__(self) -> None:
        object.__setattr__(self, "init", Init(self.init))
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "space", ParamSpace(self.space))
        if self.iters < 1 or self.batch < 1 or self.eval_samples < 1:
            raise DomainError("iters, batch and eval_samples must be >= 1")
        if not self.temperature > 0 or self.lr < 0 or self.init_noise < 0:
            raise DomainError("temperature must be positive; lr and init_noise non-negative")
        if self.n_target_samples < 1:
            raise DomainError("n_target_samples must be >= 1")

    def to_json(self) -> dict:
        return {
            "target": target_to_json(self.target),
            "perturbation": self.spec.to_json(),
            "temperature": self.temperature,
            "lr": self.lr,
            "iters": self.iters,
            "batch": self.batch,
            "init": self.init.value,
            "init_noise": self.init_noise,
            "seed": self.seed,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "objective": self.objective.value,
            "n_target_samples": self.n_target_samples,
            "space": self.space.value,
            "eval_samples": self.eval_samples,
        }


@dataclass(frozen=True)
class FitTrace:
    losses: np.ndarray
    theta_final: Logits
    model_final: ProbVector
    config: FitConfig
    target: ProbVector = field(repr=False)

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(self.losses):
            w.writerow([i, repr(float(loss))])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "theta": self.theta_final.values.tolist(),
            "model": self.model_final.probs.tolist(),
            "target": self.target.probs.tolist(),
            "final_loss": self.final_loss,
            "config": self.config.to_json(),
        }


def _project_step(step: np.ndarray, space: ParamSpace) -> np.ndarray:
    if space is ParamSpace.ZERO_SUM:
        return step - step.mean()
    if space is ParamSpace.FIRST_ANCHORED:
        step = step.copy()
        step[0] = 0.0
    return step


def fit_target(config: FitConfig) -> ProbVector:
    """The vector the loss is measured against under ``config.objective``."""
    pmf = target_pmf(config.target)
    if config.objective is Objective.EMPIRICAL_HISTOGRAM:
        return empirical_histogram(pmf, config.n_target_samples,
                                   RngStream(config.seed, TARGET_STREAM))
    return pmf


def initial_theta(config: FitConfig, d: int) -> np.ndarray:
    if config.init is Init.SEEDED:
        gen = RngStream(config.seed, INIT_STREAM).chunk_generator(0)
        theta = config.init_noise * gen.standard_normal(d)
    else:
        theta = np.zeros(d)
    return canonicalize(theta, config.space).values.copy()


def fit(config: FitConfig) -> FitTrace:
    """Run Adam on the batch L1 objective for ``config.iters`` steps.

    The loss recorded at step t is measured with the same batch that
    produced the step's gradient. Non-finite parameters abort with
    :class:`FitDivergedError`.
    """
    q_vec = fit_target(config)
    q = q_vec.probs
    d = q.size
    theta = initial_theta(config, d)
    opt = Adam(d, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    losses = np.empty(config.iters)
    for t in range(config.iters):
        gamma = sample_block(config.spec, config.batch, d,
                             RngStream(config.seed, STEP_STREAM_OFFSET + t))
        _, losses[t], grad = _batch_step(theta, q, gamma, config.temperature)
        grad = _project_step(grad, config.space)
        theta = theta + _project_step(opt.step(grad), config.space)
        if not np.all(np.isfinite(theta)):
            raise FitDivergedError(t)
        if config.space is ParamSpace.ZERO_SUM:
            theta = theta - theta.mean()
    theta_final = Logits(theta, config.space)
    mc = McConfig(config.eval_samples, RngStream(config.seed, EVAL_STREAM))
    model = perturb_softmax_mc(theta, config.spec, config.temperature, mc).as_prob()
    return FitTrace(losses, theta_final, model, config, q_vec)


# --- comparison table ----------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    target: str
    family: str
    mean_l1: float
    std_l1: float
    repeats: int
    seed_base: int
    finals: tuple[float, ...] = field(default=(), compare=False)


TABLE_COLUMNS = ("target", "family", "mean_l1", "std_l1", "repeats", "seed_base")


def compare_families(targets: Sequence[TargetDistribution], specs: Sequence[PerturbationSpec],
                     repeats: int, base_config: FitConfig) -> list[ComparisonRow]:
    """Final L1 (mean and sample std over seeds) for every target x family."""
    if repeats < 1:
        raise DomainError("repeats must be >= 1")
    rows = []
    for target in targets:
        for spec in specs:
            finals = tuple(
                fit(replace(base_config, target=target, spec=spec,
                            seed=base_config.seed + r)).final_loss
                for r in range(repeats)
            )
            arr = np.asarray(finals)
            std = float(arr.std(ddof=1)) if repeats > 1 else 0.0
            rows.append(ComparisonRow(target.label, spec.family.value, float(arr.mean()),
                                      std, repeats, base_config.seed, finals))
    return rows


def table_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow([r.target, r.family, repr(r.mean_l1), repr(r.std_l1), r.repeats, r.seed_base])
    return buf.getvalue()
