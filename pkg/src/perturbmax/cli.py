"""Command-line entry point: ``perturbmax {estimate,exact,probe,fit,table}``.

Exit status: 0 on success, 2 on usage errors (bad or missing flags,
malformed JSON), 1 on numerical failures such as quadrature
non-convergence or a diverged fit.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence, TextIO

import numpy as np

from .core import DomainError, Family, ParamSpace, PerturbationSpec, RngStream
from .estimators import (
    McConfig,
    TieBreak,
    expected_gamma_at_argmax_mc,
    expected_logsumexp_mc,
    expected_max_mc,
    fenchel_gap,
    pathwise_softmax_jacobian_mc,
    perturb_argmax_mc,
    perturb_softmax_mc,
)
from .exact import (
    ConvergenceError,
    QuadConfig,
    discrete2_argmax_subdifferential,
    discrete2_expected_max,
    gumbel_argmax_exact,
    gumbel_expected_max_exact,
    smooth_argmax_quadrature,
    uniform2_argmax,
    uniform2_expected_max,
    uniform_diff_pdf,
)
from .fitting import (
    DEFAULT_EXPLICIT,
    Binomial,
    Explicit,
    FitConfig,
    FitDivergedError,
    Init,
    NegBinomial,
    Objective,
    Poisson,
    compare_families,
    fit,
    table_csv,
)
from . import probes

SEED_ENV = "PERTURBMAX_SEED"


class UsageError(Exception):
    pass


# --- flag parsing ----------------------------------------------------------------

def _vector(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or not all(np.isfinite(vals)):
        raise argparse.ArgumentTypeError(f"expected finite comma-separated numbers, got {text!r}")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not (v >= 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {v}")
    return v


def _spec_json(text: str) -> PerturbationSpec:
    try:
        return PerturbationSpec.from_json(json.loads(text))
    except (json.JSONDecodeError, DomainError, TypeError) as exc:
        raise argparse.ArgumentTypeError(f"malformed perturbation spec: {exc}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_perturbation(p: argparse.ArgumentParser, default: str | None = "gumbel") -> None:
    g = p.add_argument_group("perturbation")
    g.add_argument("--family", choices=[f.value for f in Family], default=default,
                   help="perturbation family (default: %(default)s)")
    g.add_argument("--scale", type=_nonneg_float, default=1.0,
                   help="half-width (uniform) or magnitude (discrete); default %(default)s")
    g.add_argument("--perturbation", type=_spec_json, default=None, metavar="JSON",
                   help='perturbation as JSON, e.g. \'{"family": "normal", "scale": 1}\'; '
                        "overrides --family/--scale")


def _add_mc(p: argparse.ArgumentParser, samples: int = 100_000) -> None:
    g = p.add_argument_group("Monte Carlo")
    g.add_argument("--samples", type=_positive_int, default=samples,
                   help="number of perturbation samples (default: %(default)s)")
    g.add_argument("--seed", type=int, default=None,
                   help=f"random seed (default: ${SEED_ENV} or 0)")
    g.add_argument("--stream", type=_nonneg_int, default=0, help="stream index (default: 0)")
    g.add_argument("--tie-break", choices=[t.value for t in TieBreak],
                   default=TieBreak.SPLIT_MASS.value, help="argmax tie policy")
    g.add_argument("--threads", type=_positive_int, default=1,
                   help="worker threads; results do not depend on this")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, metavar="PATH", help="write output here instead of stdout")
    p.add_argument("--config", default=None, metavar="PATH",
                   help="JSON object of flag values (keys are flag names without dashes); "
                        "explicit flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perturbmax",
                     description="Perturb-softmax / perturb-argmax estimators, "
                                 "references, probes and distribution fitting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="Monte-Carlo estimate of a perturbation quantity")
    est.add_argument("--map", default="argmax",
                     choices=["softmax", "argmax", "logsumexp", "max", "jacobian",
                              "gamma-at-argmax", "fenchel-gap"])
    est.add_argument("--theta", type=_vector, required=True, help="comma-separated parameters")
    est.add_argument("--temperature", type=_positive_float, default=1.0)
    _add_perturbation(est)
    _add_mc(est)
    _add_common(est)

    ex = sub.add_parser("exact", help="closed-form or quadrature reference values")
    ex.add_argument("--which", required=True,
                    choices=["gumbel-argmax", "gumbel-max", "quadrature", "uniform-diff-pdf",
                             "uniform2-max", "uniform2-argmax", "discrete2-max",
                             "discrete2-subdiff"])
    ex.add_argument("--theta", type=_vector, default=None)
    ex.add_argument("--z", type=float, default=None, help="point for uniform-diff-pdf")
    ex.add_argument("--abs-tol", type=_positive_float, default=1e-8)
    ex.add_argument("--tail-mass", type=_positive_float, default=1e-12)
    _add_perturbation(ex, default="normal")
    _add_common(ex)

    pr = sub.add_parser("probe", help="numerical checks; one JSON object per line")
    pr.add_argument("--name", default="all",
                    choices=["all", "completeness", "translation", "convexity", "softmax-grad",
                             "argmax-grad", "uniform2-noninjectivity", "discrete2-multivalue"])
    pr.add_argument("--theta", type=_vector, default=None)
    pr.add_argument("--c", type=float, default=13.7, help="translation for the translation probe")
    pr.add_argument("--direction", type=_vector, default=None, help="direction for convexity")
    pr.add_argument("--potential", choices=["logsumexp", "max"], default="logsumexp")
    pr.add_argument("--h", type=_positive_float, default=None, help="finite-difference step")
    pr.add_argument("--map", choices=["softmax", "argmax"], default="softmax")
    pr.add_argument("--index", type=_nonneg_int, default=0, help="completeness target index")
    pr.add_argument("--levels", type=_vector, default=[0.0, 1.0, 3.0, 10.0])
    pr.add_argument("--d", type=_positive_int, default=2, help="completeness dimension")
    pr.add_argument("--p1", type=float, default=0.5)
    pr.add_argument("--temperature", type=_positive_float, default=1.0)
    _add_perturbation(pr)
    _add_mc(pr, samples=10_000)
    _add_common(pr)

    for name, helptext in (("fit", "fit one target with Adam"),
                           ("table", "compare families over targets and seeds (CSV)")):
        p = sub.add_parser(name, help=helptext)
        if name == "fit":
            p.add_argument("--target", default="explicit",
                           choices=["binomial", "poisson", "negbinomial", "explicit"])
            p.add_argument("--n", type=_positive_int, default=12, help="binomial trials")
            p.add_argument("--p", type=float, default=None,
                           help="success probability (binomial 0.3, negbinomial 0.6)")
            p.add_argument("--lam", type=_positive_float, default=50.0, help="poisson rate")
            p.add_argument("--r", type=_positive_float, default=50.0, help="negbinomial successes")
            p.add_argument("--d", type=_positive_int, default=100, help="truncation size")
            p.add_argument("--weights", type=_vector, default=None,
                           help="explicit target weights (default: the 10-point x/68 vector)")
            _add_perturbation(p, default="normal")
            p.add_argument("--seed", type=int, default=None,
                           help=f"random seed (default: ${SEED_ENV} or 0)")
            p.add_argument("--output", choices=["json", "csv"], default="json",
                           help="json: final state; csv: per-step loss trace")
            p.add_argument("--trace", default=None, metavar="PATH",
                           help="also write the loss trace CSV here")
        else:
            p.add_argument("--targets", default="explicit,binomial,poisson,negbinomial",
                           help="comma-separated subset of the four experiment targets")
            p.add_argument("--families", default="gumbel,normal",
                           help="comma-separated perturbation families")
            p.add_argument("--repeats", type=_positive_int, default=5)
            p.add_argument("--seed", type=int, default=None,
                           help=f"seed of the first repeat (default: ${SEED_ENV} or 0)")
        p.add_argument("--lr", type=_nonneg_float, default=1e-2)
        p.add_argument("--iters", type=_positive_int, default=300)
        p.add_argument("--batch", type=_positive_int, default=256)
        p.add_argument("--temperature", type=_positive_float, default=1.0)
        p.add_argument("--space", choices=[s.value for s in ParamSpace], default="free")
        p.add_argument("--objective", choices=[o.value for o in Objective], default="exact")
        p.add_argument("--n-target-samples", type=_positive_int, default=1000)
        p.add_argument("--init", choices=[i.value for i in Init], default="uniform")
        p.add_argument("--init-noise", type=_nonneg_float, default=0.1)
        p.add_argument("--eval-samples", type=_positive_int, default=100_000)
        p.add_argument("--threads", type=_positive_int, default=1,
                       help="accepted for symmetry; fits run sequentially")
        _add_common(p)
    return parser


def _config_argv(path: str) -> list[str]:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: malformed JSON in {path}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("--config: expected a JSON object")
    argv = []
    for key, value in cfg.items():
        flag = "--" + str(key).replace("_", "-")
        if isinstance(value, bool):
            raise UsageError(f"--config: unsupported boolean for {flag}")
        if isinstance(value, dict):
            value = json.dumps(value)
        elif isinstance(value, list):
            value = ",".join(repr(float(v)) for v in value)
        argv += [flag, str(value)]
    return argv


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    # find --config first so the file can supply otherwise required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv[1:])
    if argv and not argv[0].startswith("-") and known.config:
        # config values go first so explicit flags override them
        argv = [argv[0]] + _config_argv(known.config) + argv[1:]
    args = parser.parse_args(argv)
    if getattr(args, "seed", "absent") is None:
        args.seed = _default_seed()
    return args


def _spec(args) -> PerturbationSpec:
    if args.perturbation is not None:
        return args.perturbation
    try:
        return PerturbationSpec(Family(args.family), args.scale)
    except DomainError as exc:
        raise UsageError(f"--scale: {exc}")


def _mc(args) -> McConfig:
    return McConfig(args.samples, RngStream(args.seed, args.stream),
                    TieBreak(args.tie_break), args.threads)


def _echo(args, spec: PerturbationSpec | None = None) -> dict:
    skip = {"config", "out", "perturbation", "family", "scale", "trace"}
    cfg = {k.replace("_", "-"): v for k, v in sorted(vars(args).items()) if k not in skip}
    if spec is not None:
        cfg["perturbation"] = spec.to_json()
    return cfg


def _dumps(obj) -> str:
    return json.dumps(obj, allow_nan=False) + "\n"


# --- commands ------------------------------------------------------------------------

def _cmd_estimate(args) -> str:
    spec = _spec(args)
    mc = _mc(args)
    theta = np.asarray(args.theta)
    kind = args.map
    if kind == "fenchel-gap":
        return _dumps({"gap": fenchel_gap(theta, spec, mc), "config": _echo(args, spec)})
    if kind == "softmax":
        est = perturb_softmax_mc(theta, spec, args.temperature, mc)
    elif kind == "argmax":
        est = perturb_argmax_mc(theta, spec, mc)
    elif kind == "logsumexp":
        est = expected_logsumexp_mc(theta, spec, mc, args.temperature)
    elif kind == "max":
        est = expected_max_mc(theta, spec, mc)
    elif kind == "jacobian":
        est = pathwise_softmax_jacobian_mc(theta, spec, args.temperature, mc)
    else:
        est = expected_gamma_at_argmax_mc(theta, spec, mc)
    return _dumps({**est.to_json(), "config": _echo(args, spec)})


def _need_theta(args) -> np.ndarray:
    if args.theta is None:
        raise UsageError(f"--theta is required for --which {args.which}")
    return np.asarray(args.theta)


def _cmd_exact(args) -> str:
    which = args.which
    spec = None
    if which == "uniform-diff-pdf":
        if args.z is None:
            raise UsageError("--z is required for --which uniform-diff-pdf")
        out = {"value": float(uniform_diff_pdf(args.z))}
    elif which == "gumbel-argmax":
        out = {"value": gumbel_argmax_exact(_need_theta(args)).probs.tolist()}
    elif which == "gumbel-max":
        out = {"value": gumbel_expected_max_exact(_need_theta(args))}
    elif which == "quadrature":
        spec = _spec(args)
        quad = QuadConfig(args.abs_tol, args.tail_mass)
        out = {"value": smooth_argmax_quadrature(_need_theta(args), spec, quad).probs.tolist()}
    else:
        fn = {"uniform2-max": uniform2_expected_max, "uniform2-argmax": uniform2_argmax,
              "discrete2-max": discrete2_expected_max,
              "discrete2-subdiff": discrete2_argmax_subdifferential}[which]
        out = fn(_need_theta(args)).to_json()
    return _dumps({**out, "config": _echo(args, spec)})


def _probe_results(args) -> list[probes.ProbeResult]:
    spec = _spec(args)
    mc = _mc(args)
    name = args.name
    theta = np.asarray(args.theta) if args.theta is not None else None
    results = []

    def default_theta(d=2):
        return theta if theta is not None else np.array([1.0, 0.0] + [0.0] * (d - 2))

    if name in ("all", "completeness"):
        maps = ["softmax", "argmax"] if name == "all" else [args.map]
        for m in maps:
            pts = probes.completeness_probe(spec, probes.MapKind(m), args.index, args.levels,
                                            args.d, mc, args.temperature)
            results.append(probes.completeness_result(pts, m))
    if name in ("all", "translation"):
        results.append(probes.translation_invariance_check(default_theta(), args.c, spec, mc,
                                                           args.temperature))
    if name in ("all", "convexity"):
        th = default_theta()
        h = args.h if args.h is not None else 0.5
        dirs = [np.asarray(args.direction)] if args.direction is not None else [
            np.ones_like(th), np.eye(th.size)[0] - np.eye(th.size)[1]]
        for v in dirs:
            results.append(probes.strict_convexity_probe(th, v, probes.Potential(args.potential),
                                                         spec, mc, h, args.temperature))
    if name in ("all", "softmax-grad"):
        h = args.h if args.h is not None else 1e-4
        results.append(probes.softmax_gradient_check(default_theta(), spec, args.temperature,
                                                     mc, h))
    if name == "argmax-grad" or (name == "all" and spec.continuous):
        h = args.h if args.h is not None else 1e-4
        results.append(probes.argmax_gradient_check(default_theta(), spec, mc, h))
    if name in ("all", "uniform2-noninjectivity"):
        results.append(probes.uniform2_noninjectivity_demo())
    if name in ("all", "discrete2-multivalue"):
        for p1 in ([0.25, 0.5, 0.75, 0.9] if name == "all" else [args.p1]):
            results.append(probes.discrete2_multivalue_demo(p1))
    return results


def _cmd_probe(args) -> str:
    echo = _echo(args, _spec(args))
    return "".join(_dumps({**r.to_json(), "config": echo}) for r in _probe_results(args))


def _fit_config(args, target, spec) -> FitConfig:
    return FitConfig(
        target=target, spec=spec, temperature=args.temperature, lr=args.lr, iters=args.iters,
        batch=args.batch, init=Init(args.init), init_noise=args.init_noise, seed=args.seed,
        objective=Objective(args.objective), n_target_samples=args.n_target_samples,
        space=ParamSpace(args.space), eval_samples=args.eval_samples,
    )


def _fit_target(args):
    if args.target == "binomial":
        return Binomial(args.n, 0.3 if args.p is None else args.p)
    if args.target == "poisson":
        return Poisson(args.lam, args.d)
    if args.target == "negbinomial":
        return NegBinomial(args.r, 0.6 if args.p is None else args.p, args.d)
    if args.weights is not None:
        return Explicit(tuple(args.weights))
    return DEFAULT_EXPLICIT


def _csv_with_config(body: str, config: dict) -> str:
    return "# config: " + json.dumps(config) + "\n" + body


def _cmd_fit(args) -> tuple[str, str | None]:
    spec = _spec(args)
    trace = fit(_fit_config(args, _fit_target(args), spec))
    echo = _echo(args, spec)
    csv_text = _csv_with_config(trace.trace_csv(), echo)
    if args.output == "csv":
        return csv_text, csv_text if args.trace else None
    return _dumps({**trace.to_json(), "cli": echo}), csv_text if args.trace else None


_TABLE_TARGETS = {
    "explicit": DEFAULT_EXPLICIT,
    "binomial": Binomial(12, 0.3),
    "poisson": Poisson(50.0, 100),
    "negbinomial": NegBinomial(50.0, 0.6, 100),
}


def _cmd_table(args) -> str:
    names = [t.strip() for t in args.targets.split(",") if t.strip()]
    bad = [t for t in names if t not in _TABLE_TARGETS]
    if bad or not names:
        raise UsageError(f"--targets: unknown target(s) {bad}; choose from {sorted(_TABLE_TARGETS)}")
    fams = [f.strip() for f in args.families.split(",") if f.strip()]
    try:
        specs = [PerturbationSpec(Family(f)) for f in fams]
    except ValueError:
        raise UsageError(f"--families: unknown family in {args.families!r}")
    if not specs:
        raise UsageError("--families: empty list")
    targets = [_TABLE_TARGETS[t] for t in names]
    base = _fit_config(args, targets[0], specs[0])
    rows = compare_families(targets, specs, args.repeats, base)
    return _csv_with_config(table_csv(rows), _echo(args))


def _write(text: str, path: str | None, stdout: TextIO) -> None:
    if path is None:
        stdout.write(text)
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def run(argv: Sequence[str], stdout: TextIO | None = None,
        stderr: TextIO | None = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = parse_args(argv)
        if args.command == "estimate":
            text, extra = _cmd_estimate(args), None
        elif args.command == "exact":
            text, extra = _cmd_exact(args), None
        elif args.command == "probe":
            text, extra = _cmd_probe(args), None
        elif args.command == "fit":
            text, extra = _cmd_fit(args)
        else:
            text, extra = _cmd_table(args), None
        _write(text, args.out, stdout)
        if extra is not None:
            _write(extra, args.trace, stdout)
        return 0
    except UsageError as exc:
        stderr.write(f"{exc}\n")
        return 2
    except SystemExit as exc:
        # --help exits through argparse
        return int(exc.code or 0)
    except (ConvergenceError, FitDivergedError) as exc:
        stderr.write(f"perturbmax: {exc}\n")
        return 1
    except ValueError as exc:
        stderr.write(f"perturbmax: error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
