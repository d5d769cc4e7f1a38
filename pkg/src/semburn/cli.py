"""Command-line entry point for fitting, ML estimation, SBC, and
single-point likelihood evaluation.

Every run is described by a manifest (paths, config, version, seed)
whose SHA-256 hash is embedded in each artifact, and the manifest
itself is written alongside them, so a run can be reproduced from its
outputs alone.  Reruns with the same manifest are bit-identical.

Exit codes: 0 success, 1 usage or I/O error, 2 model error,
3 convergence warning.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_csv
from .likelihood import (
    ImpliedMoments,
    ModelContext,
    implied_moments,
    marginal_loglik,
    maximize_marginal_loglik,
)
from .model import ModelBuildError, assemble, build_templates
from .posterior import build_sign_rule, latent_scores, sign_correct, summarize
from .priors import PriorError, default_priors, parse_prior_rules
from .sampler import SamplerConfig, SamplerError, run_chains
from .sbc import SbcConfig, run_sbc
from .syntax import (
    ModelSyntaxError,
    build_parameter_table,
    infer_observed,
    parse_model,
)

__all__ = ["main", "RunManifest"]

_RHAT_DEFAULT = 1.05


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures map to exit code 1."""

    def error(self, message):
        raise _UsageError(message)


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce a run, embedded in its outputs."""

    command: str
    model_path: str
    data_path: str | None
    priors_path: str | None
    config: dict
    out_dir: str
    engine_version: str
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    def sha256(self) -> str:
        canonical = json.dumps(
            self.to_dict(), sort_keys=True, separators=(",", ":")
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: {e.strerror or e}") from None


def _templates_from_text(text: str):
    lines = parse_model(text)
    table = build_parameter_table(lines, infer_observed(lines))
    return build_templates(table)


def _build_priors(t, selector: str, scale_param: str):
    """Resolve --priors: a named set or a rules file path."""
    if selector in ("set1", "set2"):
        return (
            default_priors(
                t, informative=selector == "set2", scale_param=scale_param
            ),
            None,
        )
    rules = parse_prior_rules(_read_text(selector))
    return default_priors(t, scale_param=scale_param, rules=rules), selector


def _json_dump(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _write_csv(path: Path, manifest_hash: str, header, rows, comments=()):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"#manifest={manifest_hash}\n")
        for line in comments:
            fh.write(f"#{line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cell(value) -> str:
    return repr(float(value))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary_rows(table):
    for row in table.rows():
        yield [row["param"]] + [
            _cell(row[k])
            for k in (
                "mean", "sd", "q5", "q50", "q95",
                "rhat", "ess_bulk", "ess_per_sec",
            )
        ]


def cmd_fit(args) -> int:
    text = _read_text(args.model)
    t = _templates_from_text(text)
    data = load_csv(args.data, list(t.observed))
    priors, priors_path = _build_priors(t, args.priors, args.scale_param)
    ctx = ModelContext.build(t, data, priors, simplify=not args.no_simplify)
    config = SamplerConfig(
        chains=args.chains, warmup=args.warmup, samples=args.samples,
        seed=args.seed, mode=args.mode,
    )
    out = _out_dir(args)
    manifest = RunManifest(
        command="fit", model_path=args.model, data_path=args.data,
        priors_path=priors_path, config=asdict(config), out_dir=str(out),
        engine_version=__version__, seed=args.seed,
    )
    mh = manifest.sha256()

    draws = run_chains(ctx, config)
    draws = sign_correct(draws, build_sign_rule(t))
    table = summarize(draws)

    _json_dump(
        out / "manifest.json",
        {"manifest": manifest.to_dict(), "manifest_sha256": mh},
    )
    _write_csv(
        out / "summary.csv", mh,
        ["param", "mean", "sd", "q5", "q50", "q95",
         "rhat", "ess_bulk", "ess_per_sec"],
        _summary_rows(table),
    )
    draw_rows = (
        [str(c), str(i), name, _cell(draws.draws[c, i, k])]
        for c in range(draws.n_chains)
        for i in range(draws.n_samples)
        for k, name in enumerate(draws.param_names)
    )
    _write_csv(
        out / "draws.csv", mh, ["chain", "iter", "param", "value"], draw_rows
    )
    _json_dump(out / "diagnostics.json", {
        "manifest": manifest.to_dict(),
        "manifest_sha256": mh,
        "mode": draws.mode,
        "rhat": {n: float(v) for n, v in zip(table.names, table.rhat)},
        "ess_bulk": {
            n: float(v) for n, v in zip(table.names, table.ess_bulk)
        },
        "ess_per_sec": {
            n: float(v) for n, v in zip(table.names, table.ess_per_sec)
        },
        "divergences": {
            "total": int(draws.divergent.sum()),
            "per_chain": draws.divergent.sum(axis=1).astype(int).tolist(),
        },
        "timing": {
            "seconds_per_chain": [float(s) for s in draws.seconds],
            "seconds_total": float(draws.seconds.sum()),
        },
        "accept_rate": (
            None if draws.accept_rate is None
            else [float(a) for a in draws.accept_rate]
        ),
    })

    if args.latent_scores:
        rng = np.random.default_rng(
            np.random.SeedSequence([args.seed, 104729])
        )
        scores = latent_scores(draws, ctx, rng)
        rows = []
        for j in range(t.m):
            per_row = scores[:, :, j]
            q5, q50, q95 = np.percentile(per_row, [5, 50, 95], axis=0)
            mean = per_row.mean(axis=0)
            sd = per_row.std(axis=0, ddof=1)
            for i in range(data.n):
                rows.append([
                    str(i), t.latents[j], _cell(mean[i]), _cell(sd[i]),
                    _cell(q5[i]), _cell(q50[i]), _cell(q95[i]),
                ])
        _write_csv(
            out / "latent_scores.csv", mh,
            ["row", "latent", "mean", "sd", "q5", "q50", "q95"], rows,
        )

    if args.compare:
        ml = maximize_marginal_loglik(
            ctx, restarts=args.restarts, seed=args.seed
        )
        _write_ml_csv(out, mh, t, ml)
        diffs: dict[str, float] = {}
        for i, klass in enumerate(t.param_classes):
            gap = abs(float(table.mean[i]) - float(ml.theta[i]))
            diffs[klass] = max(diffs.get(klass, 0.0), gap)
        _json_dump(out / "compare.json", {
            "manifest": manifest.to_dict(),
            "manifest_sha256": mh,
            "max_abs_diff_by_class": diffs,
            "ml_logp": float(ml.logp),
            "ml_converged": bool(ml.converged),
        })

    worst = float(np.nanmax(table.rhat)) if table.rhat.size else 1.0
    if not np.isfinite(worst) or worst >= args.rhat_threshold:
        print(
            f"convergence warning: max Rhat {worst:.4f} >= "
            f"{args.rhat_threshold}",
            file=sys.stderr,
        )
        return 3
    return 0


def _write_ml_csv(out: Path, mh: str, t, ml) -> None:
    rows = [
        [name, _cell(ml.theta[i]), _cell(ml.se[i])]
        for i, name in enumerate(t.param_names)
    ]
    _write_csv(
        out / "ml.csv", mh, ["param", "estimate", "se"], rows,
        comments=[
            f"logp={_cell(ml.logp)}",
            f"converged={str(bool(ml.converged)).lower()}",
        ],
    )


def cmd_ml(args) -> int:
    text = _read_text(args.model)
    t = _templates_from_text(text)
    data = load_csv(args.data, list(t.observed))
    ctx = ModelContext.build(
        t, data, default_priors(t), simplify=not args.no_simplify
    )
    out = _out_dir(args)
    manifest = RunManifest(
        command="ml", model_path=args.model, data_path=args.data,
        priors_path=None,
        config={"restarts": args.restarts}, out_dir=str(out),
        engine_version=__version__, seed=args.seed,
    )
    mh = manifest.sha256()
    ml = maximize_marginal_loglik(ctx, restarts=args.restarts, seed=args.seed)
    _json_dump(
        out / "manifest.json",
        {"manifest": manifest.to_dict(), "manifest_sha256": mh},
    )
    _write_ml_csv(out, mh, t, ml)
    if not ml.converged:
        print("warning: optimizer did not report convergence",
              file=sys.stderr)
    return 0


def _shrink_bins(bins: int, keep: int, reps: int) -> int:
    """Largest divisor of keep + 1 that is <= min(bins, reps)."""
    cap = min(bins, reps)
    for b in range(cap, 0, -1):
        if (keep + 1) % b == 0:
            return b
    return 1


def cmd_sbc(args) -> int:
    text = _read_text(args.model)
    t = _templates_from_text(text)
    custom = args.priors not in ("set1", "set2")
    base = SbcConfig()
    bins = _shrink_bins(base.bins, base.posterior_draws_kept, args.reps)
    config = SbcConfig(
        replications=args.reps,
        bins=bins,
        priors="custom" if custom else args.priors,
        warmup=args.warmup,
        seed=args.seed,
    )
    priors = None
    priors_path = None
    if custom:
        rules = parse_prior_rules(_read_text(args.priors))
        priors = default_priors(t, rules=rules)
        priors_path = args.priors
    out = _out_dir(args)
    manifest = RunManifest(
        command="sbc", model_path=args.model, data_path=None,
        priors_path=priors_path, config=asdict(config), out_dir=str(out),
        engine_version=__version__, seed=args.seed,
    )
    mh = manifest.sha256()

    def progress(done, total):
        print(f"replication {done}/{total}", file=sys.stderr, flush=True)

    result = run_sbc(t, config, priors=priors, progress=progress)
    _json_dump(
        out / "manifest.json",
        {"manifest": manifest.to_dict(), "manifest_sha256": mh},
    )
    report = result.to_json()
    report["manifest"] = manifest.to_dict()
    report["manifest_sha256"] = mh
    report["config"] = asdict(config)
    _json_dump(out / "sbc_report.json", report)
    rows = [
        [str(rep)] + [str(int(v)) for v in result.ranks[rep]]
        for rep in range(result.accepted)
    ]
    _write_csv(
        out / "sbc_ranks.csv", mh,
        ["replication"] + list(result.param_names), rows,
    )
    return 0


def _read_theta(path: str, t) -> np.ndarray:
    """Named parameter values, one CSV row per free parameter."""
    values: dict[str, float] = {}
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                if row[0].strip().lower() == "param":
                    continue
                if len(row) < 2:
                    raise DataError(f"{path}: malformed row {row!r}")
                try:
                    values[row[0].strip()] = float(row[1])
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value in row {row!r}"
                    ) from None
    except OSError as e:
        raise DataError(f"{path}: {e.strerror or e}") from None
    unknown = sorted(set(values) - set(t.param_names))
    if unknown:
        raise ModelBuildError(f"unknown parameters in theta file: {unknown}")
    missing = sorted(set(t.param_names) - set(values))
    if missing:
        raise ModelBuildError(f"theta file missing parameters: {missing}")
    return np.array([values[name] for name in t.param_names])


def cmd_loglik(args) -> int:
    text = _read_text(args.model)
    t = _templates_from_text(text)
    data = load_csv(args.data, list(t.observed))
    ctx = ModelContext.build(
        t, data, default_priors(t), simplify=not args.no_simplify
    )
    theta = _read_theta(args.theta, t)
    sm = assemble(t, theta)
    mom = implied_moments(sm, ctx.flags)
    flags = ctx.flags
    print(
        f"flags: b_recursive={flags.b_recursive} "
        f"psi_diagonal={flags.psi_diagonal} "
        f"theta_diagonal={flags.theta_diagonal}"
    )
    if not isinstance(mom, ImpliedMoments):
        print(f"logp: REJECT ({mom.reason})")
        return 0
    total = marginal_loglik(mom, ctx.groups)
    if total.rejected:
        print("logp: REJECT (sigma not positive definite)")
        return 0
    print(f"logp: {_cell(total.logp)}")
    for g_index, g in enumerate(ctx.groups):
        part = marginal_loglik(mom, [g])
        print(
            f"pattern {g_index} (rows={g.count}, observed={g.k}): "
            f"{_cell(part.logp)}"
        )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="semburn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def sampling_flags(p):
        p.add_argument("--chains", type=int, default=4)
        p.add_argument("--warmup", type=int, default=300)
        p.add_argument("--samples", type=int, default=1000)
        p.add_argument(
            "--mode", choices=("marginal", "conditional"), default="marginal"
        )

    def common_flags(p, priors=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".")
        p.add_argument("--no-simplify", action="store_true")
        if priors:
            p.add_argument(
                "--priors", default="set1",
                help="set1, set2, or a prior rules file",
            )
            p.add_argument(
                "--scale-param", choices=("sd", "var", "prec"), default="sd"
            )

    fit = sub.add_parser("fit", help="sample the posterior")
    fit.add_argument("model")
    fit.add_argument("data")
    sampling_flags(fit)
    common_flags(fit)
    fit.add_argument("--latent-scores", action="store_true")
    fit.add_argument("--compare", action="store_true",
                     help="also run ML and report max posterior-ML gaps")
    fit.add_argument("--restarts", type=int, default=3)
    fit.add_argument("--rhat-threshold", type=float, default=_RHAT_DEFAULT)
    fit.set_defaults(func=cmd_fit)

    ml = sub.add_parser("ml", help="maximum likelihood point estimates")
    ml.add_argument("model")
    ml.add_argument("data")
    ml.add_argument("--restarts", type=int, default=3)
    common_flags(ml, priors=False)
    ml.set_defaults(func=cmd_ml)

    sbc = sub.add_parser("sbc", help="simulation-based calibration")
    sbc.add_argument("model")
    sbc.add_argument("--reps", type=int, default=100)
    sbc.add_argument("--warmup", type=int, default=300)
    common_flags(sbc)
    sbc.set_defaults(func=cmd_sbc)

    loglik = sub.add_parser(
        "loglik", help="evaluate the marginal log-likelihood at a point"
    )
    loglik.add_argument("model")
    loglik.add_argument("data")
    loglik.add_argument("theta", help="CSV of param,value rows")
    common_flags(loglik, priors=False)
    loglik.set_defaults(func=cmd_loglik)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ModelSyntaxError, ModelBuildError, PriorError, SamplerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
