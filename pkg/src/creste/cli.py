"""``creste estimate`` and ``creste simulate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Errors print one line to stderr, ``error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import bootstrap_variance
from .config import EMBED_PREFIX, KEYS, RunConfig, build_config, load_config_file, parse_value
from .data import load_csv
from .exceptions import ConfigError, CresteError, NumericalError
from .kernels import complier_proportion
from .shortfall import two_stage_fit
from .simulation import METRIC_FIELDS, render_table, run_simulation

ESTIMATE_FIELDS = (
    "alpha", "tail", "weight_mode", "n",
    "beta1", "gamma1", "se_beta1", "se_gamma1",
    "ci_beta1_lower", "ci_beta1_upper", "ci_gamma1_lower", "ci_gamma1_upper",
    "complier_share", "sigma1", "sigma2",
    "truncated_count", "pi_clamped_count", "fallback_count",
    "B", "boot_failed", "unreliable",
)

ERROR_KIND = {2: "config", 3: "data", 4: "numerical"}

# extra help for flags whose key name alone is not self-explanatory
_FLAG_HELP = {
    "input": "input CSV (estimate)",
    "continuous": "comma-separated continuous covariate columns",
    "discrete": "comma-separated discrete covariate columns",
    "alphas": "comma-separated tail levels",
    "grid": "comma-separated bandwidth grid",
    "sigma1": "fixed instrument-propensity bandwidth, or 'auto' for cross-validation",
    "sigma2": "fixed compliance-score bandwidth, or 'auto' for cross-validation",
    "estimators": "comma-separated subset of oracle,proposed,naive (simulate)",
    "B": "bootstrap replicates (0 skips the bootstrap in estimate)",
    "R": "Monte-Carlo replications (simulate)",
    "output": "report path; stdout when empty",
    "table": "path for the rendered metrics table (simulate)",
    "threads": "worker processes for bootstrap/replications, -1 for all cores",
}


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if math.isnan(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def provenance_lines(config: RunConfig) -> list[str]:
    return [f"# creste {__version__}"] + [EMBED_PREFIX + line for line in config.to_lines()]


def _csv_text(field_names, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(field_names)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in field_names])
    return buf.getvalue()


def _json_text(config: RunConfig, key: str, rows) -> str:
    doc = {"software": "creste", "version": __version__, "config": config.to_dict(), key: rows}
    return json.dumps(_json_safe(doc), indent=2, sort_keys=False) + "\n"


def _write(path: str, text: str, stdout) -> None:
    if not path:
        stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from None


def estimate_rows(config: RunConfig) -> list[dict]:
    """Fit (and bootstrap) the input file; one dict per level."""
    if not config.input:
        raise ConfigError("estimate needs an input file (key 'input')")
    frame = load_csv(config.input, config.schema())
    est_cfg = config.estimator_config()
    ests = two_stage_fit(frame, est_cfg)
    boots = [None] * len(ests)
    if config.B:
        boots = bootstrap_variance(
            frame, est_cfg, config.B, config.seed, None, ests, config.level, config.ci_method,
            config.reselect_bandwidths, config.threads,
        )
    try:
        p_c = complier_proportion(frame)
    except NumericalError:
        p_c = math.nan
    rows = []
    for e, b in zip(ests, boots):
        meta = e.weights_meta
        row = {
            "alpha": e.alpha, "tail": e.tail, "weight_mode": e.weight_mode, "n": frame.n,
            "beta1": e.beta1, "gamma1": e.gamma1,
            "complier_share": p_c, "sigma1": meta["sigma1"], "sigma2": meta["sigma2"],
            "truncated_count": meta["truncated_count"], "pi_clamped_count": meta["pi_clamped_count"],
            "fallback_count": meta["fallback_count"], "B": config.B,
        }
        if b is None:
            row.update(se_beta1=math.nan, se_gamma1=math.nan, ci_beta1_lower=math.nan, ci_beta1_upper=math.nan,
                       ci_gamma1_lower=math.nan, ci_gamma1_upper=math.nan, boot_failed=0, unreliable=False)
        else:
            ib, ig = b.coordinate("beta"), b.coordinate("gamma")
            ci = b.ci
            row.update(
                se_beta1=float(b.se[ib]), se_gamma1=float(b.se[ig]),
                ci_beta1_lower=float(ci[ib, 0]), ci_beta1_upper=float(ci[ib, 1]),
                ci_gamma1_lower=float(ci[ig, 0]), ci_gamma1_upper=float(ci[ig, 1]),
                boot_failed=b.failed, unreliable=b.unreliable,
            )
        names = frame.design_names
        row["coefficients"] = {
            "names": list(names),
            "beta": [float(x) for x in e.beta_full],
            "gamma": [float(x) for x in e.gamma_full],
        }
        if b is not None:
            p = len(names)
            row["coefficients"]["se_beta"] = [float(x) for x in b.se[:p]]
            row["coefficients"]["se_gamma"] = [float(x) for x in b.se[p:]]
        rows.append(row)
    return rows


def run_estimate(config: RunConfig, stdout=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    rows = estimate_rows(config)
    if config.format == "json":
        text = _json_text(config, "estimates", rows)
    else:
        text = "\n".join(provenance_lines(config)) + "\n" + _csv_text(ESTIMATE_FIELDS, rows)
    _write(config.output, text, stdout)
    for r in rows:
        if r["unreliable"]:
            print(f"warning: alpha={r['alpha']}: {r['boot_failed']} of {config.B} bootstrap replicates failed",
                  file=sys.stderr)
    return 0


def run_simulate(config: RunConfig, stdout=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    result = run_simulation(
        config.dgp(), config.alphas, config.estimators, config.R, config.B, config.seed,
        base_config=config.estimator_config(), level=config.level, n_jobs=config.threads,
    )
    rows = [{k: getattr(r, k) for k in METRIC_FIELDS} for r in result.rows]
    if config.format == "json":
        text = _json_text(config, "metrics", rows)
    else:
        text = "\n".join(provenance_lines(config)) + "\n" + _csv_text(METRIC_FIELDS, rows)
    _write(config.output, text, stdout)
    table = render_table(result.rows) + "\n"
    if config.table:
        _write(config.table, table, stdout)
    elif config.output:
        stdout.write(table)
    for msg in result.failures:
        print(f"warning: {msg}", file=sys.stderr)
    return 0


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="plain-text key = value config file, or a previous report")
    for key in KEYS:
        if key == "mode":
            continue
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        p.add_argument(*flags, dest=key, default=None, metavar="VALUE", help=_FLAG_HELP.get(key))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="creste", description="Complier expected-shortfall treatment effects.")
    parser.add_argument("--version", action="version", version=f"creste {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_flags(sub.add_parser("estimate", help="fit the estimator on a CSV file"))
    _add_flags(sub.add_parser("simulate", help="run the Monte-Carlo study"))
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: parse_value(k, getattr(args, k)) for k in KEYS if k != "mode" and getattr(args, k) is not None}
    return build_config(args.command, file_values, overrides)


def _diagnostic(exc: CresteError) -> str:
    kind = ERROR_KIND.get(exc.exit_code, "error")
    msg = " ".join(str(exc).split())
    return f"error[{kind}]: {msg}"


def main(argv=None, stdout=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are config errors
        return 2 if exc.code else 0
    try:
        config = config_from_args(args)
        if config.mode == "estimate":
            return run_estimate(config, stdout)
        return run_simulate(config, stdout)
    except CresteError as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error[numerical]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 4


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
