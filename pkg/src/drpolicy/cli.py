"""Command-line entry point: ``drpolicy <subcommand> [flags]``.

Exit codes: 0 success, 1 partial replication failure or I/O error,
2 usage / configuration error. Worker processes: ``DRPOLICY_WORKERS``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

from . import bench
from .bench import (APPLICATIONS, ESTIMATORS, EVAL_POLICIES, FORMS, REGIMES, BenchSettings,
                    DgpConfig, ExperimentResult)
from .core import InvalidInputError
from .policy_opt import LEARNERS, MuRule, SplitConfig

SUBCOMMANDS = ("evaluate", "optimize", "bench-pricing", "bench-quadratic", "bench-resource", "dump-data")
HEADER = ("form", "regime", "policy", "estimator", "n", "sims", "mean", "std", "true_value",
          "mean_regret", "std_regret")
RAW_HEADER = ("sim", "form", "regime", "policy", "estimator", "n", "value", "true_value", "regret")
SPACES = ("constant", "linear", "multitask")
DEFAULT_N = (1000, 2000, 5000, 10000)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    application: Optional[str] = None
    forms: tuple = FORMS
    regime: str = "low"
    n: tuple = DEFAULT_N
    sims: int = 100
    seed: int = 42
    estimators: tuple = ESTIMATORS
    policies: tuple = EVAL_POLICIES
    space: Optional[tuple] = None
    mu_c: float = 2.0
    delta: float = 0.1
    splits: tuple = (0.5, 0.25, 0.25)
    out: Optional[str] = None
    format: str = "csv"
    emit_raw: bool = False
    plot_data: Optional[str] = None

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.application is not None and self.application not in APPLICATIONS:
            raise ConfigError(f"unknown application {self.application!r}")
        _check_choices("form", self.forms, FORMS)
        _check_choices("regime", (self.regime,), tuple(REGIMES))
        _check_choices("estimator", self.estimators, ESTIMATORS)
        _check_choices("policy", self.policies, EVAL_POLICIES)
        if self.space is not None:
            _check_choices("space", self.space, SPACES)
        if self.format not in ("csv", "json"):
            raise ConfigError(f"unknown format {self.format!r}")
        if self.sims < 1:
            raise ConfigError("--sims must be at least 1")
        if not self.n or any(v < 1 for v in self.n):
            raise ConfigError("--n values must be positive")
        try:
            MuRule(self.mu_c, self.delta)
            SplitConfig(self.splits)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def app(self) -> str:
        if self.subcommand == "bench-quadratic":
            return "pricing-quadratic-revenue"
        if self.subcommand == "bench-resource":
            return "resource-allocation"
        if self.subcommand == "bench-pricing":
            return "pricing-linear-demand"
        return self.application or "pricing-linear-demand"

    @property
    def spaces(self) -> tuple:
        if self.space is not None:
            return self.space
        return ("multitask",) if self.app == "resource-allocation" else ("constant", "linear")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["drpolicy"] = {k: _ini_value(v) for k, v in asdict(self).items() if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        values = _coerce_section(cp["drpolicy"] if cp.has_section("drpolicy") else {})
        return cls(**values)


def _check_choices(name, values, allowed):
    for v in values:
        if v not in allowed:
            raise ConfigError(f"invalid {name} {v!r}; choose from {', '.join(allowed)}")


def _ini_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _str_list(text: str) -> tuple:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in _str_list(text))
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(x) for x in _str_list(text))
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


_CONVERTERS = {
    "subcommand": str, "application": str, "forms": _str_list, "form": _str_list, "regime": str,
    "n": _int_list, "sims": int, "seed": int, "estimators": _str_list, "policies": _str_list,
    "space": _str_list, "mu_c": float, "delta": float, "splits": _float_list, "out": str,
    "format": str, "emit_raw": _bool, "plot_data": str,
}


def _coerce_section(section) -> dict:
    out = {}
    for key, raw in dict(section).items():
        k = key.replace("-", "_")
        if k not in _CONVERTERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out["forms" if k == "form" else k] = _CONVERTERS[k](raw)
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drpolicy",
                                description="Doubly robust policy evaluation and learning benchmarks.")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    helps = {
        "evaluate": "off-policy evaluation study (value estimates per policy and estimator)",
        "optimize": "policy learning study (regret per learner and policy space)",
        "bench-pricing": "evaluation and regret on the linear-demand pricing DGP",
        "bench-quadratic": "evaluation and regret on the quadratic-revenue pricing DGP",
        "bench-resource": "multi-task lasso policy learning for resource allocation",
        "dump-data": "write one synthetic dataset as CSV",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=helps[name], argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="INI file with a [drpolicy] section of key=value pairs")
        sp.add_argument("--application", choices=APPLICATIONS)
        sp.add_argument("--form", dest="forms", type=_str_list,
                        help=f"comma list from {{{','.join(FORMS)}}} (default: all)")
        sp.add_argument("--regime", choices=tuple(REGIMES))
        sp.add_argument("--n", type=_int_list, help="comma list of sample sizes")
        sp.add_argument("--sims", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--estimators", type=_str_list, help="comma list; also the learners")
        sp.add_argument("--policies", type=_str_list, help="evaluation policies")
        sp.add_argument("--space", type=_str_list, help="policy spaces for learning")
        sp.add_argument("--mu-c", dest="mu_c", type=float)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--splits", type=_float_list, help="S1,S2v,S2t fractions")
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--format", choices=("csv", "json"))
        sp.add_argument("--emit-raw", dest="emit_raw", action="store_true",
                        help="also write per-replication records to <out>.raw.<format>")
        sp.add_argument("--plot-data", dest="plot_data",
                        help="write rows grouped per (form, policy) panel as JSON")
    return p


def parse_config(argv: Sequence[str]) -> RunConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    ns = build_parser().parse_args(list(argv))
    if ns.subcommand is None:
        raise ConfigError("missing subcommand")
    flags = vars(ns)
    values = {}
    path = flags.pop("config", None)
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if cp.has_section("drpolicy"):
            values.update(_coerce_section(cp["drpolicy"]))
        values.pop("subcommand", None)
    values.update(flags)
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def result_rows(result: ExperimentResult) -> list:
    rows = []
    for (form, regime, policy, est, n), c in result.cells.items():
        rows.append({"form": form, "regime": regime, "policy": policy, "estimator": est, "n": n,
                     "sims": c.sims, "mean": c.mean, "std": c.std, "true_value": c.true_value,
                     "mean_regret": c.mean_regret, "std_regret": c.std_regret})
    rows.sort(key=lambda r: (r["form"], r["policy"], r["estimator"], r["n"], r["regime"]))
    return rows


def raw_rows(result: ExperimentResult) -> list:
    recs = sorted(result.records, key=lambda r: (r.form, r.policy, r.estimator, r.n, r.regime, r.sim))
    return [{k: getattr(r, k) for k in RAW_HEADER} for r in recs]


def _render(rows: list, header: Sequence[str], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def plot_panels(rows: list) -> dict:
    """Rows grouped per figure panel: one panel per (form, policy)."""
    panels = []
    keys = sorted({(r["form"], r["policy"]) for r in rows},
                  key=lambda k: (FORMS.index(k[0]) if k[0] in FORMS else len(FORMS), k[1]))
    for form, policy in keys:
        panels.append({"form": form, "policy": policy,
                       "rows": [r for r in rows if r["form"] == form and r["policy"] == policy]})
    return {"panels": panels}


def _write(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def emit_results(result: ExperimentResult, path: Optional[str], fmt: str = "csv",
                 emit_raw: bool = False, plot_data: Optional[str] = None) -> None:
    rows = result_rows(result)
    if not rows:
        raise InvalidInputError("nothing to write: every cell was dropped")
    _write(path, _render(rows, HEADER, fmt))
    if emit_raw:
        raw_path = None if path is None else f"{path}.raw.{fmt}"
        _write(raw_path, _render(raw_rows(result), RAW_HEADER, fmt))
    if plot_data is not None:
        _write(plot_data, json.dumps(plot_panels(rows), indent=1) + "\n")


# ---------------------------------------------------------------------------
# execution


def _settings(cfg: RunConfig) -> BenchSettings:
    return BenchSettings(split=cfg.splits, mu=MuRule(cfg.mu_c, cfg.delta))


def execute(cfg: RunConfig) -> ExperimentResult:
    settings = _settings(cfg)
    app = cfg.app
    result = ExperimentResult()
    evaluate = cfg.subcommand in ("evaluate", "bench-pricing", "bench-quadratic")
    learn = cfg.subcommand in ("optimize", "bench-pricing", "bench-quadratic", "bench-resource")
    if learn:
        bad = [e for e in cfg.estimators if e not in LEARNERS]
        if bad:
            raise ConfigError(f"unknown learner(s) {bad}")
    for form in cfg.forms:
        for n in cfg.n:
            dgp = DgpConfig(app, form, cfg.regime, n)
            if evaluate:
                pols = {k: v for k, v in bench.evaluation_policies(dgp).items() if k in cfg.policies}
                result = result.merge(bench.run_evaluation_experiment(
                    dgp, pols, cfg.estimators, cfg.sims, cfg.seed, settings))
            if learn:
                result = result.merge(bench.run_regret_experiment(
                    dgp, cfg.spaces, cfg.estimators, cfg.sims, cfg.seed, settings))
    return result


def run(cfg: RunConfig) -> int:
    try:
        if cfg.subcommand == "dump-data":
            syn = bench.generate(DgpConfig(cfg.app, cfg.forms[0], cfg.regime, cfg.n[0], cfg.seed))
            if cfg.out is None:
                raise ConfigError("dump-data needs --out")
            bench.dump_csv(syn.data, cfg.out)
            return 0
        result = execute(cfg)
        if result.cells:
            emit_results(result, cfg.out, cfg.format, cfg.emit_raw, cfg.plot_data)
    except (ConfigError, InvalidInputError) as exc:
        print(f"drpolicy: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"drpolicy: I/O error: {exc}", file=sys.stderr)
        return 1
    for n, sim, msg in result.failures:
        print(f"drpolicy: replication {sim} (n={n}) failed: {msg.splitlines()[0]}", file=sys.stderr)
    if result.dropped:
        print(f"drpolicy: dropped {len(result.dropped)} cell(s) with >10% failed replications",
              file=sys.stderr)
    if not result.cells:
        print("drpolicy: no cells left to write", file=sys.stderr)
        return 1
    return 1 if result.partial_failure else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"drpolicy: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
