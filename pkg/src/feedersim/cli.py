"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 input/validation error,
3 simulation failure.  Errors go to stderr with a machine-parsable prefix
``feedersim: error: [category] message``.  The default output directory is
``./feedersim-out`` unless FEEDERSIM_OUT is set.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from feedersim import engine, netmodel, powerflow, results
from feedersim.errors import FeederSimError, PowerFlowError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_SIMULATION = 3

OUTPUT_ENV_VAR = "FEEDERSIM_OUT"


class _UsageExit(Exception):
    def __init__(self, message):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageExit(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="feedersim",
                     description="Distribution-feeder co-simulation of "
                                 "regulation-providing air conditioners")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="scenario config file")
        p.add_argument("--out", help="output directory "
                       f"(default ${OUTPUT_ENV_VAR} or ./feedersim-out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="worker thread cap (default: available cores)")

    add_common(sub.add_parser("run", help="run one base or regulation case"))
    add_common(sub.add_parser("study-ev", help="EV charge/discharge study"))
    p = sub.add_parser("study-random", help="randomized aging study")
    add_common(p)
    p.add_argument("--trials", type=int, default=6)

    p = sub.add_parser("find-peak", help="scan for the peak-load hour")
    p.add_argument("--feeder", required=True)
    p.add_argument("--weather", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("populate", help="attach synthetic houses to a feeder")
    p.add_argument("--feeder", required=True, help="feeder skeleton file")
    p.add_argument("--target-peak", type=float, required=True,
                   help="peak-hour band target in kVA")
    p.add_argument("--populator-config", help="parameter-range config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-file", required=True, help="populated feeder path")

    p = sub.add_parser("sensitivity",
                       help="voltage sensitivity of a line over a base case")
    p.add_argument("--config", required=True)
    p.add_argument("--line", required=True, help="line id to evaluate")
    p.add_argument("--pf", type=float, default=0.97,
                   help="regulation power factor")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-file", help="write CSV instead of stdout")

    p = sub.add_parser("validate", help="validate a feeder file")
    p.add_argument("feeder")
    return parser


def _out_dir(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV_VAR, "feedersim-out"))


def _load_config(args) -> engine.ScenarioConfig:
    config = engine.ScenarioConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _cmd_run(args) -> int:
    config = _load_config(args)
    trial = engine.run_case(config)
    artifacts = results.emit(trial, _out_dir(args))
    for case, stats in artifacts.manifest["cases"].items():
        print(f"{case}: energy {stats['energy_kwh']:.2f} kWh, "
              f"{stats['violations']} violations, "
              f"voltage std {stats['voltage_mean_std_pu']:.5f} pu")
    print(f"artifacts written to {artifacts.out_dir}")
    return EXIT_OK


def _cmd_study_ev(args) -> int:
    config = _load_config(args)
    study = engine.run_ev_study(config, threads=args.threads)
    artifacts = results.emit_ev_study(study, _out_dir(args))
    for name in ("ev_plus", "no_ev", "ev_minus"):
        row = study.overlimit_pct[name]
        print(f"{name}: over-limit any {row.get('base_any', 0):.2f}% base / "
              f"{row.get('regulation_any', 0):.2f}% regulation, "
              f"sensitivity {study.sensitivity[name]:.3e}")
    print(f"artifacts written to {artifacts.out_dir}")
    return EXIT_OK


def _cmd_study_random(args) -> int:
    config = _load_config(args)
    summary = engine.run_randomization_study(config, n_trials=args.trials,
                                             threads=args.threads)
    artifacts = results.emit_randomization(summary, _out_dir(args))
    print(f"p_hat {summary.p_hat:.3f}, duty-cycle correlation "
          f"{summary.correlation:+.3f}, chi-square {summary.chi_square:.2f} "
          f"(95% critical {summary.chi_square_critical:.2f})")
    print(f"artifacts written to {artifacts.out_dir}")
    return EXIT_OK


def _cmd_find_peak(args) -> int:
    feeder = netmodel.load_feeder(args.feeder)
    weather = engine.WeatherSeries.from_csv(args.weather)
    start = engine.find_peak_hour(feeder, weather, seed=args.seed)
    print(f"peak hour starts at {start:.0f} s "
          f"({start / 3600.0:.2f} h into the weather series)")
    return EXIT_OK


def _cmd_populate(args) -> int:
    feeder = netmodel.load_feeder(args.feeder)
    cfg = netmodel.PopulatorConfig.from_file(args.populator_config) \
        if args.populator_config else None
    populated = netmodel.populate_houses(feeder, args.target_peak,
                                         seed=args.seed, config=cfg)
    netmodel.save_feeder(populated, args.out_file)
    print(f"{len(populated.houses)} houses written to {args.out_file}")
    return EXIT_OK


def _cmd_sensitivity(args) -> int:
    config = _load_config(args)
    config = replace(config, case="base", monitored_line=args.line)
    trial = engine.run_case(config)
    mon = trial.base.monitored_line
    rows = [("time_s", "v_sending_pu", "reactive_term", "real_term",
             "source_term", "total")]
    for k, t in enumerate(trial.base.times_s):
        if mon["v_sending"][k] == 0.0:
            continue
        terms = powerflow.voltage_sensitivity(
            powerflow.DistFlowLine(
                v_sending=mon["v_sending"][k], r_pu=mon["r_pu"],
                x_pu=mon["x_pu"], p_pu=mon["p_pu"][k], q_pu=mon["q_pu"][k]),
            power_factor=args.pf)
        rows.append((f"{t:.0f}", f"{mon['v_sending'][k]:.9g}",
                     f"{terms.via_reactive:.9g}", f"{terms.via_real:.9g}",
                     f"{terms.via_source:.9g}", f"{terms.total:.9g}"))
    text = "\n".join(",".join(r) for r in rows) + "\n"
    if args.out_file:
        Path(args.out_file).write_text(text)
        print(f"sensitivity series written to {args.out_file}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_validate(args) -> int:
    feeder = netmodel.load_feeder(args.feeder)
    print(f"{feeder.name}: {len(feeder.buses)} buses, {len(feeder.lines)} lines, "
          f"{len(feeder.transformers)} transformers, {len(feeder.houses)} houses "
          "- ok")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "study-ev": _cmd_study_ev,
    "study-random": _cmd_study_random,
    "find-peak": _cmd_find_peak,
    "populate": _cmd_populate,
    "sensitivity": _cmd_sensitivity,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(f"feedersim: error: [usage] {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except PowerFlowError as exc:
        print(f"feedersim: error: [simulation] {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (FeederSimError, ValueError, OSError) as exc:
        print(f"feedersim: error: [input] {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
