"""Command-line front end.

Verbs::

    fluxsync run SCENARIO [--dt S] [--t-end S] [--controller nfscm|avscm] [--out DIR] [--plot]
    fluxsync compare DIR_A DIR_B [--out FILE]
    fluxsync acceptance [--only N ...] [--jobs N] [--out FILE]
    fluxsync validate SCENARIO [SCENARIO ...]

Exit codes: 0 success, 1 failed criterion or failed run, 2 configuration
or usage error (invalid scenario, missing or unwritable paths).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .artifacts import ArtifactError, atomic_write, compare_channels, read_csv, render_json, write_run
from .scenario import ConfigError, apply_overrides, config_hash, load_config

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("fluxsync")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return x


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fluxsync", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more logging (-vv lists every default applied)")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one scenario and write artifacts")
    r.add_argument("scenario", help="scenario file or bundled scenario name")
    r.add_argument("--dt", type=_positive, help="time step (s)")
    r.add_argument("--t-end", type=_positive, help="simulated time (s)")
    r.add_argument("--controller", choices=("nfscm", "avscm"),
                   help="controller for every generator")
    r.add_argument("--out", default="out", help="artifact directory (default: out)")
    r.add_argument("--plot", action="store_true", help="also write PNG figures from the CSV")

    c = sub.add_parser("compare", help="per-channel differences between two run directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out", help="also write the comparison as JSON to this file")

    a = sub.add_parser("acceptance", help="run the acceptance criteria")
    a.add_argument("--only", type=int, nargs="+", metavar="N", help="criterion numbers")
    a.add_argument("--jobs", type=int, default=1, help="worker processes for scenario runs")
    a.add_argument("--out", help="also write the report as JSON to this file")

    v = sub.add_parser("validate", help="check scenario files and list every problem")
    v.add_argument("scenarios", nargs="+")
    return p


# ------------------------------------------------------------------- verbs
def cmd_run(args) -> int:
    from .runner import run_config

    try:
        cfg = apply_overrides(load_config(args.scenario), dt=args.dt, t_end=args.t_end,
                              controller=args.controller)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        print(f"cannot write to {out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG
    h = config_hash(cfg)
    log.info("running %s (config %s)", cfg.get("name", args.scenario), h[:12])
    _, art = run_config(cfg)
    try:
        paths = write_run(out, art, cfg, h, plots=args.plot)
    except OSError as exc:
        print(f"writing artifacts failed: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL
    for path in paths:
        print(path)
    if not art.completed:
        print(f"run failed: {art.error}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        a, ua, _ = read_csv(Path(args.run_a) / "timeseries.csv")
        b, ub, _ = read_csv(Path(args.run_b) / "timeseries.csv")
    except ArtifactError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    res = compare_channels(a, b)
    if not res["same_time_grid"]:
        print(f"time grids differ, compared {res['samples']} interpolated samples")
    width = max((len(n) for n in res["channels"]), default=8)
    print(f"{'channel':<{width}}  {'unit':>5}  {'max_abs':>12}  {'rms':>12}  {'max_rel':>10}")
    for name, d in res["channels"].items():
        print(f"{name:<{width}}  {ua.get(name, ''):>5}  {d['max_abs']:12.5g}  "
              f"{d['rms']:12.5g}  {d['max_rel']:10.3g}")
    for side, names in (("a", res["only_in_a"]), ("b", res["only_in_b"])):
        if names:
            print(f"only in run {side}: {', '.join(names)}")
    if args.out:
        try:
            atomic_write(Path(args.out), render_json(res))
        except OSError as exc:
            print(f"cannot write {args.out}: {exc.strerror or exc}", file=sys.stderr)
            return EXIT_CONFIG
    return EXIT_OK


def cmd_acceptance(args) -> int:
    from .acceptance import run_acceptance

    try:
        results = run_acceptance(args.only, jobs=max(1, args.jobs))
    except (ValueError, ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    if args.out:
        report = [{"number": r.number, "name": r.name, "passed": r.passed,
                   "measured": r.measured, "threshold": r.threshold, "seconds": r.seconds,
                   "detail": r.detail} for r in results]
        try:
            atomic_write(Path(args.out), render_json(report))
        except OSError as exc:
            print(f"cannot write {args.out}: {exc.strerror or exc}", file=sys.stderr)
            return EXIT_CONFIG
    return EXIT_FAIL if failed else EXIT_OK


def cmd_validate(args) -> int:
    code = EXIT_OK
    for path in args.scenarios:
        try:
            cfg = load_config(path)
        except ConfigError as exc:
            code = EXIT_CONFIG
            print(f"{path}: {len(exc.errors)} problem(s)")
            for e in exc.errors:
                print(f"  {e}")
            continue
        print(f"{path}: ok ({len(cfg['wpgs'])} generators, {len(cfg['events'])} events, "
              f"config {config_hash(cfg)[:12]})")
    return code


VERBS = {"run": cmd_run, "compare": cmd_compare, "acceptance": cmd_acceptance,
         "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return VERBS[args.verb](args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
