import argparse
import logging
import sys

from collections.abc import Callable
from fractions import Fraction
from pathlib import Path
from . import __version__
from .errors import (
    CertificateError,
    IntegrationError,
    PreconditionError,
    ReferenceUnreliableError,
    SingularMatrixError,
    UsageError,
)
from .harness import (
    EXIT_ASSERTION,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    classify,
    converge_study,
    list_entries,
    run,
    volume_study,
)
from .problems import get_problem
from .settings import (
    SETTING_ASSERT,
    SETTING_H,
    SETTING_JOBS,
    SETTING_METHOD,
    SETTING_OUT_DIR,
    SETTING_PROBLEM,
    SETTING_SEED,
    SETTING_SNAPSHOT,
    SETTING_T_END,
    SETTING_TABLEAU,
    RunConfig,
    default_out_dir,
    parse_bool,
    parse_fraction,
    read_config_file,
)

logger = logging.getLogger(__name__)

# argparse destination of every config file key
DESTINATIONS = {
    SETTING_PROBLEM: "problem",
    SETTING_METHOD: "method",
    SETTING_H: "h",
    SETTING_T_END: "t_end",
    SETTING_OUT_DIR: "out_dir",
    SETTING_SEED: "seed",
    SETTING_TABLEAU: "tableau",
    SETTING_ASSERT: "assertions",
    SETTING_JOBS: "jobs",
    SETTING_SNAPSHOT: "snapshot",
}


def _split(values: list[str] | str | None) -> list[str]:
    if values is None:
        return []
    if isinstance(values, str):
        values = [values]
    return [item.strip() for value in values for item in value.split(",") if item.strip()]


class VpeiApplication:
    """The command-line application."""

    def __init__(self, version):
        self.version = version
        self.parser = argparse.ArgumentParser(
            prog="vpei",
            description="Volume-preserving exponential integrators: runs and studies.",
        )
        self.parser.add_argument("--version", action="version", version=f"vpei {version}")
        self.parser.add_argument(
            "-v", "--verbose", action="store_true", help="log progress at debug level"
        )
        self.subparsers = self.parser.add_subparsers(dest="command", required=True)

        parser = self.create_action("run", self.on_run_action, "integrate one configuration")
        self.add_common_arguments(parser)
        parser.add_argument("--method", help="method name, or custom with --tableau")
        parser.add_argument("--h", help="step size, e.g. 1/50")
        parser.add_argument("--snapshot", help="spacing of the flow snapshots")

        for name, callback, help in (
            ("converge", self.on_converge_action, "relative global error against h"),
            ("volume", self.on_volume_action, "det Φ along runs of several methods"),
        ):
            parser = self.create_action(name, callback, help)
            self.add_common_arguments(parser)
            parser.add_argument("--method", action="append", help="method names, repeatable")
            parser.add_argument("--h", action="append", help="step sizes, repeatable")
            parser.add_argument("--jobs", type=int, help="worker processes")

        parser = self.create_action("classify", self.on_classify_action, "check a class certificate")
        parser.add_argument("--problem", help="benchmark name")
        parser.add_argument("--cert", help="certificate file or bundled certificate name")
        parser.add_argument("--samples", type=int, default=64, help="number of sample points")
        parser.add_argument("--seed", type=int, help="sampling seed")
        parser.add_argument("--config", type=Path, help="key=value settings file")

        self.create_action("list", self.on_list_action, "list problems, methods and certificates")

    def add_common_arguments(self, parser: argparse.ArgumentParser):
        parser.add_argument("--problem", help="benchmark name")
        parser.add_argument("--t-end", dest="t_end", help="end time")
        parser.add_argument("--out-dir", dest="out_dir", type=Path, help="output directory")
        parser.add_argument("--seed", type=int, help="seed for sampled checks")
        parser.add_argument("--tableau", type=Path, help="Butcher tableau file")
        parser.add_argument(
            "--assert",
            dest="assertions",
            action=argparse.BooleanOptionalAction,
            help="fail when an asserted volume check fails",
        )
        parser.add_argument("--config", type=Path, help="key=value settings file")

    def create_action(self, name: str, callback: Callable[[argparse.Namespace], int], help=None):
        """Add a subcommand.

        Args:
            name: the name of the subcommand
            callback: the function to be called with the parsed arguments
            help: an optional one-line description
        """
        parser = self.subparsers.add_parser(name, help=help, description=help)
        parser.set_defaults(callback=callback)
        return parser

    def merge_config(self, args: argparse.Namespace):
        """Fill arguments not given on the command line from ``--config``."""
        if getattr(args, "config", None) is None:
            return
        for key, value in read_config_file(args.config).items():
            dest = DESTINATIONS[key]
            if not hasattr(args, dest) or getattr(args, dest) is not None:
                continue
            match dest:
                case "assertions":
                    setattr(args, dest, parse_bool(value))
                case "seed" | "jobs":
                    try:
                        setattr(args, dest, int(value))
                    except ValueError:
                        raise UsageError(f"Invalid {key} {value!r}") from None
                case "out_dir" | "tableau":
                    setattr(args, dest, Path(value))
                case _:
                    setattr(args, dest, value)

    def require_problem(self, args: argparse.Namespace) -> str:
        if not args.problem:
            raise UsageError("--problem is required")
        return args.problem

    def on_run_action(self, args: argparse.Namespace) -> int:
        cfg = RunConfig(
            problem=self.require_problem(args),
            method=args.method or "SSEI1",
            h=args.h or Fraction(1, 50),
            t_end=args.t_end or Fraction(10),
            out_dir=args.out_dir or default_out_dir(),
            seed=args.seed or 0,
            tableau=args.tableau,
            assertions=True if args.assertions is None else args.assertions,
            snapshot=args.snapshot or Fraction(1, 2),
        )
        result = run(cfg)
        print(result.summary)
        return result.status

    def study_arguments(self, args: argparse.Namespace):
        h_list = [parse_fraction(h, "step size") for h in _split(args.h)] or None
        t_end = None if args.t_end is None else parse_fraction(args.t_end, "end time")
        return h_list, t_end, args.out_dir or default_out_dir(), args.jobs or 1

    def on_converge_action(self, args: argparse.Namespace) -> int:
        problem = self.require_problem(args)
        h_list, t_end, out_dir, jobs = self.study_arguments(args)
        names = _split(args.method) or ["SSEI1", "SSEI2"]
        result = converge_study(problem, names, h_list, t_end, out_dir, args.tableau, jobs=jobs)
        for name in names:
            errors = " ".join(f"{e:.3e}" for e in result.errors[name])
            slope = result.slopes[name]
            print(f"{name}: rge {errors} slope {'n/a' if slope is None else f'{slope:.3f}'}")
        print(f"wrote {result.path}")
        return EXIT_OK

    def on_volume_action(self, args: argparse.Namespace) -> int:
        problem = self.require_problem(args)
        h_list, t_end, out_dir, jobs = self.study_arguments(args)
        names = _split(args.method) or ["SSEI1", "SSEI2", "SSRK1", "SSRK2"]
        assertions = True if args.assertions is None else args.assertions
        result = volume_study(problem, names, h_list, t_end, out_dir, args.tableau, assertions, jobs)
        for row in result.rows:
            flag = "asserted" if assertions and row.citation else "report-only"
            print(
                f"{row.method} h={row.h}: max|det-target| {row.max_abs_det_minus_target:.3e} "
                f"drift {row.cumulative_log_drift:.3e} ({flag})"
            )
        print(f"wrote {result.path}")
        return result.status

    def on_classify_action(self, args: argparse.Namespace) -> int:
        problem = self.require_problem(args)
        report = classify(problem, args.cert, args.samples, args.seed or 0)
        for name, (worst, mean) in report.relations.items():
            print(f"{name}: max {worst:.3e} mean {mean:.3e}")
        verdict = "in" if report.passed else "not in"
        print(f"{get_problem(problem).name} is {verdict} class {report.tag} ({report.samples} samples)")
        return EXIT_OK if report.passed else EXIT_ASSERTION

    def on_list_action(self, args: argparse.Namespace) -> int:
        print("\n".join(list_entries()))
        return EXIT_OK

    def run(self, argv: list[str]) -> int:
        args = self.parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        try:
            self.merge_config(args)
            return args.callback(args)
        except (UsageError, CertificateError, PreconditionError) as error:
            logger.error("%s", error)
            return EXIT_USAGE
        except (IntegrationError, ReferenceUnreliableError, SingularMatrixError) as error:
            logger.error("%s", error)
            return EXIT_NUMERICAL


def main(version, argv: list[str] | None = None) -> int:
    """The application's entry point."""
    app = VpeiApplication(version=version)
    return app.run(sys.argv[1:] if argv is None else argv)


def entry_point():
    sys.exit(main(__version__))
