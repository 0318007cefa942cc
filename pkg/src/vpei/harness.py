"""Experiment drivers: single runs, error studies, volume studies and class checks.

Every driver writes comma-separated files whose comment header (lines
starting with ``#``) records the software environment and the settings.
Floats are written with 17 significant digits.
"""

from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Final
import asyncio
import csv
import logging
import math
import time

import numpy as np

from . import __version__
from .errors import IntegrationError, ReferenceUnreliableError, UsageError
from .helpers import get_debug_info, write_comments
from .integrators import SecondOrderEIStepper, SolverConfig, Stepper, Trajectory, integrate
from .problems import (
    PROBLEMS,
    BenchmarkSpec,
    get_problem,
    reference_solution,
    relative_global_error,
)
from .registry import KIND_ERKN, KIND_RKN, Method, build_stepper, methods, resolve_method
from .settings import RunConfig
from .vpcheck import (
    ClassCertificate,
    ClassReport,
    VolumeReport,
    load_certificate,
    parse_certificate,
    verify_class,
    volume_drift,
)

logger = logging.getLogger(__name__)

EXIT_OK: Final[int] = 0
EXIT_USAGE: Final[int] = 2
EXIT_NUMERICAL: Final[int] = 3
EXIT_ASSERTION: Final[int] = 4

VOLUME_TOL: Final[float] = 1e-9

CITATIONS: Final[dict[str, str]] = {
    "H": "SSEI methods preserve volume for fields in class H",
    "F_inf": "SSEI methods preserve volume for block-triangular fields in class F_inf",
    "S": "one-stage and equal-node two-stage SSEI methods preserve volume for fields in class S",
    "F_2": "one-stage and equal-node two-stage SSEI methods preserve volume for fields in class F_2",
    "second-order": (
        "one-stage and equal-node adapted second-order exponential integrators "
        "have det = exp(h trace K)"
    ),
    "nystrom": "one-stage and equal-node ERKN/RKN methods preserve volume on separable systems",
}


def _g(x: float) -> str:
    return f"{x:.17g}"


def volume_citation(spec: BenchmarkSpec, method: Method, stepper: Stepper) -> str | None:
    """The volume result that applies to ``method`` on ``spec``, if any."""
    t = method.tableau
    if not t.is_ssei:
        return None
    short = t.s == 1 or t.equal_nodes
    if method.kind in (KIND_ERKN, KIND_RKN):
        return CITATIONS["nystrom"] if short else None
    cert = spec.certificate
    if cert is not None and (cert.tag in ("H", "F_inf") or short):
        return CITATIONS[cert.tag]
    if isinstance(stepper, SecondOrderEIStepper) and short:
        return CITATIONS["second-order"]
    return None


def fit_slope(h: Sequence[float], errors: Sequence[float]) -> float | None:
    """Least-squares slope of log(error) against log(h) over finite errors."""
    points = [(x, e) for x, e in zip(h, errors) if math.isfinite(e) and e > 0]
    if len(points) < 2:
        return None
    x, e = np.log(np.array(points)).T
    return float(np.polyfit(x, e, 1)[0])


def map_jobs(fn: Callable[..., Any], cases: Iterable[tuple], jobs: int = 1) -> list[Any]:
    """Apply ``fn`` to every argument tuple, on a process pool when jobs > 1."""
    cases = list(cases)
    if jobs <= 1 or len(cases) <= 1:
        return [fn(*case) for case in cases]
    return asyncio.run(_gather(fn, cases, jobs))


async def _gather(fn: Callable[..., Any], cases: list[tuple], jobs: int) -> list[Any]:
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        tasks = [loop.run_in_executor(pool, fn, *case) for case in cases]
        return list(await asyncio.gather(*tasks))


@dataclass
class _Case:
    spec: BenchmarkSpec
    method: Method
    stepper: Stepper
    trajectory: Trajectory
    failed: bool


def _integrate_case(
    spec: BenchmarkSpec,
    method: Method,
    h: Fraction,
    t_end: Fraction,
) -> _Case:
    config = SolverConfig(h=float(h), method=method.name, tableau=method.tableau)
    stepper = build_stepper(method, spec, config)
    try:
        trajectory = integrate(stepper, spec.y0, float(t_end))
        failed = trajectory.diverged > 0
    except IntegrationError as error:
        trajectory, failed = error.partial, True
    return _Case(spec, method, stepper, trajectory, failed)


def _settings(**values: object) -> dict[str, object]:
    return {key: value for key, value in values.items() if value is not None}


def write_trajectory(path: Path, trajectory: Trajectory, header: str, stride: int = 1) -> None:
    with path.open("w", newline="") as stream:
        write_comments(stream, header)
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["t", *(f"y{i}" for i in range(trajectory.states.shape[1]))])
        for t, y in zip(trajectory.times[::stride], trajectory.states[::stride]):
            writer.writerow([_g(t), *map(_g, y)])


@dataclass
class RunResult:
    """Outcome of ``run``.

    Attributes:
      status: Process exit status.
      files: Files written.
      summary: One-line summary.
      rge: Relative global error, when the problem has an exact solution.
      volume: Per-step volume data.
      citation: The volume result asserted, if any.
    """

    status: int
    files: list[Path]
    summary: str
    rge: float | None = None
    nonconverged: int = 0
    diverged: int = 0
    iterations: list[int] = field(default_factory=list)
    max_abs_det_minus_target: float = math.nan
    citation: str | None = None
    wall_time: float = 0.0


def run(cfg: RunConfig) -> RunResult:
    """Integrate one configuration and write its trajectory and volume files.

    Writes ``<label>.trajectory.csv`` with every state, ``<label>.flow.csv``
    with the states at multiples of ``cfg.snapshot`` and
    ``<label>.volume.csv`` with the per-step determinants.
    The relative global error at t_end is measured against
    ``reference_solution``; it stays unset when the run failed or the
    reference refinements disagree.

    Raises:
      UsageError: If the problem, method or tableau does not resolve.
    """
    start = time.perf_counter()
    spec = get_problem(cfg.problem)
    method = resolve_method(cfg.method, cfg.tableau)
    case = _integrate_case(spec, method, cfg.h, cfg.t_end)
    trajectory = case.trajectory
    status = EXIT_NUMERICAL if case.failed else EXIT_OK

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    header = get_debug_info(
        __version__,
        _settings(
            problem=cfg.problem,
            method=method.name,
            tableau=method.tableau.name,
            h=cfg.h,
            t_end=cfg.t_end,
            seed=cfg.seed,
        ),
    )
    files = [cfg.out_dir / f"{cfg.label}.trajectory.csv"]
    write_trajectory(files[0], trajectory, header)
    stride = cfg.snapshot / cfg.h
    if stride.denominator == 1:
        files.append(cfg.out_dir / f"{cfg.label}.flow.csv")
        write_trajectory(files[-1], trajectory, header, int(stride))
    else:
        logger.warning("Snapshot spacing %s is not a multiple of h = %s", cfg.snapshot, cfg.h)

    volume = volume_drift(trajectory, case.stepper)
    citation = volume_citation(spec, method, case.stepper)
    notes = [f"asserted: {citation}" if citation and cfg.assertions else "report-only"]
    files.append(cfg.out_dir / f"{cfg.label}.volume.csv")
    with files[-1].open("w", newline="") as stream:
        volume.write_csv(stream, [*header.splitlines(), *notes])

    rge = None
    if not case.failed:
        try:
            y_ref = reference_solution(spec, float(cfg.t_end), float(cfg.h))
            rge = relative_global_error(trajectory.final, y_ref)
        except ReferenceUnreliableError as error:
            logger.warning("%s: no relative global error, %s", cfg.label, error)
    deviation = volume.max_abs_det_minus_target
    if status == EXIT_OK and cfg.assertions and citation and not deviation <= VOLUME_TOL:
        logger.error("%s: max |det − target| = %.3e exceeds %.0e", cfg.label, deviation, VOLUME_TOL)
        status = EXIT_ASSERTION

    wall_time = time.perf_counter() - start
    summary = (
        f"{cfg.label}: steps={len(trajectory.records)} "
        f"rge={'n/a' if rge is None else f'{rge:.6e}'} "
        f"nonconverged={trajectory.nonconverged} diverged={trajectory.diverged} "
        f"max|det-target|={deviation:.3e} wall={wall_time:.2f}s"
    )
    logger.info(summary)
    return RunResult(
        status=status,
        files=files,
        summary=summary,
        rge=rge,
        nonconverged=trajectory.nonconverged,
        diverged=trajectory.diverged,
        iterations=[record.iterations for record in trajectory.records],
        max_abs_det_minus_target=deviation,
        citation=citation if cfg.assertions else None,
        wall_time=wall_time,
    )


def _error_case(
    problem: str,
    method_name: str,
    h: Fraction,
    t_end: Fraction,
    y_ref: np.ndarray,
    tableau: Path | None,
) -> float:
    spec = get_problem(problem)
    case = _integrate_case(spec, resolve_method(method_name, tableau), h, t_end)
    if case.failed:
        return math.inf
    return relative_global_error(case.trajectory.final, y_ref)


@dataclass
class ConvergenceResult:
    """Relative global errors per method and step size with fitted slopes."""

    h: list[Fraction]
    errors: dict[str, list[float]]
    slopes: dict[str, float | None]
    path: Path | None = None


def converge_study(
    problem: str,
    method_names: Sequence[str],
    h_list: Sequence[Fraction] | None = None,
    t_end: Fraction | None = None,
    out_dir: Path | None = None,
    tableau: Path | None = None,
    quality: int = 32,
    rtol: float | None = 1e-10,
    jobs: int = 1,
) -> ConvergenceResult:
    """Measure the relative global error at ``t_end`` for every (method, h).

    The CSV has columns method, h, rge, slope; the slope is the
    least-squares log-log fit per method and stays empty for a single h.

    Raises:
      UsageError: If a name does not resolve.
      ReferenceUnreliableError: If the reference solution is not converged.
    """
    spec = get_problem(problem)
    for name in method_names:
        resolve_method(name, tableau)
    h_list = sorted(h_list or spec.error_steps, reverse=True)
    t_end = Fraction(spec.error_horizons[0]) if t_end is None else Fraction(t_end)
    y_ref = reference_solution(spec, float(t_end), float(min(h_list)), quality, rtol)
    cases = [(problem, name, h, t_end, y_ref, tableau) for name in method_names for h in h_list]
    values = iter(map_jobs(_error_case, cases, jobs))
    errors = {name: [next(values) for _ in h_list] for name in method_names}
    slopes = {name: fit_slope([float(h) for h in h_list], errors[name]) for name in method_names}
    result = ConvergenceResult(list(h_list), errors, slopes)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.path = out_dir / f"converge-{problem}-t{t_end}.csv"
        header = get_debug_info(
            __version__,
            _settings(problem=problem, methods=",".join(method_names), t_end=t_end, quality=quality),
        )
        with result.path.open("w", newline="") as stream:
            write_comments(stream, header)
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(["method", "h", "rge", "slope"])
            for name in method_names:
                slope = slopes[name]
                for h, rge in zip(h_list, errors[name]):
                    writer.writerow([name, _g(float(h)), _g(rge), "" if slope is None else _g(slope)])
    for name in method_names:
        logger.info("%s on %s: slope %s", name, problem, slopes[name])
    return result


@dataclass
class VolumeRow:
    method: str
    h: Fraction
    steps: int
    target: float
    max_abs_det_minus_target: float
    max_abs_vp_residual: float
    cumulative_log_drift: float
    nonconverged: int
    diverged: int
    citation: str | None
    max_abs_finite_deviation: float = 0.0
    failed: bool = False

    @property
    def passed(self) -> bool:
        return self.max_abs_finite_deviation <= VOLUME_TOL


def _volume_case(
    problem: str,
    method_name: str,
    h: Fraction,
    t_end: Fraction,
    out_dir: Path | None,
    tableau: Path | None,
) -> VolumeRow:
    spec = get_problem(problem)
    method = resolve_method(method_name, tableau)
    case = _integrate_case(spec, method, h, t_end)
    report: VolumeReport = volume_drift(case.trajectory, case.stepper)
    citation = volume_citation(spec, method, case.stepper)
    if out_dir is not None:
        header = get_debug_info(
            __version__, _settings(problem=problem, method=method_name, h=h, t_end=t_end)
        )
        label = str(h).replace("/", "_")
        path = out_dir / f"volume-{problem}-{method_name}-h{label}.csv"
        with path.open("w", newline="") as stream:
            report.write_csv(stream, header.splitlines())
    return VolumeRow(
        method=method_name,
        h=h,
        steps=len(case.trajectory.records),
        target=report.target,
        max_abs_det_minus_target=report.max_abs_det_minus_target,
        max_abs_vp_residual=report.max_abs_vp_residual,
        cumulative_log_drift=report.cumulative_log_drift,
        nonconverged=case.trajectory.nonconverged,
        diverged=case.trajectory.diverged,
        citation=citation,
        max_abs_finite_deviation=report.max_abs_finite_deviation,
        failed=case.failed,
    )


@dataclass
class VolumeStudyResult:
    rows: list[VolumeRow]
    assertions: bool = True
    path: Path | None = None

    @property
    def asserted(self) -> list[VolumeRow]:
        return [row for row in self.rows if self.assertions and row.citation]

    @property
    def status(self) -> int:
        if any(row.failed for row in self.rows):
            return EXIT_NUMERICAL
        return EXIT_OK if all(row.passed for row in self.asserted) else EXIT_ASSERTION


def volume_study(
    problem: str,
    method_names: Sequence[str],
    h_list: Sequence[Fraction] | None = None,
    t_end: Fraction | None = None,
    out_dir: Path | None = None,
    tableau: Path | None = None,
    assertions: bool = True,
    jobs: int = 1,
) -> VolumeStudyResult:
    """Track det Φ along runs of every (method, h) and summarize.

    Rows backed by a volume result are asserted against
    |det − e^{h·trace K}| ≤ 1e−9; the others are report-only. The summary
    header names the result behind every asserted row.

    Raises:
      UsageError: If a name does not resolve.
    """
    spec = get_problem(problem)
    for name in method_names:
        resolve_method(name, tableau)
    h_list = sorted(h_list or spec.step_sizes, reverse=True)
    t_end = Fraction(spec.horizon) if t_end is None else Fraction(t_end)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    cases = [(problem, name, h, t_end, out_dir, tableau) for name in method_names for h in h_list]
    result = VolumeStudyResult(map_jobs(_volume_case, cases, jobs), assertions)
    for row in result.rows:
        if row.citation is None:
            logger.warning("%s h=%s on %s is report-only", row.method, row.h, problem)

    if out_dir is not None:
        result.path = out_dir / f"volume-{problem}-summary.csv"
        header = get_debug_info(
            __version__, _settings(problem=problem, methods=",".join(method_names), t_end=t_end)
        )
        citations = sorted({row.citation for row in result.asserted if row.citation})
        with result.path.open("w", newline="") as stream:
            write_comments(stream, header)
            for citation in citations:
                stream.write(f"# asserted: {citation}\n")
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(
                [
                    "method",
                    "h",
                    "steps",
                    "target",
                    "max_abs_det_minus_target",
                    "max_abs_vp_residual",
                    "cum_log_drift",
                    "nonconverged",
                    "diverged",
                    "assert",
                    "passed",
                ]
            )
            for row in result.rows:
                asserted = bool(assertions and row.citation)
                writer.writerow(
                    [
                        row.method,
                        _g(float(row.h)),
                        row.steps,
                        _g(row.target),
                        _g(row.max_abs_det_minus_target),
                        _g(row.max_abs_vp_residual),
                        _g(row.cumulative_log_drift),
                        row.nonconverged,
                        row.diverged,
                        "yes" if asserted else "no",
                        ("yes" if row.passed else "no") if asserted else "",
                    ]
                )
    return result


def bundled_certificates() -> list[str]:
    data = resources.files("vpei") / "data"
    return sorted(
        entry.name.removesuffix(".cert")
        for entry in data.iterdir()
        if entry.name.endswith(".cert")
    )


def resolve_certificate(spec: BenchmarkSpec, cert: str | Path | None) -> ClassCertificate:
    """A certificate from a file, a bundled name or the benchmark default.

    Raises:
      UsageError: If nothing resolves.
      CertificateError: If the certificate text is malformed.
    """
    if cert is None:
        if spec.certificate is None:
            raise UsageError(f"{spec.name} has no bundled certificate")
        return spec.certificate
    if Path(cert).is_file():
        return load_certificate(cert)
    resource = resources.files("vpei") / "data" / f"{cert}.cert"
    if resource.is_file():
        return parse_certificate(resource.read_text())
    raise UsageError(f"No certificate file or bundled certificate named {cert!r}")


def classify(
    problem: str, cert: str | Path | None = None, samples: int = 64, seed: int = 0
) -> ClassReport:
    """Check the class relations of a certificate on a benchmark field.

    Raises:
      UsageError: If the problem or certificate does not resolve.
      CertificateError: If the certificate is malformed or does not fit.
    """
    spec = get_problem(problem)
    return verify_class(spec.problem, resolve_certificate(spec, cert), samples, seed)


def list_entries() -> list[str]:
    lines = ["Problems:"]
    lines += [f"  {name:18} {factory().description}" for name, factory in PROBLEMS.items()]
    lines.append("Methods:")
    lines += [f"  {entry['name']:18} {entry['desc']}" for entry in methods]
    lines.append("Certificates:")
    lines += [f"  {name}" for name in bundled_certificates()]
    return lines
