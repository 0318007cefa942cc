from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Final
import os

from .errors import UsageError

SETTING_PROBLEM: Final[str] = "problem"
SETTING_METHOD: Final[str] = "method"
SETTING_H: Final[str] = "h"
SETTING_T_END: Final[str] = "t-end"
SETTING_OUT_DIR: Final[str] = "out-dir"
SETTING_SEED: Final[str] = "seed"
SETTING_TABLEAU: Final[str] = "tableau"
SETTING_ASSERT: Final[str] = "assert"
SETTING_JOBS: Final[str] = "jobs"
SETTING_SNAPSHOT: Final[str] = "snapshot"

SETTINGS: Final[tuple[str, ...]] = (
    SETTING_PROBLEM,
    SETTING_METHOD,
    SETTING_H,
    SETTING_T_END,
    SETTING_OUT_DIR,
    SETTING_SEED,
    SETTING_TABLEAU,
    SETTING_ASSERT,
    SETTING_JOBS,
    SETTING_SNAPSHOT,
)

ENV_OUT_DIR: Final[str] = "VPEI_OUT_DIR"


def default_out_dir() -> Path:
    return Path(os.environ.get(ENV_OUT_DIR, "vpei-out"))


def parse_fraction(text: str | int | float | Fraction, name: str = "value") -> Fraction:
    """Read an exact rational such as ``1/200`` or ``0.005``.

    Raises:
      UsageError: If the text is not a rational number.
    """
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError, TypeError) as error:
        raise UsageError(f"Invalid {name} {text!r}") from error


def parse_bool(text: str) -> bool:
    match text.strip().lower():
        case "1" | "true" | "yes" | "on":
            return True
        case "0" | "false" | "no" | "off":
            return False
    raise UsageError(f"Invalid boolean {text!r}")


@dataclass
class RunConfig:
    """One integration run as the command line describes it.

    Attributes:
      problem: Benchmark name.
      method: Method name, or ``custom`` with ``tableau``.
      h: Step size.
      t_end: End time, a multiple of h.
      out_dir: Directory for the CSV files.
      seed: Seed for sampled checks.
      tableau: Optional tableau file.
      assertions: Whether volume checks with an applicable result decide the exit status.
      snapshot: Spacing of the flow snapshot times.
    """

    problem: str
    method: str = "SSEI1"
    h: Fraction = Fraction(1, 50)
    t_end: Fraction = Fraction(10)
    out_dir: Path = field(default_factory=default_out_dir)
    seed: int = 0
    tableau: Path | None = None
    assertions: bool = True
    snapshot: Fraction = Fraction(1, 2)

    def __post_init__(self):
        self.h = parse_fraction(self.h, "step size")
        self.t_end = parse_fraction(self.t_end, "end time")
        self.snapshot = parse_fraction(self.snapshot, "snapshot spacing")
        self.out_dir = Path(self.out_dir)
        if self.tableau is not None:
            self.tableau = Path(self.tableau)
        if self.h <= 0:
            raise UsageError(f"Step size must be positive, got {self.h}")
        if self.t_end < 0:
            raise UsageError(f"End time must be non-negative, got {self.t_end}")
        if (self.t_end / self.h).denominator != 1:
            raise UsageError(f"h = {self.h} does not divide t_end = {self.t_end}")

    @property
    def steps(self) -> int:
        return int(self.t_end / self.h)

    @property
    def label(self) -> str:
        h = str(self.h).replace("/", "_")
        return f"{self.problem}-{self.method}-h{h}"


def read_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key=value`` lines; ``#`` starts a comment line.

    Raises:
      UsageError: If the file cannot be read, a line is malformed or a key
        is unknown.
    """
    try:
        text = Path(path).read_text()
    except OSError as error:
        raise UsageError(f"Cannot read config file {path}") from error
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{number}: expected key=value")
        if key not in SETTINGS:
            raise UsageError(f"{path}:{number}: unknown key {key!r}")
        values[key] = value.strip()
    return values
