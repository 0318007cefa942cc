"""Named integration methods and how to build them for a benchmark."""

from dataclasses import dataclass
from pathlib import Path
from typing import Final

from .errors import UsageError
from .integrators import (
    ERKNStepper,
    RKNStepper,
    RKStepper,
    SecondOrderEIStepper,
    SolverConfig,
    SSEIStepper,
    Stepper,
)
from .problems import BenchmarkSpec
from .tableau import ButcherTableau, get_tableau, load_tableau

KIND_SSEI: Final[str] = "ssei"
KIND_RK: Final[str] = "rk"
KIND_ERKN: Final[str] = "erkn"
KIND_RKN: Final[str] = "rkn"
CUSTOM_METHOD: Final[str] = "custom"

methods = [
    {"name": "SSEI1", "tableau": "midpoint", "kind": KIND_SSEI, "desc": "One-stage SSEI (order 2)"},
    {"name": "SSEI2", "tableau": "gauss2", "kind": KIND_SSEI, "desc": "Two-stage Gauss SSEI (order 4)"},
    {"name": "SSEI2EQ", "tableau": "equal-node2", "kind": KIND_SSEI, "desc": "Two-stage SSEI with c₁ = c₂"},
    {"name": "SSRK1", "tableau": "midpoint", "kind": KIND_RK, "desc": "Implicit midpoint rule"},
    {"name": "SSRK2", "tableau": "gauss2", "kind": KIND_RK, "desc": "Two-stage Gauss-Legendre RK"},
    {"name": "ERKN1", "tableau": "midpoint", "kind": KIND_ERKN, "desc": "One-stage ERKN"},
    {"name": "ERKN2EQ", "tableau": "equal-node2", "kind": KIND_ERKN, "desc": "Two-stage ERKN with c₁ = c₂"},
    {"name": "RKN1", "tableau": "midpoint", "kind": KIND_RKN, "desc": "One-stage RKN"},
    {"name": "RKN2EQ", "tableau": "equal-node2", "kind": KIND_RKN, "desc": "Two-stage RKN with c₁ = c₂"},
]


@dataclass(frozen=True, eq=False)
class Method:
    name: str
    kind: str
    tableau: ButcherTableau
    desc: str = ""


def resolve_method(name: str, tableau_path: str | Path | None = None) -> Method:
    """Find a method by name; ``custom`` runs SSEI on a tableau file.

    Raises:
      UsageError: If the name is unknown or a custom method has no tableau.
    """
    if name == CUSTOM_METHOD or (tableau_path is not None and name not in _names()):
        if tableau_path is None:
            raise UsageError("A custom method needs --tableau")
        tableau = load_tableau(tableau_path)
        return Method(name, KIND_SSEI, tableau, f"SSEI on {tableau.name}")
    for entry in methods:
        if entry["name"] == name:
            return Method(name, entry["kind"], get_tableau(entry["tableau"]), entry["desc"])
    raise UsageError(f"Unknown method {name!r}; choose from {', '.join(_names())}")


def _names() -> list[str]:
    return [entry["name"] for entry in methods]


def build_stepper(method: Method, spec: BenchmarkSpec, config: SolverConfig) -> Stepper:
    """Prepare ``method`` on the form of ``spec`` it integrates.

    SSEI methods use the adapted second-order integrator when the benchmark
    has a second-order form. RKN methods fold Ωq into the nonlinearity.

    Raises:
      UsageError: If a Nyström method meets a benchmark without a
        partitioned form.
    """
    tableau, name = method.tableau, method.name
    match method.kind:
        case "ssei" if spec.second_order is not None:
            return SecondOrderEIStepper(spec.second_order, tableau, config, name)
        case "ssei":
            return SSEIStepper(spec.problem, tableau, config, name)
        case "rk":
            return RKStepper(spec.problem, tableau, config, name)
    if spec.partitioned is None:
        raise UsageError(f"{name} needs a partitioned problem; {spec.name} has none")
    if method.kind == KIND_ERKN:
        return ERKNStepper(spec.partitioned, tableau, config, name)
    partitioned = spec.partitioned
    if partitioned.Omega.any():
        partitioned = partitioned.without_linear_part()
    return RKNStepper(partitioned, tableau, config, name)
