from collections.abc import Mapping
from typing import IO
import os
import platform

import numpy as np
import scipy
import sympy


def get_debug_info(version: str, settings: Mapping[str, object]) -> str:
    """Describe the software environment and the settings of a run.

    The text goes verbatim into CSV comment headers, so it must not change
    between two runs of the same configuration on one machine.
    """
    debug_info = f"vpei {version}\n"
    debug_info += f"{platform.system()} {platform.release()} {platform.machine()}\n"
    debug_info += f"Python {platform.python_version()}\n"
    debug_info += f"NumPy {np.__version__}\n"
    debug_info += f"SciPy {scipy.__version__}\n"
    debug_info += f"SymPy {sympy.__version__}\n"

    debug_info += "Environment variables:\n"
    for env in sorted(os.environ):
        if env.startswith(("VPEI_", "OMP_NUM_THREADS", "OPENBLAS_", "MKL_")):
            debug_info += f"- {env}: {os.environ.get(env)}\n"

    debug_info += "Settings:\n"
    for key, value in settings.items():
        debug_info += f"- {key}: {value}\n"
    return debug_info


def write_comments(stream: IO[str], text: str) -> None:
    for line in text.splitlines():
        stream.write(f"# {line}\n")
