"""Volume-preserving exponential integrators and their verification harness."""

__version__ = "0.1.0"
