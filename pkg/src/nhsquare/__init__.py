"""Numerical harness for g*-lambda square functions over non-homogeneous measures."""
from .glstar import OperatorParams, gstar, gstar_field, gstar_localized, gstar_truncated
from .kernels import KernelSpec, kernel_by_name, model_kernel, poisson_kernel
from .measure import AtomicMeasure, ComplexMeasure, Cube, SampledFunction

__version__ = "0.1.0"

__all__ = [
    "AtomicMeasure", "ComplexMeasure", "Cube", "KernelSpec", "OperatorParams", "SampledFunction",
    "gstar", "gstar_field", "gstar_localized", "gstar_truncated", "kernel_by_name", "model_kernel",
    "poisson_kernel",
]
