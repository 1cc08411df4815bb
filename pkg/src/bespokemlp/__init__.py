"""Area minimization of bespoke fixed-point MLP circuits.

Quantization, unstructured pruning and per-input weight sharing are searched
jointly against a fast gate-level area estimator; the chosen design is
emitted as combinational Verilog.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
