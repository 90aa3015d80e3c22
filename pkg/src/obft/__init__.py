"""Split execution of a toy GPT-2-style transformer across a simulated
trusted zone and an untrusted host, with host-resident weights and activations
hidden behind random-matrix obfuscation."""

from .backend import backend_name, compiled_available

__version__ = "0.1.0"
__all__ = ["backend_name", "compiled_available", "__version__"]
