"""stripeforge: differentiable stripe patterns on triangle meshes, XFEM
solid-shell simulation, periodic homogenization, and inverse design."""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
