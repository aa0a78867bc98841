"""Safe reinforcement learning with augmented-Lagrangian multiplier networks.

Submodules are imported on demand (``from alam import agents``) so that
``python -m alam`` can pin BLAS threads before numpy loads.
"""

__version__ = "0.1.0"

__all__ = [
    "actor", "agents", "autodiff", "critics", "envs", "errors", "harness",
    "logs", "multiplier", "nn", "optim", "tabular",
]
