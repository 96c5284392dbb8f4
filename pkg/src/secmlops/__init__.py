"""secmlops: a desk-scale secure-MLOps harness for pedestrian detection.

Synthetic scene generation, a small differentiable detector with its own
reverse-mode autodiff, adversarial attacks and defenses, miss-rate/FPPI
evaluation, and the governance layer (security gate, tamper-evident model
ledger, poisoning and drift monitors, STRIDE threat matrix) that ties a
training pipeline to deployment decisions.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401

__all__ = ["errors", "__version__"]
