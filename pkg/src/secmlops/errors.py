"""Exception types shared across the package.

Most map one-to-one onto a named failure mode of some operation; the CLI
translates them into process exit codes.
"""


class SecMLOpsError(Exception):
    """Base class for all package errors."""


class InvalidConfig(SecMLOpsError, ValueError):
    """A config object or file violates its documented constraints."""


class ShapeMismatch(SecMLOpsError, ValueError):
    """Operands have incompatible shapes."""


class NonFiniteValues(SecMLOpsError, ValueError):
    """A NaN or Inf appeared where only finite values are allowed."""


class LossNotScalar(SecMLOpsError, ValueError):
    """backward() was asked to differentiate a non-scalar node."""


class MissingGradient(SecMLOpsError, KeyError):
    """An SGD step received no gradient for some parameter."""


class ChecksumMismatch(SecMLOpsError, ValueError):
    """Stored bytes do not match their recorded digest."""


class DegenerateBox(SecMLOpsError, ValueError):
    """A box has zero or negative area where positive area is required."""


class CenterOutsideGrid(SecMLOpsError, ValueError):
    """A ground-truth center does not land inside the detector output grid."""


class EmptySplit(SecMLOpsError, ValueError):
    """An operation needs a non-empty dataset split."""


class BatchTooSmall(SecMLOpsError, ValueError):
    """CutMix needs at least two scenes in a batch."""


class Diverged(SecMLOpsError, RuntimeError):
    """Training produced a non-finite loss."""


class NoPositiveCell(SecMLOpsError, ValueError):
    """DeepFool found no positively classified center cell to attack."""


class ZeroGradient(SecMLOpsError, RuntimeError):
    """An attack hit a zero-gradient plateau and cannot make progress."""


class NoGroundTruth(SecMLOpsError, ValueError):
    """A metric needs at least one in-subset ground-truth box."""


class InvalidCurve(SecMLOpsError, ValueError):
    """A detection curve violates its monotonicity contract."""


class IncompletePayload(SecMLOpsError, ValueError):
    """A ledger payload lacks required fields."""


class ConcurrentWriter(SecMLOpsError, RuntimeError):
    """Another writer holds the ledger lock."""


class LedgerInvalid(SecMLOpsError, RuntimeError):
    """A ledger failed verification where a valid one is required."""


class NoSecureVersion(SecMLOpsError, RuntimeError):
    """No ledger record satisfies the rollback / safe-mode criteria."""


class GoldenTooSmall(SecMLOpsError, ValueError):
    """The golden reference sample is too small to screen against."""


class WindowTooSmall(SecMLOpsError, ValueError):
    """A monitoring window has fewer samples than the configured minimum."""


class MissingRequiredAttack(SecMLOpsError, ValueError):
    """The gate's required attack suite was not fully evaluated."""


class BudgetExceedsPolicy(SecMLOpsError, ValueError):
    """An attack was run at a budget above the policy cap."""


class MatrixFormatError(SecMLOpsError, ValueError):
    """A threat matrix file is malformed (duplicate, missing or unknown cell)."""
