"""Exception hierarchy shared across the package.

Parse errors are deliberately fine-grained so a decoder can report *why*
a frame was rejected; verification verdicts are not exceptions (a failed
check is a result, not an error) except for structurally broken proofs.
"""


class OffguardError(Exception):
    """Base class for all package errors."""


class ShapeError(OffguardError):
    """Tensor shape incompatible with the operation or layer."""


class UnsupportedLayerError(OffguardError):
    """Operation requires a linear / parametric layer and got something else."""


class DomainError(OffguardError):
    """Numeric argument outside the documented domain (e.g. k < 1)."""


class OutOfMasksError(OffguardError):
    """Mask pool exhausted; caller must pre-generate more masks."""


class MaskStateError(OffguardError):
    """Unknown mask id, or a mask id used out of order (reuse, never consumed)."""


class LayoutError(OffguardError):
    """Bad verify-unit layout request: out-of-bounds region, shape mismatch."""


class MalformedProofError(OffguardError):
    """Proof bytes are structurally invalid (distinct from a failed check)."""


class ParseError(OffguardError):
    """Base class for wire/container decode failures."""


class BadMagicError(ParseError):
    pass


class TruncatedError(ParseError):
    """Input ended before the announced structure was complete."""


class TrailingBytesError(ParseError):
    """Decode finished but unconsumed bytes remain."""


class UnknownTypeError(ParseError):
    """Unknown message type / layer kind / enum byte."""


class LengthOverflowError(ParseError):
    """A declared length exceeds the configured maximum."""


class VersionMismatchError(OffguardError):
    """Peer speaks a different protocol version."""


class TransportError(OffguardError):
    """Connection-level failure; retryable, never a verdict."""


class GranularityError(OffguardError):
    """Requested verification fraction finer than the committed unit layout."""


class UnknownInferenceError(OffguardError):
    """Worker has no record for the inference id."""


class EvictedError(OffguardError):
    """Worker once had the record but evicted it."""


class RoleMismatchError(OffguardError):
    """No stored model matches the requested inference mode."""


class CommitMismatchError(OffguardError):
    """Response commit is internally inconsistent or does not bind the
    input that was actually sent."""


class WorkerFault(OffguardError):
    """Error response received from a worker (code + text)."""

    def __init__(self, code: int, text: str):
        super().__init__(f"worker error {code}: {text}")
        self.code = code
        self.text = text
