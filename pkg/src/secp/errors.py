"""Exception hierarchy shared across the engine."""


class SecpError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SecpError, ValueError):
    """An input artifact violates its declared invariants."""


class MalformedSetError(ValidationError):
    pass


class MalformedSheetError(ValidationError):
    pass


class ModuleSetError(ValidationError):
    """Assessments do not match the registered module set."""


class InvalidParamsError(ValidationError):
    pass


class ObjectionLifecycleError(ValidationError):
    pass


class RevisionError(ValidationError):
    pass


class CoverageGapError(ValidationError):
    pass


class UndefinedRelativeChange(SecpError, ArithmeticError):
    """Relative change requested against a zero baseline."""

    def __init__(self, before: int, after: int):
        self.absolute_delta = after - before
        super().__init__(
            f"relative change undefined for baseline 0 (absolute delta {self.absolute_delta:+d})"
        )


class UnknownVersionError(SecpError, KeyError):
    pass


class TamperError(SecpError):
    """Stored bytes no longer match their recorded digest."""


class SealedLogError(SecpError):
    pass


class ChainVerificationError(TamperError):
    def __init__(self, first_bad_sequence: int, reason: str):
        self.first_bad_sequence = first_bad_sequence
        self.reason = reason
        super().__init__(f"audit chain broken at sequence {first_bad_sequence}: {reason}")


class EvaluatorError(SecpError):
    pass


class EvaluatorTimeout(EvaluatorError, TimeoutError):
    pass


class MalformedResponseError(EvaluatorError, ValidationError):
    pass
