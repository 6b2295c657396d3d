from typing import Optional


class FmtError(Exception):
    """Base class for every error raised on purpose by fmtnet."""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InvalidArgument(FmtError, ValueError):
    exit_code = 2


class PreconditionViolation(FmtError, RuntimeError):
    exit_code = 3


IO_EXIT_CODE = 4


def exit_code_for(exc: BaseException) -> Optional[int]:
    """Process exit code for an expected failure, None for anything that is a bug."""
    if isinstance(exc, FmtError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return IO_EXIT_CODE
    return None
