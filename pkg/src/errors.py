"""Exception hierarchy for the token merging toolkit"""

from typing import Optional


class MaMeError(Exception):
    """Base class for every error raised by this package"""


class FormatError(MaMeError, ValueError):
    """Malformed .mamt file"""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class StateError(MaMeError, ValueError):
    """Fusion state violates one of its invariants, or does not match the tokens it describes"""

    def __init__(self, rule: str, detail: str = ""):
        self.rule = rule
        super().__init__(f"{rule}: {detail}" if detail else rule)


class ParameterError(MaMeError, ValueError):
    """An argument value is out of range"""


class ContractError(MaMeError, ValueError):
    """Inputs do not fit together (shape or plan mismatch)"""


class PartitionError(MaMeError, ValueError):
    """Fewer than two mergeable positions"""


class TokenWriteError(MaMeError, OSError):
    """Writing a token or state file failed"""

    def __init__(self, path: str, cause: Exception):
        self.path = str(path)
        self.cause = cause
        super().__init__(f"cannot write {path}: {cause}")
