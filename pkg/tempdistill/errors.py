"""
Exception types shared by the whole package
"""

from typing import Optional


class LabError(Exception):
    """Base for every error the package raises on purpose"""


class InvalidArgument(LabError, ValueError):
    """A caller passed a value outside the operation's contract"""


class InvalidState(LabError, RuntimeError):
    """The computation reached a state it can not continue from, e.g. a fully masked attention row"""


class ParseError(LabError, ValueError):
    """Malformed input file. Keeps the location so the message can point at it"""

    def __init__(self, message:str, *, path:Optional[str]=None, line:Optional[int]=None, field:Optional[str]=None):
        self.path = path
        self.line = line
        self.field = field

        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DistillationError(LabError, RuntimeError):
    """Run-level failure of a distillation stage"""
