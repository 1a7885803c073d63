from typing import Optional


class EqhamnetError(Exception):
    """Base error; `exit_code` is what the command layer exits with."""

    exit_code = 3

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigError(EqhamnetError):
    exit_code = 2


class UsageError(EqhamnetError):
    exit_code = 2


class StructureError(EqhamnetError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TargetError(EqhamnetError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GraphError(EqhamnetError):
    pass


class BasisError(EqhamnetError):
    pass


class HarmonicsError(EqhamnetError):
    pass


class ShapeError(EqhamnetError):
    pass


class PartitionError(EqhamnetError):
    pass


class TapeError(EqhamnetError):
    pass


class CommunicationError(EqhamnetError):
    def __init__(self, message: str, rank: Optional[int] = None, peer: Optional[int] = None):
        super().__init__(f"[rank {rank} <-> peer {peer}] {message}")
        self.rank = rank
        self.peer = peer


class DivergenceError(EqhamnetError):
    exit_code = 4
