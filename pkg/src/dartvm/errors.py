"""Exception types shared across the engine."""


class DartError(Exception):
    """Base class for every engine-raised error."""


# --- object model ---------------------------------------------------------

class UnknownObject(DartError):
    def __init__(self, oid: int):
        super().__init__(f"unknown object id {oid}")
        self.oid = oid


class KindMismatch(DartError):
    pass


class IndexOutOfRange(DartError):
    pass


# --- parsing / execution --------------------------------------------------

class ParseError(DartError):
    def __init__(self, line: int, col: int, message: str):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


class VMError(DartError):
    """A statement failed; the VM rolled back to the pre-statement state.

    `kind` is one of UnknownName, KindMismatch, IndexOutOfRange,
    DivisionByZero, RecursionLimit.
    """

    def __init__(self, kind: str, message: str, cursor=None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.cursor = cursor


# --- delta engine ---------------------------------------------------------

class SerializeError(DartError):
    def __init__(self, pid, reason: str):
        super().__init__(f"serialize failed (pid={pid}): {reason}")
        self.pid = pid
        self.reason = reason


class BaseMismatch(DartError):
    pass


class UnknownPid(DartError):
    pass


class CorruptRecord(DartError):
    pass


# --- store ----------------------------------------------------------------

class IoError(DartError):
    pass


class VersionOrderViolation(DartError):
    pass


class UnknownVersion(DartError):
    def __init__(self, version: int):
        super().__init__(f"version {version} not in store")
        self.version = version


class NoCheckpoint(DartError):
    pass


class NotEmpty(DartError):
    pass


class CorruptPack(DartError):
    pass


class StoreLocked(DartError):
    pass


# --- recovery -------------------------------------------------------------

class DigestMismatch(DartError):
    pass


class TargetUnreachable(DartError):
    pass
