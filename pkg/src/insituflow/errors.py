"""Exception types raised by the engine."""


class WorkflowError(Exception):
    """Base class for every error raised by insituflow."""


class ConfigError(WorkflowError):
    """Malformed or out-of-range workflow configuration.

    ``line`` and ``column`` are 1-based when the position is known.
    """

    def __init__(self, message, line=None, column=None, where=None):
        self.line = line
        self.column = column
        self.where = where
        prefix = ""
        if line is not None:
            prefix = f"line {line}, column {column}: "
        if where:
            prefix += f"{where}: "
        super().__init__(prefix + message)
        self.message = message


class DataModelError(WorkflowError):
    pass


class SelectionError(DataModelError):
    pass


class ContainerFormatError(DataModelError):
    pass


class TransportError(WorkflowError):
    pass


class RegistryError(WorkflowError):
    pass


class TaskError(WorkflowError):
    """A task body raised; the run was aborted."""

    def __init__(self, message, rank=None, report=None):
        super().__init__(message)
        self.rank = rank
        self.report = report


class DeadlockError(WorkflowError):
    """Every live worker is blocked and no event is pending (virtual clock only)."""

    def __init__(self, blocked, report=None):
        self.blocked = blocked
        self.report = report
        desc = ", ".join(f"rank {r} ({why})" for r, why in blocked)
        super().__init__(f"deadlock: all live workers blocked: {desc}")


class VerificationError(WorkflowError):
    """Received data differs from the expected synthetic payload."""
