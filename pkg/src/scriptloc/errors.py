"""Exception hierarchy shared by every stage of the pipeline."""


class ScriptlocError(Exception):
    """Base class for all errors raised by scriptloc."""

    exit_code = 1


class EmptyInputError(ScriptlocError, ValueError):
    exit_code = 3


class SchemaError(ScriptlocError, ValueError):
    """Malformed input file or record."""

    exit_code = 3


class ConsistencyError(ScriptlocError, ValueError):
    """Inputs disagree with each other (shapes, vocabularies, ids)."""

    exit_code = 3


class JoinError(ConsistencyError):
    """An item id present on one side of a join is missing on the other."""


class InfeasibleError(ScriptlocError):
    """No assignment satisfies the ordering and window constraints."""

    exit_code = 4

    def __init__(self, message, step=None, item_id=None):
        super().__init__(message)
        self.step = step
        self.item_id = item_id


class CapExceededError(ScriptlocError, ValueError):
    """An exhaustive oracle was asked to solve an instance above its size caps."""

    exit_code = 5
