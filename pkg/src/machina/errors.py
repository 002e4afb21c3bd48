"""Shared exception types."""


class MachinaError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(MachinaError):
    """A JSON document does not match its expected schema.

    ``pointer`` is a JSON-pointer-style path to the offending element
    (for example ``/states/0/name``).
    """

    def __init__(self, pointer: str, reason: str):
        super().__init__(f"{pointer or '/'}: {reason}")
        self.pointer = pointer
        self.reason = reason
