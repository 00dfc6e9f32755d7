"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 for usage problems, 2 for data/format problems, 3 for numeric failures.
"""


class UkatError(Exception):
    exit_code = 2


class ArgumentError(UkatError, ValueError):
    exit_code = 1


class EmptyInputError(UkatError, ValueError):
    pass


class ShapeError(UkatError, ValueError):
    pass


class NumericError(UkatError, ArithmeticError):
    exit_code = 3


class VocabularyError(UkatError, ValueError):
    pass


class CollisionError(VocabularyError):
    pass


class EncodingError(UkatError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConfigurationError(UkatError, ValueError):
    pass


class StateError(UkatError, RuntimeError):
    pass


class FormatError(UkatError):
    """Malformed model file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ManifestParseError(UkatError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
