"""Exception hierarchy.

Every error raised on purpose by the package derives from ``KdrankError`` and
carries the CLI exit code it maps to.
"""


class KdrankError(Exception):
    exit_code = 1


class ContractError(KdrankError, ValueError):
    """A caller broke an operation's precondition."""


class DimensionError(ContractError):
    pass


class EmptySequenceError(ContractError):
    pass


class ConfigurationError(KdrankError, ValueError):
    pass


class UnsupportedHeadError(ConfigurationError):
    pass


class DataError(KdrankError, ValueError):
    exit_code = 2


class VocabularyError(DataError):
    pass


class DivergenceError(KdrankError, ArithmeticError):
    exit_code = 3
