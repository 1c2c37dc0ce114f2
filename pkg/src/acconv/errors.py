"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, numeric failures exit 3.
"""


class DimensionError(ValueError):
    """Shapes disagree with an operation's contract."""


class ContractError(ValueError):
    """A precondition or state-machine rule was violated."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed numeric verification."""


class FormatError(ValueError):
    """A binary or JSON artifact does not follow its file format."""


class VocabularyError(KeyError):
    """A phoneme id outside the model's vocabulary."""


class DegenerateStatsError(ValueError):
    """Normalization statistics are unusable (constant dimension)."""


class LoadError(ValueError):
    """A checkpoint does not match the model it is loaded into."""


class SchemaError(ValueError):
    """A config file violates the documented schema."""


class UsageError(ValueError):
    """Bad command-line arguments."""
