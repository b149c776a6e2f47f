"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
FingerprintMismatch -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or incomplete configuration (unknown keys, bad ranges, missing inputs)."""


class VocabularyError(ConfigError):
    """A prompt token is outside the closed vocabulary."""


class FingerprintMismatch(RuntimeError):
    """A tuned artifact or checkpoint does not match the base model it claims."""


class NumericError(ArithmeticError):
    """Non-finite values where finite numbers are required (NaN loss, NaN inputs)."""


class EmptyMaskWarning(UserWarning):
    """Mask extraction found no foreground pixels (result is valid but empty)."""
