"""Exception hierarchy shared by every wrapnet module."""


class WrapnetError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSchemeError(WrapnetError, ValueError):
    pass


class DegenerateScaleError(WrapnetError, ValueError):
    pass


class RangeError(WrapnetError, ValueError):
    """A value does not fit the representable range it was declared for."""


class ShapeMismatchError(WrapnetError, ValueError):
    pass


class SpecMismatchError(WrapnetError, ValueError):
    """Two packed words (or an accumulator mode) disagree on their layout."""


class SchemeMismatchError(WrapnetError, ValueError):
    pass


class ChecksumError(WrapnetError, IOError):
    pass


class ManifestVersionError(WrapnetError, ValueError):
    pass


class ConfigError(WrapnetError, ValueError):
    """Invalid configuration. ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DivergenceError(WrapnetError, RuntimeError):
    pass


class CalibrationError(WrapnetError, ValueError):
    pass
