"""Exception types shared across the package."""


class RegistrationError(Exception):
    """Base class for all moereg errors."""


class ConfigError(RegistrationError):
    """A configuration value violates a precondition."""


class ParseError(RegistrationError):
    """Malformed point-cloud file. Carries the offending line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateConfiguration(RegistrationError):
    """Weighted covariance is rank-deficient beyond repair (collinear/coincident points)."""


class EmptyPrior(RegistrationError):
    """No overlap-ratio entry exceeds the selection threshold."""


class WidthError(RegistrationError):
    """Embedding width must be even."""


class ShapeError(RegistrationError):
    """Array widths are inconsistent."""


class NoMatches(RegistrationError):
    """Coarse matching found no mutual candidates."""


class NoSupervision(RegistrationError):
    """No anchor has both positive and negative samples."""


class InsufficientCorrespondences(RegistrationError):
    """Fewer than three usable correspondences."""
