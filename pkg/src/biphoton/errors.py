class DomainError(ValueError):
    """Argument outside the domain where a physical formula is valid."""


class FitError(RuntimeError):
    """A least-squares fit did not produce a usable result."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class FormatError(ValueError):
    """Malformed, truncated or corrupted binary file."""


class ConfigError(ValueError):
    """Configuration document failed validation; ``path`` names the field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


class SinkError(RuntimeError):
    """A frame consumer raised while receiving simulated frames."""

    def __init__(self, frame_index, cause):
        self.frame_index = int(frame_index)
        super().__init__(f"sink failed at frame {self.frame_index}: {cause!r}")
