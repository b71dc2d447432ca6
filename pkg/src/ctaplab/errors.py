"""Exception types shared across the workbench."""


class ArgumentError(ValueError):
    """An operation received arguments outside its contract."""


class ConfigError(ValueError):
    """A config file failed to parse or validate.

    Carries enough context (key, line) to point at the offending entry.
    """

    def __init__(self, message, key=None, line=None):
        parts = [message]
        if key is not None:
            parts.append(f"key={key!r}")
        if line is not None:
            parts.append(f"line={line}")
        super().__init__("; ".join(parts))
        self.key = key
        self.line = line


class ProtocolError(RuntimeError):
    """An stateful API was driven out of order (e.g. step after done)."""


class NumericalError(RuntimeError):
    """A numeric kernel failed to converge or produced non-finite values."""


class NumericalInstabilityError(NumericalError):
    """Simulation state became non-finite or left the physical set."""

    def __init__(self, message, step_index=None):
        if step_index is not None:
            message = f"{message} (step {step_index})"
        super().__init__(message)
        self.step_index = step_index
