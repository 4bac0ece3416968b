"""Exception types shared by the lab modules and the CLI."""


class InvLabError(Exception):
    """Base class for errors raised deliberately by the lab."""


class ConfigError(InvLabError, ValueError):
    """A config file failed to parse or validate.

    `field` is the dotted path of the offending entry, `line` the 1-based
    line number for YAML syntax errors.
    """

    def __init__(self, message: str, field: str = None, line: int = None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field:
            prefix += f"{field}: "
        super().__init__(prefix + message)


class ReplayError(InvLabError, ValueError):
    """Replay metadata handed to a reconstruction is missing or inconsistent."""


class InvariantError(InvLabError):
    """An oracle or a checked invariant failed."""
