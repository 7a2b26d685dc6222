"""Exception hierarchy shared by the library and the command line front end.

Each branch maps to a process exit code so shell pipelines can distinguish
bad invocations from bad data from numerically degenerate inputs.
"""


class PosdecError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(PosdecError):
    """Invalid configuration: unknown keys, bad values, missing paths."""

    exit_code = 2

    def __init__(self, violations):
        # accept either a single message or a list of per-field messages
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(PosdecError):
    """Malformed or inconsistent input data (files, montages, recordings)."""

    exit_code = 3


class DegenerateDataError(PosdecError):
    """Numerically degenerate situation: all-masked feature, empty
    channel intersection, zero baseline error where a ratio is needed."""

    exit_code = 4
