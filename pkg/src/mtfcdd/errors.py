"""Error taxonomy shared by the library and the CLI.

Each error class carries a short machine-readable code and the process exit
code the CLI maps it to (0 ok, 2 config, 3 data, 4 numeric).
"""


class MtfcddError(Exception):
    code = "error"
    exit_code = 1


class ConfigError(MtfcddError):
    """Invalid configuration: bad shapes, incompatible sizes, bad flag values."""

    code = "config"
    exit_code = 2


class DataError(MtfcddError):
    """Broken dataset artifacts: missing files, invalid manifests, bad records."""

    code = "data"
    exit_code = 3


class NumericError(MtfcddError):
    """Non-finite values where the numeric contracts forbid them."""

    code = "numeric"
    exit_code = 4


class UndefinedMetricError(DataError):
    """A metric was requested on inputs where it is mathematically undefined."""

    code = "data"
