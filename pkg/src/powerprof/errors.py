"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PowerprofError(Exception):
    exit_code = 1


class ConfigError(PowerprofError):
    exit_code = 2


class DataError(PowerprofError):
    exit_code = 3


class NumericError(PowerprofError):
    exit_code = 4
