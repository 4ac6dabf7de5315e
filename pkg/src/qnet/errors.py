"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class QnetError(Exception):
    exit_code = 1


class UsageError(QnetError, ValueError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class DimensionError(QnetError, ValueError):
    exit_code = 1


class StructureError(QnetError, ValueError):
    exit_code = 1


class CoverageError(QnetError, KeyError):
    exit_code = 1

    def __str__(self):
        return Exception.__str__(self)


class IntegrityError(QnetError, ValueError):
    exit_code = 3


class FormatError(QnetError, ValueError):
    exit_code = 3


class CapabilityError(QnetError, RuntimeError):
    exit_code = 4
