"""Exception hierarchy. Each family maps onto a CLI exit code."""


class Ret2Error(Exception):
    exit_code = 1
    kind = "error"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

    def to_dict(self):
        out = {"error": self.kind, "message": str(self)}
        if self.field is not None:
            out["field"] = self.field
        return out


class ConfigError(Ret2Error, ValueError):
    exit_code = 2
    kind = "config_error"


class DataError(Ret2Error, ValueError):
    exit_code = 3
    kind = "data_error"


class FormatError(DataError):
    """Malformed binary file (bad magic, version, truncation, header mismatch)."""

    kind = "format_error"


class DimensionError(Ret2Error, ValueError):
    exit_code = 3
    kind = "shape_error"


class NumericError(Ret2Error, FloatingPointError):
    exit_code = 4
    kind = "numeric_error"
