"""Exception hierarchy shared by every subsystem."""


class NativeVidError(Exception):
    """Base class; the CLI maps these to machine-readable error reports."""

    code = "error"


class DimensionError(NativeVidError, ValueError):
    code = "dimension"


class ContractError(NativeVidError, ValueError):
    code = "contract"


class ConfigError(NativeVidError, ValueError):
    code = "config"


class InfeasibleResolutionError(NativeVidError, ValueError):
    code = "infeasible_resolution"


class ManifestError(NativeVidError, ValueError):
    """Malformed manifest line; ``line`` is 1-based."""

    code = "manifest_parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VocabularyError(ManifestError):
    code = "vocabulary"


class IntegrityError(NativeVidError, ValueError):
    code = "integrity"


class ParameterError(NativeVidError, ValueError):
    code = "parameter"


class DivergenceError(NativeVidError, RuntimeError):
    code = "divergence"
