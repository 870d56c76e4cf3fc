"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PeftSpaceError(Exception):
    exit_code = 5


class ConfigError(PeftSpaceError, ValueError):
    exit_code = 2


class HyperparameterError(ConfigError):
    pass


class InputError(PeftSpaceError, ValueError):
    exit_code = 3


class DimensionError(InputError):
    pass


class NonFiniteError(PeftSpaceError, FloatingPointError):
    exit_code = 5


class CheckpointError(PeftSpaceError):
    exit_code = 3

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint version {found} does not match supported version {expected}",
                         field="version")
        self.found = found
        self.expected = expected


class InfeasibleBudgetError(PeftSpaceError):
    exit_code = 4


class SamplingError(PeftSpaceError):
    exit_code = 4


class RefinementOrderError(PeftSpaceError):
    exit_code = 5


class DiscoveryError(PeftSpaceError):
    exit_code = 4

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class EvaluationError(PeftSpaceError):
    exit_code = 5

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial or []
