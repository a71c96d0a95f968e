"""Exception types shared across the package."""


class MoeScaleError(Exception):
    """Base class; the CLI maps these to exit status 1."""

    kind = "error"


class ConfigError(MoeScaleError, ValueError):
    kind = "invalid-config"


class NoFeasibleConfigError(MoeScaleError, ValueError):
    kind = "no-feasible-config"


class RunLoadError(MoeScaleError, ValueError):
    kind = "load"


class SingularTransformError(MoeScaleError, ValueError):
    kind = "singular-transform"


class InsufficientDataError(MoeScaleError, ValueError):
    kind = "insufficient-data"


class SingularFitError(MoeScaleError, ValueError):
    kind = "singular-fit"

    def __init__(self, message: str, feature: str | None = None):
        super().__init__(message)
        self.feature = feature


class EnsembleError(MoeScaleError, RuntimeError):
    kind = "ensemble"


class EvaluationError(MoeScaleError, ValueError):
    kind = "evaluation"


class OptimizerError(MoeScaleError, RuntimeError):
    kind = "optimizer"

    def __init__(self, message: str, last_x=None):
        super().__init__(message)
        self.last_x = last_x


class FitError(MoeScaleError, RuntimeError):
    kind = "fit"
