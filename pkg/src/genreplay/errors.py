"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or mismatched structural inputs."""


class DimensionError(ValueError):
    """Tensor shape does not match the expected contract."""


class LabelError(ValueError):
    """Label outside the valid index range."""


class LookupFailure(KeyError):
    """Class id was never registered in a label map."""


class MissingClassesError(ValueError):
    def __init__(self, missing):
        self.missing = sorted(int(c) for c in missing)
        super().__init__(f"no examples for classes {self.missing}")


class UnsupportedArchitectureError(TypeError):
    """Model lacks a structural feature an operation relies on."""


class DegenerateBatchError(ValueError):
    """Batch too small for the requested statistic."""


class BalanceError(RuntimeError):
    """Class-balanced replay quota could not be filled."""

    def __init__(self, starving, quota, drawn):
        self.starving = dict(starving)
        self.quota = quota
        self.drawn = drawn
        super().__init__(
            f"replay quota of {quota} per class unfilled after {drawn} draws; "
            f"starving classes (class: count) {self.starving}"
        )


class NonFiniteLossError(FloatingPointError):
    def __init__(self, stage, step, breakdown):
        self.stage = stage
        self.step = step
        self.breakdown = dict(breakdown)
        super().__init__(f"non-finite {stage} loss at step {step}: {self.breakdown}")


class UndefinedMetricError(ValueError):
    """Metric requested over an empty evaluation set."""


class ConfigValidationError(ConfigurationError):
    """Every problem found in an experiment config, collected rather than stopping at the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
