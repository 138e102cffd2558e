"""Exception types shared across the toolkit.

Each error carries an ``error_code`` and a process ``exit_code`` so the CLI can
report failures in a machine-parsable way without a lookup table.
"""


class EmbryoRegError(Exception):
    error_code = "error"
    exit_code = 1

    def __init__(self, detail, stage=None):
        super().__init__(detail)
        self.detail = str(detail)
        self.stage = stage

    def with_stage(self, stage):
        if self.stage is None:
            self.stage = stage
        return self


class InputError(EmbryoRegError, ValueError):
    """Rejected input: malformed, non-finite, mismatched or missing data."""

    error_code = "input_error"
    exit_code = 2


class DimensionMismatchError(InputError):
    error_code = "dimension_mismatch"


class MissingLandmarksError(InputError):
    error_code = "missing_landmarks"


class DegenerateLandmarksError(InputError):
    error_code = "degenerate_landmarks"


class SelectionError(InputError):
    error_code = "selection_error"


class InsufficientDataError(InputError):
    error_code = "insufficient_data"


class NonInvertibleError(EmbryoRegError, ArithmeticError):
    error_code = "non_invertible"
    exit_code = 3


class NumericalError(EmbryoRegError, ArithmeticError):
    """NaN or Inf appeared in a value or gradient."""

    error_code = "numerical_error"
    exit_code = 3

    def __init__(self, detail, stage=None, index=None):
        super().__init__(detail, stage)
        self.index = index


class DivergenceError(NumericalError):
    """Optimization reached a non-finite loss; ``trace`` holds the losses so far."""

    error_code = "divergence"

    def __init__(self, detail, trace=None, stage=None):
        super().__init__(detail, stage)
        self.trace = list(trace or [])
