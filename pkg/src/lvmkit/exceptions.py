"""Exception hierarchy shared by all model modules.

Every error carries a stable machine-readable ``code`` so the CLI can emit
structured error JSON and map failures to distinct exit statuses.
"""


class LvmError(Exception):
    """Base class for all toolkit errors."""

    code = "error"
    exit_code = 1

    def to_json_dict(self):
        return {"error": self.code, "message": str(self)}


class DimensionError(LvmError):
    """Shapes of the supplied operands do not conform."""

    code = "dimension_mismatch"
    exit_code = 3


class SingularityError(LvmError):
    """A matrix required to be invertible is numerically singular.

    The message names the offending matrix.
    """

    code = "singular_matrix"
    exit_code = 4


class PreconditionError(LvmError):
    """An operation-specific precondition was violated."""

    code = "precondition_violated"
    exit_code = 5


class NumericalDivergenceError(LvmError):
    """An iterative fit produced a non-finite objective."""

    code = "numerical_divergence"
    exit_code = 6

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class EmptyComponentError(LvmError):
    """A mixture component or chain state received (almost) no mass."""

    code = "empty_component"
    exit_code = 7

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class UnderflowError(LvmError):
    """Probability mass underflowed to zero during a recursion."""

    code = "underflow"
    exit_code = 8

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(LvmError):
    """An inner solver failed to reach its stopping criterion."""

    code = "no_convergence"
    exit_code = 9

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RankError(LvmError):
    """A matrix required to have full (column) rank does not."""

    code = "rank_deficient"
    exit_code = 10


class SizeError(LvmError):
    """A brute-force enumeration guard was exceeded."""

    code = "size_guard"
    exit_code = 11


class HessianError(LvmError):
    """A working Hessian is not positive definite."""

    code = "bad_hessian"
    exit_code = 12


class SeparationError(LvmError):
    """Logistic-regression weights diverged (linearly separable data)."""

    code = "separation"
    exit_code = 13


class ParseError(LvmError):
    """A data or model file could not be parsed."""

    code = "parse_error"
    exit_code = 14

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class VersionError(LvmError):
    """A model file declares an unknown schema version."""

    code = "unknown_schema_version"
    exit_code = 15


class KindMismatchError(LvmError):
    """A model file holds a different model kind than requested."""

    code = "model_kind_mismatch"
    exit_code = 16
