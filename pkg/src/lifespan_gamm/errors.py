"""Exception hierarchy shared by every module of the package."""


class GammError(Exception):
    """Base class for all package errors."""

    #: short machine-readable tag used by the CLI error JSON
    kind = "error"


class SpecError(GammError, ValueError):
    kind = "spec"


class SchemaError(GammError, KeyError):
    kind = "schema"

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ParseError(GammError, ValueError):
    kind = "parse"


class ConsistencyError(GammError, ValueError):
    kind = "consistency"


class DegenerateCovariateError(GammError, ValueError):
    kind = "degenerate_covariate"


class RankError(GammError, ValueError):
    kind = "rank"


class NumericalError(GammError, ArithmeticError):
    kind = "numerical"


class IdentifiabilityError(GammError, ValueError):
    """Unpenalized part of the design is rank deficient.

    Raised for example by the age-cohort model when every participant was
    measured on the same dates, so that age and birth date are collinear.
    """

    kind = "identifiability"


class ConvergenceError(GammError, RuntimeError):
    kind = "convergence"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class ConfigError(GammError, ValueError):
    kind = "config"
