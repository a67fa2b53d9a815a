"""Exception hierarchy.

Two top-level families map onto the CLI exit codes: ``ValidationError``
(bad inputs, exit 1) and ``NumericError`` (solver/sampler breakdowns,
exit 2).
"""


class HivdynError(Exception):
    """Base class for all package errors."""


class ValidationError(HivdynError):
    """Invalid user input: bad domain values, malformed files, bad config."""


class DomainError(ValidationError):
    """A scalar argument is outside the mathematical domain of an operation."""


class DegenerateIc50Error(ValidationError):
    """IC50 interpolant at or below the lower guard, so log(concentration)
    would not be a usable divisor."""


class DegenerateCovariateError(ValidationError):
    """Covariate column has zero spread; standardization impossible."""


class ProfileRangeError(ValidationError):
    """Evaluation time falls outside the span of an adherence profile."""


class SchemaError(ValidationError):
    """A data file violates its CSV schema (header, types, or values)."""

    def __init__(self, message, path=None, line=None, column=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{': '.join(loc)}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line
        self.column = column


class ReferentialIntegrityError(ValidationError):
    """Cross-table subject references do not line up."""


class ConfigError(ValidationError):
    """Run configuration file contains unknown keys or unparsable values."""


class NumericError(HivdynError):
    """Numerical failure in the solver or sampler."""


class IntegrationError(NumericError):
    """The ODE integrator could not complete (step underflow or tolerance
    failure). Carries the time at which integration broke down."""

    def __init__(self, message, t_fail=None):
        if t_fail is not None:
            message = f"{message} (at t={t_fail:g} days)"
        super().__init__(message)
        self.t_fail = t_fail


class NumericalInstabilityError(NumericError):
    """A state component went negative beyond integrator tolerance."""

    def __init__(self, message, t_fail=None):
        if t_fail is not None:
            message = f"{message} (at t={t_fail:g} days)"
        super().__init__(message)
        self.t_fail = t_fail


class ChainAbortError(NumericError):
    """Unrecoverable failure inside an MCMC run. Carries the sweep index and
    a snapshot of the population state for post-mortem."""

    def __init__(self, message, sweep=None, snapshot=None):
        if sweep is not None:
            message = f"sweep {sweep}: {message}"
        super().__init__(message)
        self.sweep = sweep
        self.snapshot = snapshot


class StudyError(NumericError):
    """Simulation-study level failure (too many broken replications or a
    degenerate trial design)."""
