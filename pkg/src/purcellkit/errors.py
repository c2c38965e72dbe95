"""Exception hierarchy shared by all purcellkit modules."""


class PurcellKitError(Exception):
    """Base class for all toolkit errors."""


class EvanescentError(PurcellKitError, ValueError):
    """Incidence angle lies beyond total internal reflection for some layer."""


class UnstableCavityError(PurcellKitError, ValueError):
    """Cavity geometry supports no stable Gaussian mode."""


class CalibrationError(PurcellKitError, ValueError):
    """Resonance comb is non-monotonic or internally inconsistent."""


class OscillatoryRegimeError(PurcellKitError, ValueError):
    """Rate model has complex g2 eigenvalues (A**2 < 4B)."""


class ConvergenceError(PurcellKitError, RuntimeError):
    """A fit or a quadrature failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(PurcellKitError, ValueError):
    """Malformed input file. Carries the offending line number when known."""

    def __init__(self, message, path=None, lineno=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.lineno = lineno


class SchemaError(PurcellKitError, ValueError):
    """Input is syntactically valid but violates the expected schema."""


class GeometryError(PurcellKitError, ValueError):
    """Cavity length budget is internally inconsistent."""
