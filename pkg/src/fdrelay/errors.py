"""Exception types shared across the package."""


class FdRelayError(Exception):
    pass


class DimensionError(FdRelayError, ValueError):
    pass


class DomainError(FdRelayError, ValueError):
    pass


class NearSingularError(FdRelayError):
    def __init__(self, cond):
        self.cond = cond
        super().__init__(f"matrix is near-singular (condition estimate {cond:.3e})")


class RelayLoopUnstable(FdRelayError):
    """The relay distortion-amplification loop diverges for the given G."""

    def __init__(self, message, radius=None):
        self.radius = radius
        super().__init__(message)


class NotPSDError(FdRelayError):
    pass


class NoConvergence(FdRelayError):
    """Raised when the PDD outer loop exhausts its budget; carries the trace."""

    def __init__(self, message, trace=None, design=None):
        self.trace = trace
        self.design = design
        super().__init__(message)
