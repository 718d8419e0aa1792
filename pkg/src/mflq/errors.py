"""Exception types shared across the solver pipeline."""


class MFLQError(Exception):
    """Base class for all package errors."""


class BadGrid(MFLQError):
    """Time grid is degenerate (empty horizon or too few steps)."""


class DimensionMismatch(MFLQError):
    """A coefficient or weight has the wrong shape; names the offending field."""

    def __init__(self, field, expected, got):
        self.field = field
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"{field}: expected shape {self.expected}, got {self.got}")


class AsymmetricWeight(MFLQError):
    """A weight that must be symmetric is not, beyond tolerance."""

    def __init__(self, field, node, deviation):
        self.field = field
        self.node = node
        self.deviation = deviation
        super().__init__(
            f"{field} asymmetric at node {node}: max deviation {deviation:.3e}"
        )


class BadCovariance(MFLQError):
    """Initial covariance is not symmetric positive semidefinite."""


class ParseError(MFLQError):
    """Problem file does not parse or a field has the wrong type."""


class MissingField(MFLQError):
    """Problem file is missing a required field."""


class OutOfRange(MFLQError):
    """A query time lies outside the grid."""


class NonFiniteState(MFLQError):
    """Integration or simulation produced NaN/Inf."""

    def __init__(self, where, node, path=None):
        self.where = where
        self.node = node
        self.path = path
        loc = f"node {node}" if path is None else f"path {path}, node {node}"
        super().__init__(f"{where}: non-finite value at {loc}")


class SolvabilityError(MFLQError):
    """A convexity monitor (Sigma-type matrix) lost positive definiteness."""

    def __init__(self, monitor, time, eigenvalue):
        self.monitor = monitor
        self.time = time
        self.eigenvalue = eigenvalue
        super().__init__(
            f"{monitor} not positive definite at t={time:.6g} "
            f"(min eigenvalue {eigenvalue:.3e})"
        )


class InvertibilityError(MFLQError):
    """An I - P*K style matrix became singular or badly conditioned."""

    def __init__(self, monitor, time, detail):
        self.monitor = monitor
        self.time = time
        self.detail = detail
        super().__init__(f"{monitor} failed at t={time:.6g}: {detail}")
