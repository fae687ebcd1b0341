"""Exception types raised across the package."""


class DetensError(Exception):
    """Base class for all package errors."""


class ParameterizationError(DetensError):
    """Boxes in incompatible parameterizations were combined."""


class DimensionError(DetensError):
    """Shapes or image sizes are inconsistent or degenerate."""


class CovarianceError(DetensError):
    """A covariance matrix is not symmetric positive semi-definite."""


class ConfigurationError(DetensError):
    pass


class ClusterError(DetensError):
    pass


class DataError(DetensError):
    """Input data is inconsistent (unknown ids, missing fields)."""


class DanglingReferenceError(DataError):
    def __init__(self, kind: str, ref_id):
        super().__init__(f"unknown {kind} id {ref_id}")
        self.kind = kind
        self.ref_id = ref_id


class ValidationError(DataError):
    pass


class CapacityError(DetensError):
    """Rejection sampling could not place an object."""
