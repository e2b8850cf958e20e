"""Exception hierarchy shared by all modules."""


class PastQuantumError(Exception):
    """Base class for all package errors."""


class InvalidParameter(PastQuantumError, ValueError):
    pass


class DimensionMismatch(PastQuantumError, ValueError):
    pass


class ZeroProbabilityOutcome(PastQuantumError):
    """Raised when an outcome has (numerically) zero probability in the given state."""


class IncompleteMeasurement(PastQuantumError):
    def __init__(self, deviation):
        self.deviation = float(deviation)
        super().__init__(f"sum of Kraus products deviates from identity by {self.deviation:.3e}")


class DegeneratePastState(PastQuantumError):
    """Raised when Tr(rho E) (or a past-distribution normaliser) underflows."""


class NonOrthogonalProjectors(PastQuantumError, ValueError):
    pass


class StepTooLarge(PastQuantumError):
    pass


class NonFiniteIncrement(PastQuantumError, ValueError):
    pass


class FingerprintMismatch(PastQuantumError):
    pass


class ImpossibleObservation(PastQuantumError):
    pass


class TooLargeForEnumeration(PastQuantumError):
    pass


class InvalidRecord(PastQuantumError, ValueError):
    pass
