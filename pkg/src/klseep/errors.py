"""Exception types shared across the library."""


class KLSeepError(Exception):
    """Base class for all library errors."""


class OutOfDomain(KLSeepError):
    """Evaluation point outside the bounding domain of the basis."""


class TruncationEmpty(KLSeepError):
    """No eigenvalue passes the truncation rule."""


class NotPositiveSemiDefinite(KLSeepError):
    """A retained eigenvalue is negative beyond numerical tolerance."""


class DegenerateElement(KLSeepError):
    """An element Jacobian determinant is non-positive."""


class SingularSystem(KLSeepError):
    """Factorization of the reduced FEM system failed."""


class ConstraintViolation(KLSeepError):
    """Geometry parameters violate the admissible set.

    Carries the list of violated inequalities as strings.
    """

    def __init__(self, violated):
        self.violated = list(violated)
        super().__init__("constraint(s) violated: " + "; ".join(self.violated))


class MeshTangled(KLSeepError):
    """A moved element has non-positive Jacobian determinant."""


class PinvFailure(KLSeepError):
    """Pseudoinverse tolerance cannot separate near-degenerate eigenvalues."""


class InsufficientSamples(KLSeepError):
    """Too few samples (or too few batches) for the requested estimator."""


class ConfigError(KLSeepError):
    """Invalid experiment or benchmark configuration.

    `field` identifies the offending entry by dotted path.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
