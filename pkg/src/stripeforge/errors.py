"""Exception hierarchy."""


class StripeforgeError(Exception):
    """Base class for all stripeforge errors."""


class MeshError(StripeforgeError):
    """Invalid or unsupported mesh input."""


class PeriodicityError(MeshError):
    """Boundary vertices cannot be paired under the given lattice."""


class SolverError(StripeforgeError):
    """An iterative or linear solver failed."""


class ElementInversionError(SolverError):
    """Negative volume detected at a quadrature point."""

    def __init__(self, element_id, message=None):
        self.element_id = element_id
        super().__init__(message or f"element inversion in element {element_id}")


class ConfigError(StripeforgeError):
    """Invalid run configuration."""
