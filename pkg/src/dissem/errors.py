"""Exception types raised across the package."""

from __future__ import annotations


class DissemError(Exception):
    """Base class for all package errors."""


class NoFeasibleZeta(DissemError, ValueError):
    pass


class UnknownNode(DissemError, KeyError):
    pass


class InvalidEpsilon(DissemError, ValueError):
    pass


class InvalidInstance(DissemError, ValueError):
    """Instance data that violates the path-loss invariants (e.g. f <= 0)."""


class DisconnectedGraph(DissemError, ValueError):
    pass


class ModelMismatch(DissemError, ValueError):
    pass


class UnknownKind(DissemError, ValueError):
    pass


class MissingScript(DissemError, LookupError):
    pass


class NotATransmitter(DissemError, ValueError):
    pass


class NotSymmetric(DissemError, ValueError):
    pass


class StaticOnly(DissemError, ValueError):
    pass


class BudgetInfeasible(DissemError, RuntimeError):
    pass


class ConfigInvalid(DissemError, ValueError):
    """Raised with a ``locator`` naming the offending config field."""

    def __init__(self, message: str, locator: str = ""):
        super().__init__(f"{locator}: {message}" if locator else message)
        self.locator = locator


class IntegrityFailure(DissemError, ValueError):
    pass
