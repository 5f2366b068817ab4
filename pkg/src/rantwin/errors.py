"""Exception types shared across the platform."""

from __future__ import annotations


class RanTwinError(Exception):
    """Base class for all errors raised by this package."""


# -- model language ----------------------------------------------------------

class ModelSyntaxError(RanTwinError):
    """The model document is not well-formed."""


class ModelSemanticError(RanTwinError):
    """The model document parses but violates a semantic rule."""


# -- twin engine -------------------------------------------------------------

class DuplicateInstance(RanTwinError):
    pass


class DuplicateTwin(RanTwinError):
    pass


class DuplicateRelationship(RanTwinError):
    pass


class UnknownInstance(RanTwinError):
    pass


class UnknownModel(RanTwinError):
    pass


class UnknownTwin(RanTwinError):
    pass


class UnknownRelationship(RanTwinError):
    pass


class CrossInstance(RanTwinError):
    """Relationship endpoints live in different instances."""


class RateLimitExceeded(RanTwinError):
    pass


class PayloadTooLarge(RanTwinError):
    pass


class ValidationFailed(RanTwinError):
    """A patch failed schema/range validation; the twin is unchanged."""

    def __init__(self, violations):
        self.violations = list(violations)
        detail = "; ".join(str(v) for v in self.violations[:5])
        super().__init__(f"{len(self.violations)} violation(s): {detail}")


# -- emulator ----------------------------------------------------------------

class UnknownCell(RanTwinError):
    pass


class CapacityExceeded(RanTwinError):
    pass


class NonPositiveGranularity(RanTwinError):
    pass


# -- bridge ------------------------------------------------------------------

class BelowServiceLimit(RanTwinError):
    """Requested update period is faster than the per-twin service limit."""


# -- event fabric ------------------------------------------------------------

class InvalidFilter(RanTwinError):
    pass


# -- costing -----------------------------------------------------------------

class UnknownKind(RanTwinError):
    pass


# -- bench -------------------------------------------------------------------

class DegenerateX(RanTwinError):
    """Fewer than two distinct x values; a line cannot be fitted."""


class EmptySample(RanTwinError):
    pass
