"""Exception hierarchy shared across the engine.

Every error raised by the public API derives from :class:`ContentQCError`,
so callers (CLI, HTTP layer) can map failures to exit codes / status codes
in one place.
"""


class ContentQCError(Exception):
    """Base class for all engine errors."""


# ---------------------------------------------------------------- rule base

class JsonError(ContentQCError):
    """Input is not parseable JSON."""


class SchemaError(ContentQCError):
    """JSON parsed but does not match the required document schema."""


class DuplicateIdError(ContentQCError):
    """Two generated rules collided on the same rule id."""


# ---------------------------------------------------------------- waterfall

class UnknownTemplateError(ContentQCError):
    """Requested prompt template id does not resolve to a template file."""


# ------------------------------------------------------------- model client

class BackendUnavailable(ContentQCError):
    """No backend configured for the provider, or the backend cannot serve."""


class SchemaViolation(ContentQCError):
    """Model output failed the response contract after one repair attempt."""


class RequestTimeout(ContentQCError):
    """The per-request deadline elapsed before the backend responded."""


class UnknownModelError(ContentQCError):
    """No pricing entry for the (provider, model) pair."""


class MisconfiguredPolicy(ContentQCError):
    """Routing policy lacks a teacher or student model spec."""


# -------------------------------------------------------------------- hitl

class StorageError(ContentQCError):
    """The review event log could not be read or appended."""


class NotFound(ContentQCError):
    """Referenced review item does not exist."""


class AlreadyDecided(ContentQCError):
    """The review item already carries a decision."""


class EmptyJustification(ContentQCError):
    """Human decisions must carry a non-empty justification."""


class UnknownRule(ContentQCError):
    """Knowledge update references a rule id absent from the rule base."""


# ------------------------------------------------------------- eval harness

class MissingSample(ContentQCError):
    """Predictions and gold labels do not cover the same sample ids."""


class DuplicateSample(ContentQCError):
    """A sample id occurs more than once in one dataset."""


class EmptyCounts(ContentQCError):
    """Confusion counts sum to zero."""


class LengthMismatch(ContentQCError):
    """Paired vectors differ in length or are too short."""


class OutOfRangeScore(ContentQCError):
    """A rating falls outside the declared 1..k scale."""


class DegenerateMarginals(ContentQCError):
    """Both raters are constant and equal; chance agreement is undefined."""


class ZeroVariance(ContentQCError):
    """A constant vector has no rank variance to correlate."""


class UnknownClass(ContentQCError):
    """Error annotation uses a class outside the closed class set."""


class EmptySubset(ContentQCError):
    """A subset contains no per-sample values."""
