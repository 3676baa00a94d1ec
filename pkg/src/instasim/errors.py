"""Exception taxonomy shared by every module and the CLI.

Each class name doubles as the machine-parsable error code printed on
stderr by the command line tool (``error: <code>: <message>``).
"""


class Error(Exception):
    """Base class for all tool errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class FormatError(Error):
    """A file or record violates its declared schema (bad magic, bad enum,
    missing field, unparsable line, unsupported future version)."""


class CorruptBundle(Error):
    """A bundle file parsed structurally but its contents are inconsistent
    (truncated payload, non-finite values, duplicate ids)."""


class InvalidInput(Error):
    """An in-memory argument violates an operation's precondition."""


class IoError(Error):
    """Underlying filesystem read/write failure."""


class DuplicateId(Error):
    """The same identifier was declared twice where uniqueness is required."""


class MissingItem(Error):
    """A referenced identifier does not exist in the given container."""


class ShapeError(Error):
    """Array dimensionality or size mismatch between operands."""


class NoCandidates(Error):
    """A mining query has an empty eligible candidate pool."""


class InsufficientInventory(Error):
    """A sampling budget exceeds what the inventory can supply."""


class SingularDesign(Error):
    """The regression design matrix is rank deficient."""


class UndefinedMetric(Error):
    """The requested metric is undefined for this input (single-class
    labels, zero-variance scores, no positives)."""
