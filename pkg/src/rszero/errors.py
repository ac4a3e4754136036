"""Exception types raised across the toolkit.

Every error is a subclass of :class:`ToolkitError`, so callers that do not
care about the specific failure can catch one type. Errors that carry
structured context (row index, byte offset, class name) expose it as
attributes in addition to the message.
"""


class ToolkitError(Exception):
    """Base class for all rszero errors."""


class ValidationError(ToolkitError):
    """A domain-type invariant was violated at construction time."""


class ZeroNormRow(ToolkitError):
    def __init__(self, index: int):
        super().__init__(f"row {index} has (near-)zero L2 norm, cannot normalize")
        self.index = index


class NonFiniteInput(ToolkitError):
    pass


class EmptyMask(ToolkitError):
    pass


class DimMismatch(ToolkitError):
    pass


class FormatError(ToolkitError):
    """Malformed file content. ``offset`` is the byte offset of the problem."""

    def __init__(self, reason: str, offset: int | None = None):
        at = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{reason}{at}")
        self.reason = reason
        self.offset = offset


class TooFewClasses(ToolkitError):
    pass


class KOutOfRange(ToolkitError):
    pass


class ShapeMismatch(ToolkitError):
    pass


class EmptyTemplateList(ToolkitError):
    pass


class BadCount(ToolkitError):
    pass


class EmptyBatch(ToolkitError):
    pass


class InsufficientInstances(ToolkitError):
    def __init__(self, class_name: str, have: int, need: int):
        super().__init__(f"class {class_name!r} has {have} instance embeddings, need {need}")
        self.class_name = class_name
        self.have = have
        self.need = need


class MissingUnseenClass(ToolkitError):
    def __init__(self, class_name: str):
        super().__init__(f"no pseudo samples provided for unseen class {class_name!r}")
        self.class_name = class_name


class EmptyBank(ToolkitError):
    pass


class ClassCountMismatch(ToolkitError):
    pass


class NotAProbabilityVector(ToolkitError):
    pass


class LengthMismatch(ToolkitError):
    pass


class BothEmpty(ToolkitError):
    pass


class NoGroundTruth(ToolkitError):
    pass


class EmptySplit(ToolkitError):
    pass


class SplitMismatch(ToolkitError):
    pass


class UnknownDataset(ToolkitError):
    def __init__(self, name: str):
        super().__init__(f"no builtin split named {name!r}")
        self.name = name


class BadConfig(ToolkitError):
    """Configuration failed validation. ``field`` is a dotted field path."""

    def __init__(self, message: str, field: str | None = None):
        prefix = f"{field}: " if field else ""
        super().__init__(f"{prefix}{message}")
        self.field = field


class DoesNotFit(ToolkitError):
    pass
