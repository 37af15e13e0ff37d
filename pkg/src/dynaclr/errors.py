"""Shared exception hierarchy and warning categories."""


class DynaclrError(Exception):
    """Base class for all errors raised by this package."""


class MetaError(DynaclrError):
    """meta.json is missing, unparseable, or a field violates its invariant."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"meta.json field '{field}': {message}")


class IntegrityError(DynaclrError):
    """On-disk dataset content disagrees with what meta.json declares."""


class ValidationError(DynaclrError):
    """A record (track row, annotation, config) violates an invariant."""


class RangeError(DynaclrError):
    """An index is outside the dataset's declared extent."""


class DegenerateStatisticsError(DynaclrError):
    """Normalization statistics are degenerate for a channel."""

    def __init__(self, channel: str, message: str):
        self.channel = channel
        super().__init__(f"channel '{channel}': {message}")


class ConfigurationError(DynaclrError):
    """Incompatible configuration detected at construction time."""


class SamplingError(DynaclrError):
    """No eligible sample exists for the requested triplet role."""


class EmptyAnchorSetError(SamplingError):
    """Anchor enumeration produced no anchors (dataset too short for tau)."""


class CapabilityError(DynaclrError):
    """An operation needs a capability (e.g. gradients) the input lacks."""


class LeakageError(DynaclrError):
    """Evaluation keys overlap the training manifest."""


class TrackRelinkWarning(UserWarning):
    """A parent track has exactly one daughter: relabeling, not division."""
