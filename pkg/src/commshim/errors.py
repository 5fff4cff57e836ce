"""Exception hierarchy shared by all commshim layers."""

from __future__ import annotations


class CommShimError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(CommShimError):
    """Invalid or conflicting startup configuration (e.g. a rank collision)."""


class StartupError(CommShimError):
    """A peer could not be reached while bringing the transport up."""

    def __init__(self, message: str, rank: int | None = None):
        super().__init__(message)
        self.rank = rank


class UsageError(CommShimError):
    """An API contract was violated by the caller."""


class AddressParseError(UsageError):
    """An address string failed to parse; ``position`` points at the offender."""

    def __init__(self, message: str, position: int):
        super().__init__(message)
        self.position = position


class ChannelError(CommShimError):
    """Traffic was posted on a channel the transport does not know."""


class CountOverflowError(CommShimError):
    """A single post exceeded the transport's per-post byte limit."""

    def __init__(self, length: int, max_count: int):
        super().__init__(f"payload of {length} bytes exceeds max_count {max_count}; chunk it")
        self.length = length
        self.max_count = max_count


class TransferError(CommShimError):
    """A posted transfer failed; ``bytes_moved`` is what completed before the fault."""

    def __init__(self, message: str, bytes_moved: int = 0):
        super().__init__(message)
        self.bytes_moved = bytes_moved


class TruncationError(TransferError):
    """An incoming message was longer than the posted receive buffer."""


class CancelledTransferError(TransferError):
    """The transfer was cancelled before it matched."""


class ProtocolError(CommShimError):
    """Framed stream state disagrees with its header."""

    def __init__(self, message: str, expected: int | None = None, actual: int | None = None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class CommClosedError(CommShimError):
    """Operation attempted on a closed endpoint or connection."""


class EndOfStream(CommShimError):
    """Peer closed cleanly; not an error, but distinct from a payload."""


class ConnectRefused(CommShimError):
    """No listener answered the handshake within the timeout."""


class BusyError(CommShimError):
    """The resource still has pending transfers and cannot be released."""


class CorrectnessError(CommShimError):
    """A benchmark's result disagreed with its oracle; timings are not reported."""
