"""Exception hierarchy.

Numerical failures map to CLI exit code 2, transport failures to exit code 3,
usage/config/parse failures to exit code 1.
"""


class LRDSError(Exception):
    """Base class for all errors raised by this package."""


# -- numerical ---------------------------------------------------------------

class NumericalError(LRDSError):
    pass


class NotPositiveDefinite(NumericalError):
    def __init__(self, pivot_index, context=""):
        self.pivot_index = pivot_index
        self.context = context
        msg = f"matrix not positive definite (pivot {pivot_index})"
        if context:
            msg += f": {context}"
        super().__init__(msg)


class DimensionMismatch(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class RankMismatch(NumericalError):
    pass


class DegenerateWeights(NumericalError):
    pass


class MissingTimeStep(NumericalError):
    def __init__(self, t):
        self.t = t
        super().__init__(f"no summaries for time step {t}")


# -- model / usage -----------------------------------------------------------

class UsageError(LRDSError):
    pass


class SpecError(UsageError):
    pass


class CapExceeded(UsageError):
    pass


class ConfigError(UsageError):
    pass


class ParseError(UsageError):
    def __init__(self, line, column, reason):
        self.line = line
        self.column = column
        self.reason = reason
        super().__init__(f"line {line}, column {column}: {reason}")


# -- transport ---------------------------------------------------------------

class TransportError(LRDSError):
    pass


class FrameError(TransportError):
    pass


class ChecksumMismatch(FrameError):
    pass


class UnknownVersion(FrameError):
    pass


class UnknownMsgType(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class WorkerFailure(TransportError):
    def __init__(self, server_id, reason=""):
        self.server_id = server_id
        self.reason = reason
        super().__init__(f"worker {server_id} failed" + (f": {reason}" if reason else ""))


class Timeout(WorkerFailure):
    def __init__(self, server_id, seconds=None):
        self.seconds = seconds
        super().__init__(server_id, f"no reply within {seconds} s")


class ConnectionLost(WorkerFailure):
    def __init__(self, server_id, reason="connection closed"):
        super().__init__(server_id, reason)
