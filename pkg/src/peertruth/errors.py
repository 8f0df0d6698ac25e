"""Exception hierarchy shared by the scoring, ledger and simulation modules."""


class PeerTruthError(Exception):
    """Base class for every error raised by this package."""


class InsufficientCorpus(PeerTruthError):
    """No other rated item is available to build a frequency sample."""


class EmptyTrainingSet(PeerTruthError):
    pass


class SchemaMismatch(PeerTruthError):
    pass


class UnresolvedEvent(PeerTruthError):
    pass


class NoBenchmarkData(PeerTruthError):
    pass


class LedgerError(PeerTruthError):
    """Raised when an event cannot be appended to the log."""


class SequenceGap(LedgerError):
    pass


class InvalidPayload(LedgerError):
    pass


class UnauthorizedReset(LedgerError):
    pass


class UnknownQuestion(LedgerError):
    pass


class DuplicateAccount(LedgerError):
    pass


class InsufficientBalance(LedgerError):
    pass


class BidExhausted(LedgerError):
    pass


class SelfDealing(LedgerError):
    pass


class BountyClosed(LedgerError):
    pass


class BelowThreshold(LedgerError):
    pass


class LogFormatError(PeerTruthError):
    """A log line could not be parsed; carries the 1-based line number and seq if known."""

    def __init__(self, message: str, line: int, seq=None):
        where = f"line {line}" + (f" (seq {seq})" if seq is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.seq = seq
