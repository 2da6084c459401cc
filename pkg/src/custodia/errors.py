"""Exception types shared across the package."""


class CustodiaError(Exception):
    """Base class for all package errors."""


class NotInvertible(CustodiaError):
    """Exponent has no multiplicative inverse modulo the group order."""


class DivisionByZero(CustodiaError):
    """Field division by zero."""


class AuthenticationFailure(CustodiaError):
    """Symmetric decryption failed: wrong key or tampered ciphertext."""


class DuplicatePatient(CustodiaError):
    pass


class UnknownPatient(CustodiaError):
    pass


class UnknownAnchor(CustodiaError):
    pass


class UnknownBlock(CustodiaError):
    pass


class ChainMismatch(CustodiaError):
    """Block does not extend the current ledger tail."""


class DuplicateAddress(CustodiaError):
    """Block address already present in the ledger index."""


class InvalidClaim(CustodiaError):
    """Active-identity claim does not match the block's claim tag."""


class ParityConstraintViolated(CustodiaError):
    """Block nonces do not satisfy the required hash-parity inequality."""


class DegenerateLine(CustodiaError):
    """Content line endpoints share an x coordinate; indicates a protocol bug."""


class StateExists(CustodiaError):
    """Refusing to bootstrap over a non-empty state directory."""


class StateCorrupted(CustodiaError):
    """Persisted state failed an integrity check."""


class ActionFailed(CustodiaError):
    """Requested action could not be executed; no ledger block was written."""


class ProtocolReject(CustodiaError):
    """Server rejected a protocol message with a typed code."""

    def __init__(self, code: int, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message
