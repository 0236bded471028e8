"""Error hierarchy shared by the protocol, the simulator and the harness.

Every error carries a stable ``code`` so it can cross the wire inside an
``ERROR`` message and be matched by the receiving agent.
"""
from __future__ import annotations


class ProtocolError(Exception):
    code = "ProtocolError"

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail or self.code)
        self.detail = detail


class EmptyKeyMaterial(ProtocolError):
    code = "EmptyKeyMaterial"


class MacMismatch(ProtocolError):
    """Tag did not verify; raised before any decryption is attempted."""

    code = "MacMismatch"


class BadPadding(ProtocolError):
    """Padding invalid after a MAC that verified. Indicates an implementation fault."""

    code = "BadPadding"


class NotFound(ProtocolError):
    code = "NotFound"


class DimensionMismatch(ProtocolError):
    code = "DimensionMismatch"


class MalformedAuthString(ProtocolError):
    code = "MalformedAuthString"


class MalformedMessage(ProtocolError):
    code = "MalformedMessage"

    def __init__(self, path: str, detail: str = "") -> None:
        super().__init__(f"{path}: {detail}" if detail else path)
        self.path = path


class DuplicateEmail(ProtocolError):
    code = "DuplicateEmail"


class RegistrationAborted(ProtocolError):
    code = "RegistrationAborted"


class InvalidState(ProtocolError):
    code = "InvalidState"


class UnknownEmail(ProtocolError):
    code = "UnknownEmail"


class SessionAlreadyActive(ProtocolError):
    code = "SessionAlreadyActive"


class IdentificationFailed(ProtocolError):
    code = "IdentificationFailed"


class NoMatchingUser(ProtocolError):
    code = "NoMatchingUser"


class BiometricMismatch(ProtocolError):
    code = "BiometricMismatch"


class SessionExpired(ProtocolError):
    code = "SessionExpired"


class TokenMismatch(ProtocolError):
    code = "TokenMismatch"


class TokenAlreadyConsumed(ProtocolError):
    code = "TokenAlreadyConsumed"


class LoginFailed(ProtocolError):
    code = "LoginFailed"


class NotInProximity(ProtocolError):
    code = "NotInProximity"


class NothingStaged(ProtocolError):
    code = "NothingStaged"


class Bt1NotFound(ProtocolError):
    code = "Bt1NotFound"


class UnknownDevice(ProtocolError):
    code = "UnknownDevice"


class UnknownLocation(ProtocolError):
    code = "UnknownLocation"


class ScenarioError(ProtocolError):
    code = "ScenarioError"


class MalformedTranscript(ProtocolError):
    code = "MalformedTranscript"


ERROR_CODES: dict[str, type[ProtocolError]] = {
    cls.code: cls
    for cls in (
        ProtocolError,
        EmptyKeyMaterial,
        MacMismatch,
        BadPadding,
        NotFound,
        DimensionMismatch,
        MalformedAuthString,
        MalformedMessage,
        DuplicateEmail,
        RegistrationAborted,
        InvalidState,
        UnknownEmail,
        SessionAlreadyActive,
        IdentificationFailed,
        NoMatchingUser,
        BiometricMismatch,
        SessionExpired,
        TokenMismatch,
        TokenAlreadyConsumed,
        LoginFailed,
        NotInProximity,
        NothingStaged,
        Bt1NotFound,
        UnknownDevice,
        UnknownLocation,
        ScenarioError,
        MalformedTranscript,
    )
}
