"""Error taxonomy shared across the package.

Every error carries a stable wire code (its class name) and an HTTP status,
so service handlers can transport failures without string matching.
"""

from __future__ import annotations


class FleetError(Exception):
    http_status = 400

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_payload(self) -> dict:
        return {"error": self.code, "detail": str(self)}


# --- serialization ---------------------------------------------------------

class MalformedDocument(FleetError):
    """Input is not valid JSON or is missing a required field."""


class InvariantViolation(FleetError):
    """A parsed value breaks a domain-type invariant (e.g. test_percentage out of range)."""


# --- planner ---------------------------------------------------------------

class ValidationError(FleetError):
    """Pipeline rejected before any task exists; names the first offending kind."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(detail or kind)

    def to_payload(self) -> dict:
        return {"error": self.code, "kind": self.kind, "detail": str(self)}


class NoDataHolders(FleetError):
    http_status = 404


class UnassignableTask(FleetError):
    """A task needing inputs from other nodes targets a node that cannot be pushed to."""


# --- scheduler -------------------------------------------------------------

class DuplicateArtifact(FleetError):
    http_status = 409


class IllegalTransition(FleetError):
    http_status = 409


class UnknownTask(FleetError):
    http_status = 404


class UnknownNode(FleetError):
    http_status = 404


# --- identity / envelopes --------------------------------------------------

class EnvelopeError(FleetError):
    http_status = 401


class MalformedEnvelope(EnvelopeError):
    """Request body or header that is not a parseable envelope at all."""


class UnknownSender(EnvelopeError):
    pass


class SignatureInvalid(EnvelopeError):
    pass


class StaleTimestamp(EnvelopeError):
    pass


class ReplayDetected(EnvelopeError):
    pass


class DecryptFailed(EnvelopeError):
    pass


# --- node ------------------------------------------------------------------

class ConfigInvalid(FleetError):
    pass


class DataSourceMissing(FleetError):
    pass


class JoinRefused(FleetError):
    http_status = 403


class MalformedJoin(FleetError):
    pass


class UnknownProject(FleetError):
    http_status = 404


class NotYourTask(FleetError):
    http_status = 403


class UnknownResource(FleetError):
    http_status = 404


class Forbidden(FleetError):
    http_status = 403


class UnknownArtifact(FleetError):
    http_status = 404


class NotReady(FleetError):
    http_status = 409


# --- executor --------------------------------------------------------------

class UnknownInstruction(FleetError):
    pass


class SchemaMismatch(FleetError):
    pass


class NoLocalData(FleetError):
    pass


class LabelMissing(FleetError):
    pass


class EmptyTable(FleetError):
    pass


class EmptyTrainSet(FleetError):
    pass


class NoFeatures(FleetError):
    pass


class IncompatibleSchemas(FleetError):
    pass


class MissingFeature(FleetError):
    pass


class MissingModel(FleetError):
    pass


class UnknownRoute(FleetError):
    http_status = 404


# --- workbench / harness ---------------------------------------------------

class Unreachable(FleetError):
    http_status = 503


class HandshakeFailed(FleetError):
    http_status = 502


class SpawnFailed(FleetError):
    pass


class ScenarioTimeout(FleetError):
    pass


WIRE_ERRORS = {cls.__name__: cls for cls in list(globals().values())
               if isinstance(cls, type) and issubclass(cls, FleetError)}


def from_payload(payload: dict) -> FleetError:
    """Rebuild a FleetError from its wire payload; unknown codes become FleetError."""
    code = payload.get("error", "FleetError")
    detail = payload.get("detail", "")
    cls = WIRE_ERRORS.get(code, FleetError)
    if cls is ValidationError:
        return ValidationError(payload.get("kind", "?"), detail)
    return cls(detail)
