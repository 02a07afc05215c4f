"""Exception hierarchy shared by all pdmwh modules."""

from __future__ import annotations


class WarehouseError(Exception):
    """Base class for every pdmwh fault."""


# --- store ---------------------------------------------------------------

class ValidationFailed(WarehouseError):
    def __init__(self, relation: str, violations: list[str]):
        self.relation = relation
        self.violations = list(violations)
        super().__init__(f"{relation}: " + "; ".join(self.violations))


class FkViolation(WarehouseError):
    def __init__(self, relation: str, field: str, missing_id: int):
        self.relation = relation
        self.field = field
        self.missing_id = missing_id
        super().__init__(f"{relation}.{field} references missing id {missing_id}")


class UniqueViolation(WarehouseError):
    def __init__(self, relation: str, key_name: str, key_value):
        self.relation = relation
        self.key_name = key_name
        self.key_value = key_value
        super().__init__(f"{relation}: duplicate {key_name} = {key_value!r}")


class RestrictViolation(WarehouseError):
    """Delete refused because other rows still reference the target."""

    def __init__(self, relation: str, row_id: int, references: list[tuple[str, int, str]]):
        self.relation = relation
        self.row_id = row_id
        self.references = list(references)
        ref_text = ", ".join(f"{k}#{i}.{f}" for k, i, f in self.references)
        super().__init__(f"{relation}#{row_id} still referenced by {ref_text}")


class NotFound(WarehouseError):
    def __init__(self, relation: str, row_id: int):
        self.relation = relation
        self.row_id = row_id
        super().__init__(f"{relation}#{row_id} not found")


class ChecksumMismatch(WarehouseError):
    pass


class UnsupportedFormatVersion(WarehouseError):
    def __init__(self, version: int):
        self.version = version
        super().__init__(f"unsupported snapshot format version {version}")


class CorruptSnapshot(WarehouseError):
    pass


class CorruptJournal(WarehouseError):
    pass


# --- etl -----------------------------------------------------------------

class SourceUnreadable(WarehouseError):
    pass


class ParseError(WarehouseError):
    def __init__(self, line: int, detail: str):
        self.line = line
        self.detail = detail
        super().__init__(f"line {line}: {detail}")


class MergeConflict(WarehouseError):
    """Two non-empty values disagree on an immutable field. Values are never
    echoed back (they may be credentials)."""

    def __init__(self, relation: str, field: str, key):
        self.relation = relation
        self.field = field
        self.key = key
        super().__init__(f"{relation}: conflicting values for immutable field '{field}' (key {key!r})")


class LoadAborted(WarehouseError):
    def __init__(self, source_id: str, cause: Exception):
        self.source_id = source_id
        self.cause = cause
        super().__init__(f"load aborted for source '{source_id}': {cause}")


class ConfigError(WarehouseError):
    pass


# --- security ------------------------------------------------------------

class EmptyPassword(WarehouseError):
    pass


class AuthFailed(WarehouseError):
    """Raised for unknown user and wrong password alike (no user enumeration)."""

    def __init__(self):
        super().__init__("invalid credentials")


class SessionUnknown(WarehouseError):
    pass


class SessionExpired(WarehouseError):
    pass


# --- jobcontrol ----------------------------------------------------------

class InvalidSpec(WarehouseError):
    pass


class SinkUnavailable(WarehouseError):
    pass
