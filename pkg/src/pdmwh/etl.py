"""Extraction, transformation, and cyclic loading.

Stage order: extract -> cleanse -> convert -> integrate -> load, with a
stage ledger (input = passed + quarantined, consecutive stages chaining) kept
in source-row units throughout. Bad rows are quarantined with a reason, never
dropped silently; only the load step itself is all-or-nothing per source.

A source row for a composite target (staff, project, ...) expands into a
bundle of normalized records. Lookup rows (names, contacts, type codes, date
ranges) are content-addressed: a rerun of the same file resolves every bundle
back to the stored rows and loads nothing, which is what makes repeated
cycles idempotent. References to other entities resolve by business key
(username, project name, document title); organisations named by ingest rows
are created on first sight with a minimal record.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from . import schema
from .clock import SystemClock
from .errors import (
    ConfigError, LoadAborted, MergeConflict, ParseError, SourceUnreadable,
    WarehouseError,
)
from .schema import (
    Activity, Association, AssociationKind, Contact, ContactCity,
    ContactTelephone, ContactWeb, CityCountry, CityState, Document, Login,
    Meeting, Name, Organisation, Permission, Person, Product, Project,
    ProjectState, Staff, StartEndDate, TypeCode, TypeDomain,
)
from .security import hash_password, verify_password
from .store import Warehouse

__all__ = [
    "SourceDescriptor", "RawBatch", "QuarantineEntry", "StageCount",
    "LoadReport", "EtlState", "IntegrationPlan",
    "extract", "cleanse", "convert", "integrate", "load", "run_pipeline",
    "denormalize", "aggregate", "write_quarantine",
    "normalize_date", "normalize_ts", "STAGES",
]

STAGES = ("extract", "cleanse", "convert", "integrate", "load")


# --- descriptors and reports -------------------------------------------------

@dataclass
class SourceDescriptor:
    source_id: str
    format: str                      # "csv" | "json_lines"
    location: Path
    target_relation: str             # composite target or plain relation kind
    field_map: dict[str, str] = field(default_factory=dict)   # field -> column
    watermark: int = 0               # data rows already extracted

    def column_for(self, field_name: str) -> str:
        return self.field_map.get(field_name, field_name)


@dataclass
class RawBatch:
    source_id: str
    rows: list[dict]                 # in source order
    extracted_at: datetime


@dataclass(frozen=True)
class QuarantineEntry:
    stage: str
    row: dict                        # secrets already redacted
    reason: str
    row_count: int = 1               # folded source rows this entry stands for


@dataclass
class StageCount:
    input: int = 0
    passed: int = 0
    quarantined: int = 0
    merged: int = 0


@dataclass
class LoadReport:
    source_id: str
    cycle_number: int
    stages: dict[str, StageCount] = field(default_factory=dict)
    quarantine: list[QuarantineEntry] = field(default_factory=list)
    loaded_ids: list[tuple[str, int]] = field(default_factory=list)
    inserted: int = 0                # record-level counts
    updated: int = 0
    unchanged: int = 0
    aborted: bool = False
    abort_reason: str = ""

    def ledger_ok(self) -> bool:
        prev_passed = None
        for stage in STAGES:
            if stage not in self.stages:
                continue
            if stage == "load" and self.aborted:
                break
            c = self.stages[stage]
            if c.input != c.passed + c.quarantined:
                return False
            if prev_passed is not None and c.input != prev_passed:
                return False
            prev_passed = c.passed
        return True


@dataclass
class EtlState:
    """Watermarks and the cycle counter, persisted between pipeline runs."""
    cycle_number: int = 0
    watermarks: dict[str, int] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "EtlState":
        p = Path(path)
        if not p.exists():
            return cls()
        obj = json.loads(p.read_text(encoding="utf-8"))
        return cls(cycle_number=obj.get("cycle_number", 0),
                   watermarks=dict(obj.get("watermarks", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {"cycle_number": self.cycle_number, "watermarks": self.watermarks},
            sort_keys=True, indent=2) + "\n", encoding="utf-8")


# --- extraction ----------------------------------------------------------------

def extract(source: SourceDescriptor, clock=None) -> RawBatch:
    """Read rows past the stored watermark; advance it only on success."""
    clock = clock if clock is not None else SystemClock()
    path = Path(source.location)
    if not path.is_file():
        raise SourceUnreadable(f"source '{source.source_id}': no such file {path}")
    if source.format == "csv":
        rows = _read_csv(path)
    elif source.format == "json_lines":
        rows = _read_jsonl(path)
    else:
        raise SourceUnreadable(f"source '{source.source_id}': unknown format {source.format!r}")
    fresh = rows[source.watermark:]
    source.watermark += len(fresh)
    return RawBatch(source.source_id, fresh, clock.now())


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader, None)
            if header is None:
                return []
            out = []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(reader.line_num,
                                     f"expected {len(header)} fields, got {len(row)}")
                out.append(dict(zip(header, (v for v in row))))
            return out
        except csv.Error as exc:
            raise ParseError(reader.line_num, str(exc)) from exc


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, exc.msg) from exc
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected one JSON object per line")
            out.append({k: ("" if v is None else v if isinstance(v, str) else str(v))
                        for k, v in obj.items()})
    return out


# --- date/time normalization -----------------------------------------------------

_DATE_FORMATS = ("%Y-%m-%d", "%d %B %Y", "%d %b %Y", "%B %d, %Y", "%b %d, %Y",
                 "%d.%m.%Y", "%Y/%m/%d")
_TIME_SUFFIXES = ("T%H:%M:%S", " %H:%M:%S", "T%H:%M", " %H:%M")


def normalize_date(text: str) -> Optional[str]:
    """Normalize a date string to ISO-8601 (YYYY-MM-DD); None if unparseable."""
    cleaned = text.strip()
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(cleaned, fmt).date().isoformat()
        except ValueError:
            continue
    return None


def normalize_ts(text: str) -> Optional[str]:
    """Normalize a timestamp to YYYY-MM-DDTHH:MM:SS (UTC, date-only means
    midnight); None if unparseable."""
    cleaned = text.strip().removesuffix("Z").removesuffix("+00:00")
    for date_fmt in _DATE_FORMATS:
        for time_fmt in ("",) + _TIME_SUFFIXES:
            try:
                dt = datetime.strptime(cleaned, date_fmt + time_fmt)
                return dt.strftime("%Y-%m-%dT%H:%M:%S")
            except ValueError:
                continue
    return None


def _parse_iso_ts(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S").replace(tzinfo=timezone.utc)


_WS_COLLAPSE = " ".join


def _collapse_ws(text: str) -> str:
    return _WS_COLLAPSE(text.split())


# --- ingest targets ---------------------------------------------------------------

@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str = "text"      # text | name | email | date | ts | secret
    required: bool = False


_CONTACT_FIELDS = (
    FieldSpec("email", "email"), FieldSpec("url"),
    FieldSpec("mobile"), FieldSpec("fax"), FieldSpec("telephone"),
    FieldSpec("city_name", "name"), FieldSpec("city_code"),
    FieldSpec("country", "name"), FieldSpec("state", "name"),
)


@dataclass(frozen=True)
class IngestTarget:
    name: str
    fields: tuple[FieldSpec, ...]
    build: Callable                        # (_RowBuilder, row) -> None
    merge_key: Callable[[dict], tuple]
    immutable: tuple[str, ...] = ()        # flat fields that must agree when folding

    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def secret_fields(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields if f.kind == "secret")


class BuildError(WarehouseError):
    """Row-level conversion problem; the row goes to quarantine."""


def redact_row(row: dict, secret_fields: tuple[str, ...]) -> dict:
    return {k: ("***" if k in secret_fields and v else v) for k, v in row.items()}


# --- row -> record-bundle conversion ----------------------------------------------

@dataclass
class Pending:
    ph: int
    record: object
    provided: frozenset = frozenset()
    is_main: bool = False


@dataclass
class Require:
    ph: int
    strategy: str        # staff_by_username | project_by_name | document_by_title
                         # | meeting_by_subject | organisation_by_name
    key: str
    what: str            # message fragment for quarantine reasons


@dataclass
class RowBundle:
    target: str
    row: dict
    row_count: int = 1
    pendings: list[Pending] = field(default_factory=list)
    requires: list[Require] = field(default_factory=list)
    secrets: dict[str, str] = field(default_factory=dict)
    merge_key: tuple = ()


class _RowBuilder:
    """Accumulates one row's pending records, allocating placeholder ids
    (negative ints, batch-local) for not-yet-stored rows."""

    def __init__(self, alloc: Callable[[], int], clock, target: IngestTarget, row: dict):
        self.alloc = alloc
        self.clock = clock
        self.target = target
        self.row = row
        self.bundle = RowBundle(target=target.name, row=dict(row),
                                merge_key=target.merge_key(row))

    def pend(self, record, provided=(), is_main=False) -> int:
        ph = self.alloc()
        schema.set_record_id(record, ph)
        self.bundle.pendings.append(
            Pending(ph, record, frozenset(provided), is_main))
        return ph

    def require(self, strategy: str, key: str, what: str) -> int:
        ph = self.alloc()
        self.bundle.requires.append(Require(ph, strategy, key, what))
        return ph

    # shared lookup builders ------------------------------------------------

    def name(self, text: str) -> int:
        return self.pend(Name(text=text))

    def type_code(self, domain: TypeDomain, code: str, label: str = "") -> int:
        return self.pend(TypeCode(domain=domain, code=code, label=label or code))

    def sed(self, start_iso: str, end_iso: str) -> int:
        end = _parse_iso_ts(end_iso) if end_iso else None
        return self.pend(StartEndDate(start_ts=_parse_iso_ts(start_iso), end_ts=end))

    def organisation_ref(self, org_name: str) -> int:
        """Reference-or-create: unknown organisations get a minimal record."""
        name_ph = self.name(org_name)
        type_ph = self.type_code(TypeDomain.ORGANIZATION, "GEN", "General")
        return self.pend(Organisation(name_id=name_ph, type_id=type_ph))

    def contact(self) -> Optional[int]:
        row = self.row
        web = tel = city = None
        if row.get("email") or row.get("url"):
            web = ContactWeb(email=row.get("email", ""), url=row.get("url", ""))
        if row.get("mobile") or row.get("fax") or row.get("telephone"):
            tel = ContactTelephone(mobile=row.get("mobile", ""),
                                   fax=row.get("fax", ""),
                                   telephone=row.get("telephone", ""))
        if row.get("city_name"):
            if not row.get("country"):
                raise BuildError("city contact needs a country")
            country_ph = self.pend(CityCountry(country_name=row["country"]))
            state_ph = None
            if row.get("state"):
                state_ph = self.pend(CityState(state_name=row["state"],
                                               country_id=country_ph))
            city = ContactCity(city_name=row["city_name"],
                               code=row.get("city_code", ""),
                               state_id=state_ph, country_id=country_ph)
        if web is None and tel is None and city is None:
            return None
        return self.pend(Contact(web=web, telephone=tel, city=city))

    def person(self) -> int:
        row = self.row
        name_ph = self.name(row["name"])
        org_ph = self.organisation_ref(row["org"])
        contact_ph = self.contact()
        provided = {"name_id", "org_id"} | ({"contact_id"} if contact_ph else set())
        return self.pend(Person(name_id=name_ph, org_id=org_ph, contact_id=contact_ph),
                         provided=provided, is_main=True)


def _provided_texts(row: dict, *fields: str) -> set[str]:
    return {f for f in fields if row.get(f)}


def _parse_rights(text: str) -> frozenset[Permission]:
    if not text:
        return frozenset()
    for sep in (";", "|"):
        text = text.replace(sep, ",")
    out = set()
    for token in filter(None, (t.strip() for t in text.split(","))):
        try:
            out.add(Permission(token.lower()))
        except ValueError:
            allowed = ", ".join(p.value for p in Permission)
            raise BuildError(f"unknown right '{token}' (expected: {allowed})") from None
    return frozenset(out)


def _build_organisation(b: _RowBuilder, row: dict) -> None:
    name_ph = b.name(row["name"])
    type_ph = b.type_code(TypeDomain.ORGANIZATION, row.get("type_code") or "GEN",
                          "General" if not row.get("type_code") else "")
    contact_ph = b.contact()
    provided = {"name_id"}
    if row.get("type_code"):
        provided.add("type_id")
    if contact_ph:
        provided.add("contact_id")
    b.pend(Organisation(name_id=name_ph, type_id=type_ph, contact_id=contact_ph),
           provided=provided, is_main=True)


def _build_person(b: _RowBuilder, row: dict) -> None:
    b.person()


def _build_staff(b: _RowBuilder, row: dict) -> None:
    person_ph = b.person()
    rights = _parse_rights(row.get("rights", ""))
    provided = {"person_id"} | _provided_texts(row, "role", "responsibilities") \
        | ({"group_name"} if row.get("group") else set()) \
        | ({"rights"} if row.get("rights") else set())
    staff_ph = b.pend(Staff(person_id=person_ph, role=row.get("role", ""),
                            responsibilities=row.get("responsibilities", ""),
                            group_name=row.get("group", ""), rights=rights),
                      provided=provided, is_main=True)
    if row.get("username"):
        if not row.get("password"):
            raise BuildError("missing required field password (username given)")
        b.bundle.secrets["password"] = row["password"]
        b.pend(Login(staff_id=staff_ph, username=row["username"],
                     password_hash=hash_password(row["password"]),
                     created_ts=b.clock.now()),
               provided={"staff_id", "username", "password_hash"}, is_main=True)


def _build_project(b: _RowBuilder, row: dict) -> None:
    name_ph = b.name(row["name"])
    org_ph = b.organisation_ref(row["org"])
    type_ph = b.type_code(TypeDomain.PROJECT, row.get("type_code") or "GEN",
                          "General" if not row.get("type_code") else "")
    sed_ph = b.sed(row["start_date"], row.get("end_date", ""))
    owner_ph = b.require("staff_by_username", row["owner_username"],
                         f"staff with username '{row['owner_username']}'")
    try:
        state = ProjectState(row.get("state", "").lower() or "planned")
    except ValueError:
        allowed = ", ".join(s.value for s in ProjectState)
        raise BuildError(f"state must be one of: {allowed}") from None
    deadline = None
    if row.get("deadline"):
        deadline = datetime.strptime(row["deadline"], "%Y-%m-%d").date()
    provided = {"name_id", "org_id", "sed_id", "owner_staff_id"} \
        | _provided_texts(row, "category", "status", "state") \
        | ({"type_id"} if row.get("type_code") else set()) \
        | ({"deadline"} if deadline else set())
    b.pend(Project(name_id=name_ph, org_id=org_ph, type_id=type_ph, sed_id=sed_ph,
                   owner_staff_id=owner_ph, category=row.get("category", ""),
                   state=state, status=row.get("status", ""), deadline=deadline),
           provided=provided, is_main=True)


def _build_product(b: _RowBuilder, row: dict) -> None:
    name_ph = b.name(row["name"])
    org_ph = b.organisation_ref(row["org"])
    type_ph = b.type_code(TypeDomain.PRODUCT, row.get("type_code") or "GEN",
                          "General" if not row.get("type_code") else "")
    project_ph = None
    if row.get("project"):
        project_ph = b.require("project_by_name", row["project"],
                               f"project named '{row['project']}'")
    release = None
    if row.get("release_date"):
        release = datetime.strptime(row["release_date"], "%Y-%m-%d").date()
    provided = {"name_id", "org_id"} | _provided_texts(row, "notes") \
        | ({"type_id"} if row.get("type_code") else set()) \
        | ({"project_id"} if project_ph else set()) \
        | ({"release_date"} if release else set())
    b.pend(Product(name_id=name_ph, org_id=org_ph, type_id=type_ph,
                   project_id=project_ph, release_date=release,
                   notes=row.get("notes", "")),
           provided=provided, is_main=True)


def _build_document(b: _RowBuilder, row: dict) -> None:
    type_ph = b.type_code(TypeDomain.DOCUMENT, row.get("type_code") or "DOC",
                          "Document" if not row.get("type_code") else "")
    provided = {"title", "created_ts"} | _provided_texts(row, "content_ref") \
        | ({"type_id"} if row.get("type_code") else set())
    b.pend(Document(type_id=type_ph, title=row["title"],
                    created_ts=_parse_iso_ts(row["created"]),
                    content_ref=row.get("content_ref", "")),
           provided=provided, is_main=True)


def _build_meeting(b: _RowBuilder, row: dict) -> None:
    sed_ph = b.sed(row["start"], row.get("end", ""))
    project_ph = None
    if row.get("project"):
        project_ph = b.require("project_by_name", row["project"],
                               f"project named '{row['project']}'")
    provided = {"sed_id", "subject"} | ({"project_id"} if project_ph else set())
    b.pend(Meeting(project_id=project_ph, sed_id=sed_ph, subject=row["subject"]),
           provided=provided, is_main=True)


def _build_activity(b: _RowBuilder, row: dict) -> None:
    staff_ph = b.require("staff_by_username", row["username"],
                         f"staff with username '{row['username']}'")
    project_ph = None
    if row.get("project"):
        project_ph = b.require("project_by_name", row["project"],
                               f"project named '{row['project']}'")
    provided = {"staff_id", "description", "ts"} | ({"project_id"} if project_ph else set())
    b.pend(Activity(project_id=project_ph, staff_id=staff_ph,
                    description=row["description"], ts=_parse_iso_ts(row["ts"])),
           provided=provided, is_main=True)


_ASSOC_REQUIRES = {
    AssociationKind.STAFF_DOCUMENT: ("staff_by_username", "document_by_title"),
    AssociationKind.ORGANISATION_DOCUMENT: ("organisation_by_name", "document_by_title"),
    AssociationKind.PROJECT_DOCUMENT: ("project_by_name", "document_by_title"),
    AssociationKind.STAFF_MEETING: ("staff_by_username", "meeting_by_subject"),
    AssociationKind.PROJECT_TEAM: ("project_by_name", "staff_by_username"),
}

_STRATEGY_WHAT = {
    "staff_by_username": "staff with username",
    "project_by_name": "project named",
    "document_by_title": "document titled",
    "meeting_by_subject": "meeting with subject",
    "organisation_by_name": "organisation named",
}


def _build_association(b: _RowBuilder, row: dict) -> None:
    try:
        kind = AssociationKind(row["kind"].lower())
    except ValueError:
        allowed = ", ".join(k.value for k in AssociationKind)
        raise BuildError(f"kind must be one of: {allowed}") from None
    left_strategy, right_strategy = _ASSOC_REQUIRES[kind]
    left_ph = b.require(left_strategy, row["left"],
                        f"{_STRATEGY_WHAT[left_strategy]} '{row['left']}'")
    right_ph = b.require(right_strategy, row["right"],
                         f"{_STRATEGY_WHAT[right_strategy]} '{row['right']}'")
    provided = {"kind", "left_id", "right_id"} | _provided_texts(row, "role_note")
    b.pend(Association(kind=kind, left_id=left_ph, right_id=right_ph,
                       role_note=row.get("role_note") or None),
           provided=provided, is_main=True)


def _build_type_code(b: _RowBuilder, row: dict) -> None:
    try:
        domain = TypeDomain(row["domain"].lower())
    except ValueError:
        allowed = ", ".join(d.value for d in TypeDomain)
        raise BuildError(f"domain must be one of: {allowed}") from None
    provided = {"domain", "code"} | _provided_texts(row, "label")
    b.pend(TypeCode(domain=domain, code=row["code"], label=row.get("label") or row["code"]),
           provided=provided, is_main=True)


def _person_key(row: dict) -> tuple:
    return (row.get("org", ""), row.get("name", ""), row.get("email", ""))


TARGETS: dict[str, IngestTarget] = {t.name: t for t in [
    IngestTarget(
        "organisation",
        (FieldSpec("name", "name", required=True), FieldSpec("type_code"))
        + _CONTACT_FIELDS,
        _build_organisation,
        lambda row: ("organisation", row.get("name", "")),
    ),
    IngestTarget(
        "person",
        (FieldSpec("name", "name", required=True),
         FieldSpec("org", "name", required=True)) + _CONTACT_FIELDS,
        _build_person,
        lambda row: ("person",) + _person_key(row),
    ),
    IngestTarget(
        "staff",
        (FieldSpec("name", "name", required=True),
         FieldSpec("org", "name", required=True)) + _CONTACT_FIELDS
        + (FieldSpec("role"), FieldSpec("responsibilities"), FieldSpec("group"),
           FieldSpec("rights"), FieldSpec("username"), FieldSpec("password", "secret")),
        _build_staff,
        lambda row: ("staff", row["username"]) if row.get("username")
        else ("staff",) + _person_key(row),
        immutable=("password",),
    ),
    IngestTarget(
        "project",
        (FieldSpec("name", "name", required=True),
         FieldSpec("org", "name", required=True), FieldSpec("type_code"),
         FieldSpec("category"), FieldSpec("state"), FieldSpec("status"),
         FieldSpec("start_date", "ts", required=True), FieldSpec("end_date", "ts"),
         FieldSpec("deadline", "date"),
         FieldSpec("owner_username", required=True)),
        _build_project,
        lambda row: ("project", row.get("org", ""), row.get("name", "")),
    ),
    IngestTarget(
        "product",
        (FieldSpec("name", "name", required=True),
         FieldSpec("org", "name", required=True), FieldSpec("type_code"),
         FieldSpec("project"), FieldSpec("release_date", "date"), FieldSpec("notes")),
        _build_product,
        lambda row: ("product", row.get("org", ""), row.get("name", "")),
    ),
    IngestTarget(
        "document",
        (FieldSpec("title", "name", required=True), FieldSpec("type_code"),
         FieldSpec("created", "ts", required=True), FieldSpec("content_ref")),
        _build_document,
        lambda row: ("document", row.get("title", "")),
    ),
    IngestTarget(
        "meeting",
        (FieldSpec("subject", "name", required=True), FieldSpec("project"),
         FieldSpec("start", "ts", required=True), FieldSpec("end", "ts")),
        _build_meeting,
        lambda row: ("meeting", row.get("subject", ""), row.get("start", "")),
    ),
    IngestTarget(
        "activity",
        (FieldSpec("username", required=True), FieldSpec("project"),
         FieldSpec("description", required=True), FieldSpec("ts", "ts", required=True)),
        _build_activity,
        lambda row: ("activity", row.get("username", ""), row.get("ts", ""),
                     row.get("description", "")),
    ),
    IngestTarget(
        "association",
        (FieldSpec("kind", required=True), FieldSpec("left", required=True),
         FieldSpec("right", required=True), FieldSpec("role_note")),
        _build_association,
        lambda row: ("association", row.get("kind", ""), row.get("left", ""),
                     row.get("right", "")),
    ),
    IngestTarget(
        "type_code",
        (FieldSpec("domain", required=True), FieldSpec("code", required=True),
         FieldSpec("label")),
        _build_type_code,
        lambda row: ("type_code", row.get("domain", ""), row.get("code", "")),
    ),
]}


def _literal_target(kind: str) -> IngestTarget:
    """Plain relation target: columns carry literal field values, FK columns
    carry integer ids. Contact is composite-only (nested sub-records)."""
    if kind == "contact":
        raise ConfigError("target 'contact' is ingested through its owning entity")
    rel = schema.RELATIONS[kind]
    import typing as _t
    hints = _t.get_type_hints(rel.cls)
    specs = []
    for f in schema.record_fields(rel.cls()).keys():
        if f == rel.pk:
            continue
        hint = hints[f]
        origin = _t.get_origin(hint)
        optional = origin is _t.Union and type(None) in _t.get_args(hint)
        base = next((a for a in _t.get_args(hint) if a is not type(None)), hint) \
            if optional else hint
        if base is datetime:
            specs.append(FieldSpec(f, "ts", required=not optional))
        elif base is date:
            specs.append(FieldSpec(f, "date", required=False))
        elif base is int:
            specs.append(FieldSpec(f, "text", required=not optional))
        else:
            specs.append(FieldSpec(f, "text", required=False))

    def build(b: _RowBuilder, row: dict) -> None:
        record = rel.cls()
        provided = set()
        for spec in specs:
            raw = row.get(spec.name, "")
            if raw == "":
                continue
            provided.add(spec.name)
            setattr(record, spec.name, _coerce_literal(hints[spec.name], spec, raw))
        b.pend(record, provided=provided, is_main=True)

    def merge_key(row: dict) -> tuple:
        return (kind,) + tuple(row.get(s.name, "") for s in specs)

    return IngestTarget(kind, tuple(specs), build, merge_key)


def _coerce_literal(hint, spec: FieldSpec, raw: str):
    import typing as _t
    if _t.get_origin(hint) is _t.Union:
        hint = next(a for a in _t.get_args(hint) if a is not type(None))
    try:
        if hint is int:
            return int(raw)
        if hint is datetime:
            return _parse_iso_ts(raw)
        if hint is date:
            return datetime.strptime(raw, "%Y-%m-%d").date()
        if _t.get_origin(hint) is frozenset:
            return _parse_rights(raw)
        if isinstance(hint, type) and issubclass(hint, Enum):
            return hint(raw.lower())
    except (ValueError, KeyError) as exc:
        raise BuildError(f"bad value for {spec.name}: {exc}") from None
    return raw


def target_for(descriptor: SourceDescriptor) -> IngestTarget:
    name = descriptor.target_relation
    if name in TARGETS:
        return TARGETS[name]
    if name in schema.RELATIONS:
        return _literal_target(name)
    raise ConfigError(f"unknown target relation '{name}'")


def validate_descriptor(descriptor: SourceDescriptor) -> None:
    target = target_for(descriptor)
    known = set(target.field_names())
    for field_name in descriptor.field_map:
        if field_name not in known:
            raise ConfigError(
                f"source '{descriptor.source_id}': '{field_name}' is not a field of "
                f"target '{target.name}'")


# --- cleanse -----------------------------------------------------------------

def cleanse(batch: RawBatch, descriptor: SourceDescriptor
            ) -> tuple[RawBatch, list[QuarantineEntry]]:
    """Trim and collapse whitespace, normalize dates to ISO-8601, lowercase
    emails; rows missing a required field are quarantined, not dropped."""
    target = target_for(descriptor)
    secrets = target.secret_fields()
    cleaned_rows: list[dict] = []
    quarantine: list[QuarantineEntry] = []
    for raw in batch.rows:
        row: dict = {}
        problem = None
        for spec in target.fields:
            value = raw.get(descriptor.column_for(spec.name), "")
            value = value.strip() if isinstance(value, str) else str(value)
            if value:
                if spec.kind == "name":
                    value = _collapse_ws(value)
                elif spec.kind == "email":
                    value = value.lower()
                elif spec.kind == "date":
                    normalized = normalize_date(value)
                    if normalized is None:
                        problem = problem or f"unparseable date in field {spec.name}: '{value}'"
                    value = normalized or value
                elif spec.kind == "ts":
                    normalized = normalize_ts(value)
                    if normalized is None:
                        problem = problem or f"unparseable timestamp in field {spec.name}: '{value}'"
                    value = normalized or value
            row[spec.name] = value
        if problem is None:
            for spec in target.fields:
                if spec.required and not row[spec.name]:
                    problem = f"missing required field {spec.name}"
                    break
        if problem is not None:
            quarantine.append(QuarantineEntry("cleanse", redact_row(row, secrets), problem))
        else:
            cleaned_rows.append(row)
    return RawBatch(batch.source_id, cleaned_rows, batch.extracted_at), quarantine


# --- convert -----------------------------------------------------------------

def convert(batch: RawBatch, descriptor: SourceDescriptor, clock=None
            ) -> tuple[list[RowBundle], list[QuarantineEntry]]:
    """Expand each cleansed row into validated records (with batch-local
    placeholder ids); rows whose records fail validation are quarantined."""
    clock = clock if clock is not None else SystemClock()
    target = target_for(descriptor)
    secrets = target.secret_fields()
    counter = iter(range(-1, -10_000_000, -1))
    bundles: list[RowBundle] = []
    quarantine: list[QuarantineEntry] = []
    for row in batch.rows:
        try:
            bundle = _convert_row(target, row, lambda: next(counter), clock)
        except BuildError as exc:
            quarantine.append(QuarantineEntry("convert", redact_row(row, secrets), str(exc)))
            continue
        bundles.append(bundle)
    return bundles, quarantine


def _convert_row(target: IngestTarget, row: dict, alloc, clock) -> RowBundle:
    builder = _RowBuilder(alloc, clock, target, row)
    target.build(builder, row)
    for pending in builder.bundle.pendings:
        result = schema.validate_record(_masked_for_validation(pending.record))
        if not result.ok:
            raise BuildError("; ".join(result.violations))
    return builder.bundle


def _masked_for_validation(record):
    """Clone with placeholder FKs swapped for a dummy positive id so value
    checks run; FK existence is the store's concern anyway."""
    clone = replace(record) if not isinstance(record, Contact) else _clone_contact(record)
    for ref in schema.foreign_keys(clone):
        if ref.value is not None and ref.value < 0:
            _set_field(clone, ref.field, 1)
    pk = schema.record_id(clone)
    if pk < 0:
        schema.set_record_id(clone, 0)
    return clone


def _clone_contact(record: Contact) -> Contact:
    return Contact(contact_id=record.contact_id,
                   web=replace(record.web) if record.web else None,
                   telephone=replace(record.telephone) if record.telephone else None,
                   city=replace(record.city) if record.city else None)


def _get_field(record, path: str):
    obj = record
    *head, last = path.split(".")
    for part in head:
        obj = getattr(obj, part)
        if obj is None:
            return None
    return getattr(obj, last)


def _set_field(record, path: str, value) -> None:
    obj = record
    *head, last = path.split(".")
    for part in head:
        obj = getattr(obj, part)
    setattr(obj, last, value)


# --- integrate -----------------------------------------------------------------

@dataclass
class PlannedPut:
    kind: str
    record: object
    ph: Optional[int]              # placeholder satisfied by this put
    existing_id: Optional[int]     # update target, None for insert
    changed: tuple[str, ...]
    is_main: bool


@dataclass
class IntegrationPlan:
    puts: list[PlannedPut] = field(default_factory=list)
    merged_rows: int = 0
    unchanged: int = 0
    row_count: int = 0             # source rows that passed integration


class _IntegrationContext:
    """Lazy natural-key indexes over the warehouse plus this batch's aliases."""

    def __init__(self, warehouse: Warehouse):
        self.warehouse = warehouse
        self._nk_index: dict[str, dict[tuple, int]] = {}
        self.alias: dict[int, int] = {}          # placeholder -> real id or canonical ph
        self.batch_records: dict[int, object] = {}   # canonical ph -> pending record
        self.created: dict[tuple[str, tuple], int] = {}   # (kind, nk) -> id or ph
        self.updated: dict[tuple[str, int], object] = {}  # latest merged row this batch

    def resolve_ph(self, value: Optional[int]) -> Optional[int]:
        seen = set()
        while isinstance(value, int) and value < 0 and value in self.alias:
            if value in seen:
                break
            seen.add(value)
            value = self.alias[value]
        return value

    def resolver(self, kind: str, rid: Optional[int]):
        if rid is None:
            return None
        rid = self.resolve_ph(rid)
        if rid is None:
            return None
        if rid < 0:
            return self.batch_records.get(rid)
        return self.warehouse.tables[kind].get(rid)

    def nk_index(self, kind: str) -> dict[tuple, int]:
        if kind not in self._nk_index:
            index: dict[tuple, int] = {}
            w_resolve = self.warehouse.resolver()
            for rid in sorted(self.warehouse.tables[kind]):
                row = self.warehouse.tables[kind][rid]
                index.setdefault(schema.natural_key(row, w_resolve), rid)
            self._nk_index[kind] = index
        return self._nk_index[kind]

    def substitute(self, record) -> None:
        """Rewrite the record's FK fields through the alias map in place."""
        for ref in schema.foreign_keys(record):
            if ref.value is not None and ref.value < 0:
                _set_field(record, ref.field, self.resolve_ph(ref.value))


# fields that must not change once stored, per relation
_IMMUTABLE_STORED = {"login": ("username", "staff_id", "password_hash")}
_EMPTYLIKE = (None, "", frozenset())


def _fold_rows(target: IngestTarget, rows: list[dict]) -> dict:
    folded = dict(rows[0])
    for row in rows[1:]:
        for key, value in row.items():
            if key in target.immutable:
                left, right = folded.get(key, ""), value
                if left and right and left != right:
                    raise MergeConflict(target.name, key, target.merge_key(row))
                folded[key] = left or right
            elif value:
                folded[key] = value
    return folded


def integrate(bundles: list[RowBundle], warehouse: Warehouse, clock=None
              ) -> tuple[IntegrationPlan, list[QuarantineEntry]]:
    """Deduplicate within the batch and against the warehouse by natural key;
    classify each record as insert, update, or no-op. Raises MergeConflict
    when immutable fields disagree."""
    clock = clock if clock is not None else SystemClock()
    plan = IntegrationPlan()
    quarantine: list[QuarantineEntry] = []
    if not bundles:
        return plan, quarantine
    target = TARGETS.get(bundles[0].target) or _literal_target(bundles[0].target)
    secrets = target.secret_fields()

    # intra-batch fold by merge key
    groups: dict[tuple, list[RowBundle]] = {}
    order: list[tuple] = []
    for bundle in bundles:
        if bundle.merge_key not in groups:
            order.append(bundle.merge_key)
        groups.setdefault(bundle.merge_key, []).append(bundle)

    ctx = _IntegrationContext(warehouse)
    counter = iter(range(-10_000_001, -20_000_000, -1))

    for key in order:
        group = groups[key]
        if len(group) == 1:
            bundle = group[0]
        else:
            folded = _fold_rows(target, [g.row for g in group])
            try:
                bundle = _convert_row(target, folded, lambda: next(counter), clock)
            except BuildError as exc:
                quarantine.append(QuarantineEntry(
                    "integrate", redact_row(folded, secrets), str(exc),
                    row_count=len(group)))
                continue
            bundle.row_count = len(group)
            plan.merged_rows += len(group) - 1
        try:
            _integrate_bundle(bundle, ctx, plan)
            plan.row_count += bundle.row_count
        except _Unresolved as exc:
            quarantine.append(QuarantineEntry(
                "integrate", redact_row(bundle.row, secrets),
                f"unresolved reference: no {exc.what}", row_count=bundle.row_count))
    return plan, quarantine


class _Unresolved(Exception):
    def __init__(self, what: str):
        self.what = what


def _resolve_require(req: Require, ctx: _IntegrationContext) -> int:
    if req.strategy == "staff_by_username":
        hit = ctx.created.get(("login", (req.key,)))
        if hit is None:
            hit = ctx.nk_index("login").get((req.key,))
        if hit is None:
            raise _Unresolved(req.what)
        login = ctx.resolver("login", hit)
        staff_ref = ctx.resolve_ph(login.staff_id)
        return staff_ref
    kind, name_pos = {
        "project_by_name": ("project", 1),
        "document_by_title": ("document", 1),
        "meeting_by_subject": ("meeting", 1),
        "organisation_by_name": ("organisation", 0),
    }[req.strategy]
    for (ckind, nk), rid in ctx.created.items():
        if ckind == kind and len(nk) > name_pos and nk[name_pos] == req.key:
            return rid
    for nk, rid in ctx.nk_index(kind).items():
        if len(nk) > name_pos and nk[name_pos] == req.key:
            return rid
    raise _Unresolved(req.what)


def _is_empty(value) -> bool:
    try:
        return value in _EMPTYLIKE
    except TypeError:
        return False


def _merge_with_stored(kind: str, stored, incoming, provided: frozenset,
                       secrets: dict, merge_key: tuple):
    """Field-wise merge: provided non-empty incoming values win, everything
    else keeps the stored value. Returns (merged, changed fields)."""
    from .store import _clone  # local import to keep store's surface small
    merged = _clone(stored)
    changed: list[str] = []
    immutable = _IMMUTABLE_STORED.get(kind, ())
    for field_name in schema.record_fields(stored):
        if field_name == schema.RELATIONS[kind].pk or field_name not in provided:
            continue
        new = getattr(incoming, field_name)
        if _is_empty(new):
            continue
        old = getattr(merged, field_name)
        if kind == "login" and field_name == "password_hash":
            raw = secrets.get("password")
            if raw is not None and not verify_password(raw, stored.password_hash):
                raise MergeConflict(kind, field_name, merge_key)
            continue   # matching password keeps the stored digest
        if new == old:
            continue
        if field_name in immutable and not _is_empty(old):
            raise MergeConflict(kind, field_name, merge_key)
        setattr(merged, field_name, new)
        changed.append(field_name)
    return merged, tuple(changed)


def _integrate_bundle(bundle: RowBundle, ctx: _IntegrationContext,
                      plan: IntegrationPlan) -> None:
    # external references first: they never point into this same bundle
    for req in bundle.requires:
        ctx.alias[req.ph] = _resolve_require(req, ctx)
    for pending in bundle.pendings:
        ctx.substitute(pending.record)
        kind = schema.kind_of(pending.record)
        nk = schema.natural_key(pending.record, ctx.resolver)
        hit = ctx.created.get((kind, nk))
        if hit is None:
            hit = ctx.nk_index(kind).get(nk)
        if hit is not None and hit > 0 and pending.is_main:
            stored = ctx.updated.get((kind, hit), ctx.warehouse.tables[kind][hit])
            merged, changed = _merge_with_stored(
                kind, stored, pending.record, pending.provided,
                bundle.secrets, bundle.merge_key)
            ctx.alias[pending.ph] = hit
            ctx.created[(kind, nk)] = hit
            ctx.batch_records[pending.ph] = merged
            if changed:
                ctx.updated[(kind, hit)] = merged
                plan.puts.append(PlannedPut(kind, merged, pending.ph, hit, changed, True))
            else:
                plan.unchanged += 1
            continue
        if hit is not None:
            ctx.alias[pending.ph] = hit
            continue
        ctx.created[(kind, nk)] = pending.ph
        ctx.batch_records[pending.ph] = pending.record
        plan.puts.append(PlannedPut(kind, pending.record, pending.ph, None, (),
                                    pending.is_main))


# --- load -----------------------------------------------------------------------

def load(warehouse: Warehouse, plan: IntegrationPlan, cycle_number: int,
         source_id: str = "") -> LoadReport:
    """Apply the integration plan as one atomic unit; any store rejection
    rolls the warehouse back to its pre-load state."""
    report = LoadReport(source_id=source_id, cycle_number=cycle_number)
    report.unchanged = plan.unchanged

    # keep only pending inserts that something applied actually references
    needed: set[int] = set()
    for put in reversed(plan.puts):
        if put.is_main or put.existing_id is not None or put.ph in needed:
            for ref in schema.foreign_keys(put.record):
                if ref.value is not None and ref.value < 0:
                    needed.add(ref.value)

    token = warehouse.bulk_token()
    assigned: dict[int, int] = {}
    try:
        for put in plan.puts:
            if not put.is_main and put.existing_id is None and put.ph not in needed:
                continue
            record = put.record
            for ref in schema.foreign_keys(record):
                value = ref.value
                if value is not None and value < 0:
                    _set_field(record, ref.field, assigned[value])
            rid = warehouse.put(record)
            if put.ph is not None:
                assigned[put.ph] = rid
            report.loaded_ids.append((put.kind, rid))
            if put.existing_id is None:
                report.inserted += 1
            else:
                report.updated += 1
    except WarehouseError as exc:
        warehouse.rollback_bulk(token)
        raise LoadAborted(source_id, exc) from exc
    return report


# --- pipeline ----------------------------------------------------------------------

def run_pipeline(sources: list[SourceDescriptor], warehouse: Warehouse, *,
                 clock=None, state: EtlState | None = None,
                 actor_staff_id: int | None = None) -> list[LoadReport]:
    """extract -> cleanse -> convert -> integrate -> load per source.

    Sources fail independently (an aborted load leaves that source's rows
    out but others proceed). When the run changed anything and an actor is
    known, one audit activity row records the cycle.
    """
    clock = clock if clock is not None else SystemClock()
    state = state if state is not None else EtlState()
    state.cycle_number += 1
    cycle = state.cycle_number
    reports: list[LoadReport] = []

    for source in sources:
        source.watermark = state.watermarks.get(source.source_id, source.watermark)
        report = LoadReport(source_id=source.source_id, cycle_number=cycle)
        reports.append(report)
        try:
            batch = extract(source, clock)
        except (SourceUnreadable, ParseError) as exc:
            report.aborted = True
            report.abort_reason = str(exc)
            continue
        n = len(batch.rows)
        report.stages["extract"] = StageCount(input=n, passed=n)

        cleaned, q_cleanse = cleanse(batch, source)
        report.quarantine.extend(q_cleanse)
        report.stages["cleanse"] = StageCount(
            input=n, passed=len(cleaned.rows), quarantined=len(q_cleanse))

        bundles, q_convert = convert(cleaned, source, clock)
        report.quarantine.extend(q_convert)
        report.stages["convert"] = StageCount(
            input=len(cleaned.rows), passed=len(bundles), quarantined=len(q_convert))

        try:
            plan, q_integrate = integrate(bundles, warehouse, clock)
        except MergeConflict as exc:
            report.aborted = True
            report.abort_reason = str(exc)
            report.stages["integrate"] = StageCount(input=len(bundles))
            continue
        report.quarantine.extend(q_integrate)
        q_rows = sum(e.row_count for e in q_integrate)
        report.stages["integrate"] = StageCount(
            input=len(bundles), passed=plan.row_count, quarantined=q_rows,
            merged=plan.merged_rows)

        try:
            loaded = load(warehouse, plan, cycle, source.source_id)
        except LoadAborted as exc:
            report.aborted = True
            report.abort_reason = str(exc)
            report.stages["load"] = StageCount(input=plan.row_count)
            continue
        report.stages["load"] = StageCount(input=plan.row_count, passed=plan.row_count)
        report.loaded_ids = loaded.loaded_ids
        report.inserted = loaded.inserted
        report.updated = loaded.updated
        report.unchanged = loaded.unchanged
        state.watermarks[source.source_id] = source.watermark

    changes = sum(r.inserted + r.updated for r in reports if not r.aborted)
    if changes and actor_staff_id is not None:
        quarantined = sum(
            c.quarantined for r in reports for c in r.stages.values())
        warehouse.put(Activity(
            staff_id=actor_staff_id,
            description=(f"etl cycle {cycle}: inserted={sum(r.inserted for r in reports)} "
                         f"updated={sum(r.updated for r in reports)} "
                         f"quarantined={quarantined}"),
            ts=clock.now()))
    return reports


# --- reporting views ------------------------------------------------------------------

def _name_text(warehouse: Warehouse, name_id: Optional[int]) -> str:
    if name_id is None:
        return ""
    row = warehouse.tables["name"].get(name_id)
    return row.text if row is not None else ""


def denormalize(warehouse: Warehouse) -> list[dict]:
    """One flat reporting row per project with its lookups resolved."""
    rows = []
    for project in warehouse.scan("project"):
        org = warehouse.get("organisation", project.org_id)
        sed = warehouse.get("start_end_date", project.sed_id)
        tc = warehouse.get("type_code", project.type_id)
        owner = ""
        staff = warehouse.get("staff", project.owner_staff_id)
        if staff is not None:
            person = warehouse.get("person", staff.person_id)
            if person is not None:
                owner = _name_text(warehouse, person.name_id)
        rows.append({
            "project_id": project.project_id,
            "project": _name_text(warehouse, project.name_id),
            "organisation": _name_text(warehouse, org.name_id) if org else "",
            "owner": owner,
            "type": tc.code if tc else "",
            "category": project.category,
            "state": project.state.value,
            "status": project.status,
            "start": sed.start_ts.strftime("%Y-%m-%dT%H:%M:%S") if sed else "",
            "end": sed.end_ts.strftime("%Y-%m-%dT%H:%M:%S") if sed and sed.end_ts else "",
            "deadline": project.deadline.isoformat() if project.deadline else "",
        })
    return rows


def aggregate(warehouse: Warehouse) -> dict[str, list[dict]]:
    """Per-entity rollups: documents/team/meetings per project, activities
    per staff member; deterministic (primary-key) ordering."""
    docs: dict[int, int] = {}
    team: dict[int, int] = {}
    for assoc in warehouse.scan("association"):
        if assoc.kind is AssociationKind.PROJECT_DOCUMENT:
            docs[assoc.left_id] = docs.get(assoc.left_id, 0) + 1
        elif assoc.kind is AssociationKind.PROJECT_TEAM:
            team[assoc.left_id] = team.get(assoc.left_id, 0) + 1
    meetings: dict[int, int] = {}
    for meeting in warehouse.scan("meeting"):
        if meeting.project_id is not None:
            meetings[meeting.project_id] = meetings.get(meeting.project_id, 0) + 1
    activities: dict[int, int] = {}
    for activity in warehouse.scan("activity"):
        activities[activity.staff_id] = activities.get(activity.staff_id, 0) + 1

    projects = [{
        "project_id": p.project_id,
        "project": _name_text(warehouse, p.name_id),
        "document_count": docs.get(p.project_id, 0),
        "team_count": team.get(p.project_id, 0),
        "meeting_count": meetings.get(p.project_id, 0),
    } for p in warehouse.scan("project")]
    staff_rows = []
    for staff in warehouse.scan("staff"):
        person = warehouse.get("person", staff.person_id)
        staff_rows.append({
            "staff_id": staff.staff_id,
            "person": _name_text(warehouse, person.name_id) if person else "",
            "activity_count": activities.get(staff.staff_id, 0),
        })
    return {"projects": projects, "staff": staff_rows}


def write_quarantine(path: str | Path, entries: list[QuarantineEntry],
                     source_id: str) -> None:
    """Append quarantined rows (already redacted) as JSON lines for audit."""
    with open(path, "a", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps({
                "source_id": source_id, "stage": entry.stage,
                "reason": entry.reason, "row": entry.row,
            }, sort_keys=True) + "\n")
