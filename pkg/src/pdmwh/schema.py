"""Typed catalog of the warehouse relations.

Five main entities (organisation, person, staff, project, product) plus the
supportive lookup/link relations and the three system relations. Link tables
(staff_document, organisation_document, project_document, staff_meeting,
project_team) are stored as one Association record discriminated by kind, and
the contact sub-records (web/telephone/city) ride on one Contact row; both are
still presented as separate logical relations by `logical_counts`.

validate_record checks field-level invariants only. Foreign-key existence and
cross-record rules (type domains, date ordering against referenced rows) are
the store's job; the hooks for those live in each relation's registry entry.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields as dc_fields
from datetime import date, datetime
from enum import Enum
from typing import Callable, Optional

__all__ = [
    "Permission", "ProjectState", "AssociationKind", "TypeDomain",
    "Organisation", "Person", "Staff", "Project", "Product", "Document",
    "Association", "Name", "Contact", "ContactWeb", "ContactTelephone",
    "ContactCity", "CityState", "CityCountry", "StartEndDate", "Meeting",
    "Activity", "TypeCode", "Login", "SystemInput", "SystemOutput",
    "Record", "ValidationResult", "validate_record", "natural_key",
    "RELATIONS", "KINDS", "LOGICAL_RELATIONS", "kind_of", "record_id",
    "set_record_id", "foreign_keys", "unique_keys", "cross_checks",
    "logical_counts", "EMAIL_RE",
]


class Permission(str, Enum):
    READ_ORG = "read_org"
    WRITE_ORG = "write_org"
    READ_PROJECT = "read_project"
    WRITE_PROJECT = "write_project"
    READ_PRODUCT = "read_product"
    WRITE_PRODUCT = "write_product"
    RUN_ETL = "run_etl"
    ADMIN = "admin"


class ProjectState(str, Enum):
    PLANNED = "planned"
    ACTIVE = "active"
    SUSPENDED = "suspended"
    CLOSED = "closed"


class AssociationKind(str, Enum):
    STAFF_DOCUMENT = "staff_document"
    ORGANISATION_DOCUMENT = "organisation_document"
    PROJECT_DOCUMENT = "project_document"
    STAFF_MEETING = "staff_meeting"
    PROJECT_TEAM = "project_team"


class TypeDomain(str, Enum):
    ORGANIZATION = "organization"
    DOCUMENT = "document"
    PROJECT = "project"
    PRODUCT = "product"
    SYSTEM_INPUT = "system_input"
    SYSTEM_OUTPUT = "system_output"


# left/right target tables per association kind
ASSOCIATION_TARGETS: dict[AssociationKind, tuple[str, str]] = {
    AssociationKind.STAFF_DOCUMENT: ("staff", "document"),
    AssociationKind.ORGANISATION_DOCUMENT: ("organisation", "document"),
    AssociationKind.PROJECT_DOCUMENT: ("project", "document"),
    AssociationKind.STAFF_MEETING: ("staff", "meeting"),
    AssociationKind.PROJECT_TEAM: ("project", "staff"),
}

EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s]+$")


# --- record dataclasses ----------------------------------------------------

@dataclass
class Name:
    name_id: int = 0
    text: str = ""


@dataclass
class CityCountry:
    country_id: int = 0
    country_name: str = ""
    iso_code: Optional[str] = None


@dataclass
class CityState:
    state_id: int = 0
    state_name: str = ""
    country_id: int = 0


@dataclass
class ContactWeb:
    email: str = ""
    url: str = ""


@dataclass
class ContactTelephone:
    mobile: str = ""
    fax: str = ""
    telephone: str = ""


@dataclass
class ContactCity:
    city_name: str = ""
    code: str = ""
    state_id: Optional[int] = None
    country_id: int = 0


@dataclass
class Contact:
    contact_id: int = 0
    web: Optional[ContactWeb] = None
    telephone: Optional[ContactTelephone] = None
    city: Optional[ContactCity] = None


@dataclass
class TypeCode:
    type_id: int = 0
    domain: TypeDomain = TypeDomain.ORGANIZATION
    code: str = ""
    label: str = ""


@dataclass
class StartEndDate:
    sed_id: int = 0
    start_ts: datetime = None  # type: ignore[assignment]
    end_ts: Optional[datetime] = None


@dataclass
class Organisation:
    org_id: int = 0
    name_id: int = 0
    type_id: int = 0
    contact_id: Optional[int] = None


@dataclass
class Person:
    person_id: int = 0
    name_id: int = 0
    org_id: int = 0
    contact_id: Optional[int] = None


@dataclass
class Staff:
    staff_id: int = 0
    person_id: int = 0
    role: str = ""
    responsibilities: str = ""
    group_name: str = ""
    rights: frozenset[Permission] = field(default_factory=frozenset)


@dataclass
class Project:
    project_id: int = 0
    name_id: int = 0
    org_id: int = 0
    type_id: int = 0
    sed_id: int = 0
    owner_staff_id: int = 0
    category: str = ""
    state: ProjectState = ProjectState.PLANNED
    status: str = ""
    deadline: Optional[date] = None


@dataclass
class Product:
    product_id: int = 0
    name_id: int = 0
    org_id: int = 0
    type_id: int = 0
    project_id: Optional[int] = None
    release_date: Optional[date] = None
    notes: str = ""


@dataclass
class Document:
    doc_id: int = 0
    type_id: int = 0
    title: str = ""
    created_ts: datetime = None  # type: ignore[assignment]
    content_ref: str = ""


@dataclass
class Association:
    assoc_id: int = 0
    kind: AssociationKind = AssociationKind.STAFF_DOCUMENT
    left_id: int = 0
    right_id: int = 0
    role_note: Optional[str] = None


@dataclass
class Meeting:
    meeting_id: int = 0
    project_id: Optional[int] = None
    sed_id: int = 0
    subject: str = ""


@dataclass
class Activity:
    activity_id: int = 0
    project_id: Optional[int] = None
    staff_id: int = 0
    description: str = ""
    ts: datetime = None  # type: ignore[assignment]


@dataclass
class Login:
    login_id: int = 0
    staff_id: int = 0
    username: str = ""
    password_hash: str = ""
    created_ts: datetime = None  # type: ignore[assignment]


@dataclass
class SystemInput:
    input_id: int = 0
    login_id: int = 0
    instruction: str = ""
    ts: datetime = None  # type: ignore[assignment]
    idempotency_token: Optional[str] = None


@dataclass
class SystemOutput:
    output_id: int = 0
    input_id: int = 0
    payload: str = ""
    ts: datetime = None  # type: ignore[assignment]


Record = object  # any of the dataclasses above


# --- validation helpers ----------------------------------------------------

def _is_ts(v) -> bool:
    return isinstance(v, datetime)


def _check_ts(out: list[str], fieldname: str, v, optional: bool = False) -> None:
    if v is None:
        if not optional:
            out.append(f"{fieldname} missing")
        return
    if not _is_ts(v):
        out.append(f"{fieldname} is not a timestamp")
        return
    if v.tzinfo is None:
        out.append(f"{fieldname} is a naive timestamp (UTC required)")
    elif v.microsecond:
        out.append(f"{fieldname} carries sub-second precision")


def _check_date(out: list[str], fieldname: str, v, optional: bool = False) -> None:
    if v is None:
        if not optional:
            out.append(f"{fieldname} missing")
        return
    if not isinstance(v, date) or isinstance(v, datetime):
        out.append(f"{fieldname} is not a calendar date")


def _check_id(out: list[str], fieldname: str, v, optional: bool = False) -> None:
    if v is None:
        if not optional:
            out.append(f"{fieldname} missing")
        return
    if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
        out.append(f"{fieldname} is not a positive id")


def _check_text(out: list[str], fieldname: str, v, required: bool = False) -> None:
    if not isinstance(v, str):
        out.append(f"{fieldname} is not text")
        return
    if required and not v.strip():
        out.append(f"{fieldname} is empty")


def _check_enum(out: list[str], fieldname: str, v, enum_cls) -> None:
    if not isinstance(v, enum_cls):
        allowed = ", ".join(m.value for m in enum_cls)
        out.append(f"{fieldname} must be one of: {allowed}")


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


# --- per-relation validators ------------------------------------------------

def _v_name(r: Name, out: list[str]) -> None:
    _check_text(out, "text", r.text)
    if isinstance(r.text, str) and not r.text.strip():
        out.append("text is empty after trimming")


def _v_city_country(r: CityCountry, out: list[str]) -> None:
    _check_text(out, "country_name", r.country_name, required=True)
    if r.iso_code is not None and not (
        isinstance(r.iso_code, str) and len(r.iso_code) == 2 and r.iso_code.isalpha()
    ):
        out.append("iso_code is not a 2-letter code")


def _v_city_state(r: CityState, out: list[str]) -> None:
    _check_text(out, "state_name", r.state_name, required=True)
    _check_id(out, "country_id", r.country_id)


def _v_contact(r: Contact, out: list[str]) -> None:
    present = 0
    if r.web is not None:
        if not isinstance(r.web, ContactWeb):
            out.append("web is not a web contact")
        else:
            present += 1
            if not (r.web.email or r.web.url):
                out.append("web contact has neither email nor url")
            if r.web.email and not EMAIL_RE.match(r.web.email):
                out.append(f"email '{r.web.email}' is not local@domain with a dotted domain")
    if r.telephone is not None:
        if not isinstance(r.telephone, ContactTelephone):
            out.append("telephone is not a telephone contact")
        else:
            present += 1
            if not (r.telephone.mobile or r.telephone.fax or r.telephone.telephone):
                out.append("telephone contact has no number")
    if r.city is not None:
        if not isinstance(r.city, ContactCity):
            out.append("city is not a city contact")
        else:
            present += 1
            _check_text(out, "city.city_name", r.city.city_name, required=True)
            _check_id(out, "city.country_id", r.city.country_id)
            _check_id(out, "city.state_id", r.city.state_id, optional=True)
    if present == 0:
        out.append("contact needs at least one of web/telephone/city")


def _v_type_code(r: TypeCode, out: list[str]) -> None:
    _check_enum(out, "domain", r.domain, TypeDomain)
    _check_text(out, "code", r.code, required=True)
    _check_text(out, "label", r.label)


def _v_sed(r: StartEndDate, out: list[str]) -> None:
    _check_ts(out, "start_ts", r.start_ts)
    _check_ts(out, "end_ts", r.end_ts, optional=True)
    if _is_ts(r.start_ts) and _is_ts(r.end_ts) and r.end_ts < r.start_ts:
        out.append("end before start")


def _v_organisation(r: Organisation, out: list[str]) -> None:
    _check_id(out, "name_id", r.name_id)
    _check_id(out, "type_id", r.type_id)
    _check_id(out, "contact_id", r.contact_id, optional=True)


def _v_person(r: Person, out: list[str]) -> None:
    _check_id(out, "name_id", r.name_id)
    _check_id(out, "org_id", r.org_id)
    _check_id(out, "contact_id", r.contact_id, optional=True)


def _v_staff(r: Staff, out: list[str]) -> None:
    _check_id(out, "person_id", r.person_id)
    for f in ("role", "responsibilities", "group_name"):
        _check_text(out, f, getattr(r, f))
    try:
        bad = [x for x in r.rights if not isinstance(x, Permission)]
    except TypeError:
        out.append("rights is not a set of permissions")
    else:
        if bad:
            out.append(f"rights outside the permission enumeration: {bad!r}")


def _v_project(r: Project, out: list[str]) -> None:
    for f in ("name_id", "org_id", "type_id", "sed_id", "owner_staff_id"):
        _check_id(out, f, getattr(r, f))
    _check_enum(out, "state", r.state, ProjectState)
    _check_text(out, "category", r.category)
    _check_text(out, "status", r.status)
    _check_date(out, "deadline", r.deadline, optional=True)


def _v_product(r: Product, out: list[str]) -> None:
    for f in ("name_id", "org_id", "type_id"):
        _check_id(out, f, getattr(r, f))
    _check_id(out, "project_id", r.project_id, optional=True)
    _check_date(out, "release_date", r.release_date, optional=True)
    _check_text(out, "notes", r.notes)


def _v_document(r: Document, out: list[str]) -> None:
    _check_id(out, "type_id", r.type_id)
    _check_text(out, "title", r.title, required=True)
    _check_ts(out, "created_ts", r.created_ts)
    _check_text(out, "content_ref", r.content_ref)


def _v_association(r: Association, out: list[str]) -> None:
    _check_enum(out, "kind", r.kind, AssociationKind)
    _check_id(out, "left_id", r.left_id)
    _check_id(out, "right_id", r.right_id)
    if r.role_note is not None:
        _check_text(out, "role_note", r.role_note)


def _v_meeting(r: Meeting, out: list[str]) -> None:
    _check_id(out, "project_id", r.project_id, optional=True)
    _check_id(out, "sed_id", r.sed_id)
    _check_text(out, "subject", r.subject)


def _v_activity(r: Activity, out: list[str]) -> None:
    _check_id(out, "project_id", r.project_id, optional=True)
    _check_id(out, "staff_id", r.staff_id)
    _check_text(out, "description", r.description, required=True)
    _check_ts(out, "ts", r.ts)


# digest layout produced by security.hash_password
DIGEST_RE = re.compile(r"^pbkdf2\$sha256\$\d+\$[0-9a-f]{32}\$[0-9a-f]{64}$")


def _v_login(r: Login, out: list[str]) -> None:
    _check_id(out, "staff_id", r.staff_id)
    _check_text(out, "username", r.username, required=True)
    if not isinstance(r.password_hash, str) or not DIGEST_RE.match(r.password_hash):
        out.append("password_hash is not a salted digest (raw passwords are never stored)")
    _check_ts(out, "created_ts", r.created_ts)


def _v_system_input(r: SystemInput, out: list[str]) -> None:
    _check_id(out, "login_id", r.login_id)
    _check_text(out, "instruction", r.instruction, required=True)
    _check_ts(out, "ts", r.ts)
    if r.idempotency_token is not None:
        _check_text(out, "idempotency_token", r.idempotency_token, required=True)


def _v_system_output(r: SystemOutput, out: list[str]) -> None:
    _check_id(out, "input_id", r.input_id)
    _check_text(out, "payload", r.payload)
    _check_ts(out, "ts", r.ts)


# --- foreign keys, unique keys, cross-record checks -------------------------

@dataclass(frozen=True)
class FkRef:
    field: str
    target: str
    value: Optional[int]
    optional: bool


def _fixed_fks(*specs: tuple[str, str, bool]) -> Callable:
    def fk_fn(r) -> list[FkRef]:
        return [FkRef(f, target, getattr(r, f), opt) for f, target, opt in specs]
    return fk_fn


def _association_fks(r: Association) -> list[FkRef]:
    left_t, right_t = ASSOCIATION_TARGETS.get(r.kind, ("staff", "document"))
    return [FkRef("left_id", left_t, r.left_id, False),
            FkRef("right_id", right_t, r.right_id, False)]


def _contact_fks(r: Contact) -> list[FkRef]:
    if r.city is None or not isinstance(r.city, ContactCity):
        return []
    return [FkRef("city.state_id", "city_state", r.city.state_id, True),
            FkRef("city.country_id", "city_country", r.city.country_id, False)]


def _xc_organisation(r: Organisation, get) -> list[str]:
    tc = get("type_code", r.type_id)
    if tc is not None and tc.domain is not TypeDomain.ORGANIZATION:
        return [f"type_id must reference a type with domain 'organization', got '{tc.domain.value}'"]
    return []


def _xc_domain(domain: TypeDomain) -> Callable:
    def check(r, get) -> list[str]:
        tc = get("type_code", r.type_id)
        if tc is not None and tc.domain is not domain:
            return [f"type_id must reference a type with domain '{domain.value}', got '{tc.domain.value}'"]
        return []
    return check


def _xc_project(r: Project, get) -> list[str]:
    out = _xc_domain(TypeDomain.PROJECT)(r, get)
    if r.deadline is not None:
        sed = get("start_end_date", r.sed_id)
        if sed is not None and _is_ts(sed.start_ts) and r.deadline < sed.start_ts.date():
            out.append("deadline precedes the project start date")
    return out


def _xc_contact(r: Contact, get) -> list[str]:
    if r.city is None or r.city.state_id is None:
        return []
    state = get("city_state", r.city.state_id)
    if state is not None and state.country_id != r.city.country_id:
        return ["city state belongs to a different country"]
    return []


def _xc_system_output(r: SystemOutput, get) -> list[str]:
    inp = get("system_input", r.input_id)
    if inp is not None and _is_ts(inp.ts) and _is_ts(r.ts) and r.ts < inp.ts:
        return ["output timestamp precedes its input's timestamp"]
    return []


# --- natural keys -----------------------------------------------------------

def _resolved(resolve, kind: str, rid: Optional[int]):
    if resolve is None or rid is None:
        return None
    return resolve(kind, rid)


def _name_text(r, resolve) -> object:
    name = _resolved(resolve, "name", r.name_id)
    return name.text if name is not None else r.name_id


def _contact_email(contact_id: Optional[int], resolve) -> object:
    if contact_id is None:
        return ""
    c = _resolved(resolve, "contact", contact_id)
    if c is None:
        return contact_id
    return c.web.email if c.web is not None else ""


def _org_key(org_id: int, resolve) -> object:
    org = _resolved(resolve, "organisation", org_id)
    return _name_text(org, resolve) if org is not None else org_id


def _iso(v) -> str:
    return v.isoformat() if v is not None else ""


def _nk_contact(r: Contact, resolve) -> tuple:
    web = r.web or ContactWeb()
    tel = r.telephone or ContactTelephone()
    city = r.city or ContactCity()
    country = _resolved(resolve, "city_country", city.country_id or None)
    state = _resolved(resolve, "city_state", city.state_id)
    return (web.email, web.url, tel.mobile, tel.fax, tel.telephone,
            city.city_name, city.code,
            state.state_name if state is not None else (city.state_id or ""),
            country.country_name if country is not None else (city.country_id or ""))


def _nk_person(r: Person, resolve) -> tuple:
    return (_org_key(r.org_id, resolve), _name_text(r, resolve),
            _contact_email(r.contact_id, resolve))


def _nk_staff(r: Staff, resolve) -> tuple:
    person = _resolved(resolve, "person", r.person_id)
    if person is None:
        return (r.person_id,)
    return ("person",) + _nk_person(person, resolve)


def _nk_meeting(r: Meeting, resolve) -> tuple:
    sed = _resolved(resolve, "start_end_date", r.sed_id)
    sed_key = (_iso(sed.start_ts), _iso(sed.end_ts)) if sed is not None else r.sed_id
    project = _resolved(resolve, "project", r.project_id)
    proj_key = _name_text(project, resolve) if project is not None else (r.project_id or "")
    return (proj_key, r.subject, sed_key)


def _nk_document(r: Document, resolve) -> tuple:
    tc = _resolved(resolve, "type_code", r.type_id)
    return ((tc.domain.value, tc.code) if tc is not None else r.type_id, r.title)


# --- the registry -----------------------------------------------------------

@dataclass(frozen=True)
class Relation:
    kind: str
    cls: type
    pk: str
    validate: Callable
    fk_fn: Callable
    uniques: tuple[tuple[str, Callable], ...]   # (key name, record -> tuple | None)
    nk_fn: Callable                             # (record, resolve) -> tuple
    cross: Optional[Callable] = None            # (record, get) -> [violations]


def _uq(name: str, *attrs: str) -> tuple[str, Callable]:
    def key(r):
        vals = tuple(getattr(r, a) for a in attrs)
        if any(v is None for v in vals):
            return None
        return tuple(v.value if isinstance(v, Enum) else v for v in vals)
    return (name, key)


RELATIONS: dict[str, Relation] = {}


def _register(rel: Relation) -> None:
    RELATIONS[rel.kind] = rel


_register(Relation("name", Name, "name_id", _v_name, _fixed_fks(),
                   (), lambda r, resolve=None: (r.text,)))
_register(Relation("city_country", CityCountry, "country_id", _v_city_country, _fixed_fks(),
                   (), lambda r, resolve=None: (r.country_name,)))
_register(Relation("city_state", CityState, "state_id", _v_city_state,
                   _fixed_fks(("country_id", "city_country", False)),
                   (), lambda r, resolve=None: (
                       r.state_name,
                       c.country_name if (c := _resolved(resolve, "city_country", r.country_id)) is not None else r.country_id)))
_register(Relation("contact", Contact, "contact_id", _v_contact, _contact_fks,
                   (), _nk_contact, cross=_xc_contact))
_register(Relation("type_code", TypeCode, "type_id", _v_type_code, _fixed_fks(),
                   (_uq("domain+code", "domain", "code"),),
                   lambda r, resolve=None: (r.domain.value if isinstance(r.domain, TypeDomain) else r.domain, r.code)))
_register(Relation("start_end_date", StartEndDate, "sed_id", _v_sed, _fixed_fks(),
                   (), lambda r, resolve=None: (_iso(r.start_ts), _iso(r.end_ts))))
_register(Relation("organisation", Organisation, "org_id", _v_organisation,
                   _fixed_fks(("name_id", "name", False), ("type_id", "type_code", False),
                              ("contact_id", "contact", True)),
                   (), lambda r, resolve=None: (_name_text(r, resolve),),
                   cross=_xc_organisation))
_register(Relation("person", Person, "person_id", _v_person,
                   _fixed_fks(("name_id", "name", False), ("org_id", "organisation", False),
                              ("contact_id", "contact", True)),
                   (), _nk_person))
_register(Relation("staff", Staff, "staff_id", _v_staff,
                   _fixed_fks(("person_id", "person", False)),
                   (_uq("person_id", "person_id"),), _nk_staff))
_register(Relation("project", Project, "project_id", _v_project,
                   _fixed_fks(("name_id", "name", False), ("org_id", "organisation", False),
                              ("type_id", "type_code", False), ("sed_id", "start_end_date", False),
                              ("owner_staff_id", "staff", False)),
                   (), lambda r, resolve=None: (_org_key(r.org_id, resolve), _name_text(r, resolve)),
                   cross=_xc_project))
_register(Relation("product", Product, "product_id", _v_product,
                   _fixed_fks(("name_id", "name", False), ("org_id", "organisation", False),
                              ("type_id", "type_code", False), ("project_id", "project", True)),
                   (), lambda r, resolve=None: (_org_key(r.org_id, resolve), _name_text(r, resolve)),
                   cross=_xc_domain(TypeDomain.PRODUCT)))
_register(Relation("document", Document, "doc_id", _v_document,
                   _fixed_fks(("type_id", "type_code", False)),
                   (), _nk_document, cross=_xc_domain(TypeDomain.DOCUMENT)))
_register(Relation("association", Association, "assoc_id", _v_association, _association_fks,
                   (_uq("kind+left+right", "kind", "left_id", "right_id"),),
                   lambda r, resolve=None: (r.kind.value if isinstance(r.kind, AssociationKind) else r.kind,
                                            r.left_id, r.right_id)))
_register(Relation("meeting", Meeting, "meeting_id", _v_meeting,
                   _fixed_fks(("project_id", "project", True), ("sed_id", "start_end_date", False)),
                   (), _nk_meeting))
_register(Relation("activity", Activity, "activity_id", _v_activity,
                   _fixed_fks(("project_id", "project", True), ("staff_id", "staff", False)),
                   (), lambda r, resolve=None: (r.staff_id, _iso(r.ts), r.description)))
_register(Relation("login", Login, "login_id", _v_login,
                   _fixed_fks(("staff_id", "staff", False)),
                   (_uq("username", "username"), _uq("staff_id", "staff_id")),
                   lambda r, resolve=None: (r.username,)))
_register(Relation("system_input", SystemInput, "input_id", _v_system_input,
                   _fixed_fks(("login_id", "login", False)),
                   (_uq("idempotency_token", "idempotency_token"),),
                   lambda r, resolve=None: (r.idempotency_token,) if r.idempotency_token
                   else (r.login_id, _iso(r.ts), r.instruction)))
_register(Relation("system_output", SystemOutput, "output_id", _v_system_output,
                   _fixed_fks(("input_id", "system_input", False)),
                   (), lambda r, resolve=None: (r.input_id, _iso(r.ts), r.payload),
                   cross=_xc_system_output))

# canonical kind order for wire formats and iteration: alphabetical
KINDS: tuple[str, ...] = tuple(sorted(RELATIONS))

_KIND_BY_CLS = {rel.cls: rel.kind for rel in RELATIONS.values()}


def kind_of(record: Record) -> str:
    try:
        return _KIND_BY_CLS[type(record)]
    except KeyError:
        raise TypeError(f"{type(record).__name__} is not a warehouse relation") from None


def record_id(record: Record) -> int:
    return getattr(record, RELATIONS[kind_of(record)].pk)


def set_record_id(record: Record, rid: int) -> None:
    setattr(record, RELATIONS[kind_of(record)].pk, rid)


def validate_record(record: Record) -> ValidationResult:
    """Field-level invariants only; FK existence is the store's job."""
    rel = RELATIONS[kind_of(record)]
    out: list[str] = []
    rel.validate(record, out)
    return ValidationResult(out)


def natural_key(record: Record, resolve: Callable | None = None) -> tuple:
    """Deduplication key for the record's relation.

    `resolve(kind, id) -> record | None` chases lookups so that e.g. a person's
    key is built from the organisation and name text instead of surrogate ids;
    without it, stored FK ids stand in (still deterministic and id-insensitive).
    """
    return RELATIONS[kind_of(record)].nk_fn(record, resolve)


def foreign_keys(record: Record) -> list[FkRef]:
    return RELATIONS[kind_of(record)].fk_fn(record)


def unique_keys(record: Record) -> list[tuple[str, tuple]]:
    rel = RELATIONS[kind_of(record)]
    out = []
    for key_name, key_fn in rel.uniques:
        key = key_fn(record)
        if key is not None:
            out.append((key_name, key))
    return out


def cross_checks(record: Record, get: Callable) -> list[str]:
    rel = RELATIONS[kind_of(record)]
    return rel.cross(record, get) if rel.cross else []


# --- logical relation view ---------------------------------------------------
# 22 organizational + 3 system relations. Association and Contact are stored
# folded; here they fan back out to the designed link/sub-relation names.

LOGICAL_RELATIONS: tuple[str, ...] = tuple(sorted([
    "organisation", "person", "staff", "project", "product",
    "name", "contacts", "contacts_web", "contact_telephone", "contact_city",
    "city_country", "city_state", "start_end_date", "project_team", "meeting",
    "activity", "staff_meeting", "document", "type",
    "staff_document", "organisation_document", "project_document",
    "login", "system_input", "system_output",
]))


def logical_counts(tables: dict[str, dict[int, Record]]) -> dict[str, int]:
    counts = {name: 0 for name in LOGICAL_RELATIONS}
    direct = {
        "organisation": "organisation", "person": "person", "staff": "staff",
        "project": "project", "product": "product", "name": "name",
        "city_country": "city_country", "city_state": "city_state",
        "start_end_date": "start_end_date", "meeting": "meeting",
        "activity": "activity", "document": "document", "type": "type_code",
        "login": "login", "system_input": "system_input",
        "system_output": "system_output",
    }
    for logical, kind in direct.items():
        counts[logical] = len(tables.get(kind, {}))
    for contact in tables.get("contact", {}).values():
        counts["contacts"] += 1
        if contact.web is not None:
            counts["contacts_web"] += 1
        if contact.telephone is not None:
            counts["contact_telephone"] += 1
        if contact.city is not None:
            counts["contact_city"] += 1
    for assoc in tables.get("association", {}).values():
        counts[assoc.kind.value] += 1
    return counts


def record_fields(record: Record) -> dict:
    """Field name -> value mapping (shallow; nested contact parts stay typed)."""
    return {f.name: getattr(record, f.name) for f in dc_fields(record)}
