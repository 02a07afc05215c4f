"""Credential verification and rights-based authorization.

Passwords are stored only as salted PBKDF2 digests. Authentication failures
are indistinguishable for unknown users and wrong passwords, and every
authenticate/authorize call appends exactly one event-log entry.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

from .clock import SystemClock
from .errors import AuthFailed, EmptyPassword, SessionExpired, SessionUnknown
from .schema import Permission

__all__ = [
    "Permission", "Session", "Decision", "EventLog", "SecurityService",
    "hash_password", "verify_password", "effective_rights", "DEFAULT_TTL",
]

PBKDF2_ITERATIONS = 60_000
SALT_BYTES = 16
DEFAULT_TTL = timedelta(hours=8)


def hash_password(password: str, salt: bytes | None = None,
                  iterations: int = PBKDF2_ITERATIONS) -> str:
    """Salted, slow-by-design digest: pbkdf2$sha256$<iters>$<salt>$<digest>."""
    if not password:
        raise EmptyPassword("password must not be empty")
    if salt is None:
        salt = secrets.token_bytes(SALT_BYTES)
    if len(salt) != SALT_BYTES:
        raise ValueError(f"salt must be {SALT_BYTES} bytes")
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return f"pbkdf2$sha256${iterations}${salt.hex()}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    try:
        scheme, algo, iters, salt_hex, digest_hex = stored.split("$")
        if scheme != "pbkdf2" or algo != "sha256":
            return False
        candidate = hashlib.pbkdf2_hmac(
            "sha256", password.encode("utf-8"), bytes.fromhex(salt_hex), int(iters))
        return hmac.compare_digest(candidate.hex(), digest_hex)
    except (ValueError, AttributeError):
        return False


def effective_rights(rights: frozenset[Permission]) -> frozenset[Permission]:
    """Admin implies every permission."""
    if Permission.ADMIN in rights:
        return frozenset(Permission)
    return frozenset(rights)


@dataclass
class Session:
    session_id: str      # >= 128 bits of entropy
    login_id: int
    issued_ts: datetime
    expires_ts: datetime


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""


class EventLog:
    """Append-only event log: one JSON object per line, kept in memory and
    mirrored to a file when a path is given. Never receives secrets."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = []

    def append(self, event: str, **fields) -> None:
        entry = {"event": event, **fields}
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


# verified against when the username does not exist, so both failure paths
# cost one PBKDF2 evaluation
_DUMMY_DIGEST = hash_password("*", salt=bytes(SALT_BYTES))


class SecurityService:
    """Authentication and authorization over the warehouse's login/staff rows."""

    def __init__(self, warehouse, event_log: EventLog | None = None,
                 clock=None, ttl: timedelta = DEFAULT_TTL):
        self.warehouse = warehouse
        self.event_log = event_log if event_log is not None else EventLog()
        self.clock = clock if clock is not None else SystemClock()
        self.ttl = ttl
        self._sessions: dict[str, Session] = {}

    def authenticate(self, username: str, password: str) -> Session:
        """Issue a session on a digest match; one event-log entry either way."""
        now = self.clock.now()
        login = None
        for row in self.warehouse.scan("login", lambda r: r.username == username):
            login = row
            break
        stored = login.password_hash if login is not None else _DUMMY_DIGEST
        ok = verify_password(password, stored) and login is not None
        if not ok:
            self.event_log.append("authenticate", username=username, ok=False,
                                  ts=now.isoformat())
            raise AuthFailed()
        session = Session(
            session_id=secrets.token_hex(16),
            login_id=login.login_id,
            issued_ts=now,
            expires_ts=now + self.ttl,
        )
        self._sessions[session.session_id] = session
        self.event_log.append("authenticate", username=username, ok=True,
                              login_id=login.login_id, ts=now.isoformat())
        return session

    def restore_session(self, session: Session) -> None:
        """Adopt a session issued by an earlier process (CLI session file)."""
        self._sessions[session.session_id] = session

    def validate_session(self, session_id: str) -> Session:
        session = self._sessions.get(session_id)
        if session is None:
            raise SessionUnknown(f"unknown session")
        if self.clock.now() >= session.expires_ts:
            raise SessionExpired("session expired")
        return session

    def session_staff(self, session: Session):
        login = self.warehouse.get("login", session.login_id)
        if login is None:
            raise SessionUnknown("session login no longer exists")
        return self.warehouse.get("staff", login.staff_id)

    def authorize(self, session_id: str, permission: Permission) -> Decision:
        """Allow iff the session is live and its staff holds the permission
        (or admin). The decision is logged exactly once."""
        now = self.clock.now()
        try:
            session = self.validate_session(session_id)
        except (SessionUnknown, SessionExpired):
            self.event_log.append("authorize", permission=permission.value,
                                  allowed=False, reason="invalid session",
                                  ts=now.isoformat())
            raise
        staff = self.session_staff(session)
        held = effective_rights(staff.rights) if staff is not None else frozenset()
        if permission in held:
            decision = Decision(True)
        else:
            decision = Decision(False, f"permission '{permission.value}' not held")
        self.event_log.append("authorize", login_id=session.login_id,
                              permission=permission.value, allowed=decision.allowed,
                              reason=decision.reason, ts=now.isoformat())
        return decision
