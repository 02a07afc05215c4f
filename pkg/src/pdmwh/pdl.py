"""Ingest boundary: accept an instruction, store it, return an acknowledgement.

A stored acknowledgement is a 1:1 receipt for its system-input row, so its id
is the input's id — durability of acks reduces to durability of the rows.
Replaying an idempotency token returns the original acknowledgement and
writes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Optional

from .clock import SystemClock
from .errors import FkViolation
from .schema import SystemInput, SystemOutput
from .security import SecurityService

__all__ = ["AckStatus", "Acknowledgement", "ProcessDatabaseLayer"]


class AckStatus(str, Enum):
    STORED = "stored"
    REJECTED = "rejected"


@dataclass(frozen=True)
class Acknowledgement:
    ack_id: int               # == input_id for stored acks, 0 for rejections
    input_id: int
    status: AckStatus
    detail: str
    ts: datetime


class ProcessDatabaseLayer:
    def __init__(self, warehouse, security: SecurityService, clock=None):
        self.warehouse = warehouse
        self.security = security
        self.clock = clock if clock is not None else SystemClock()

    def submit(self, session_id: str, instruction: str,
               idempotency_token: Optional[str] = None) -> Acknowledgement:
        """Store one instruction with time, date, and user; acknowledge it.

        Either exactly one new system-input row is created (stored ack) or
        none is (rejected ack / token replay) — never anything partial.
        """
        session = self.security.validate_session(session_id)
        now = self.clock.now()
        if not instruction.strip():
            return Acknowledgement(0, 0, AckStatus.REJECTED, "empty instruction", now)
        if idempotency_token:
            existing = self.warehouse.scan(
                "system_input", lambda r: r.idempotency_token == idempotency_token)
            if existing:
                original = existing[0]
                return Acknowledgement(original.input_id, original.input_id,
                                       AckStatus.STORED, "already stored", original.ts)
        row = SystemInput(login_id=session.login_id, instruction=instruction,
                          ts=now, idempotency_token=idempotency_token or None)
        input_id = self.warehouse.put(row)
        return Acknowledgement(input_id, input_id, AckStatus.STORED, "stored", now)

    def record_output(self, input_id: int, payload: str) -> int:
        """Record a system output against its input; output ts never precedes
        the input's ts (a lagging clock is clamped forward)."""
        inp = self.warehouse.get("system_input", input_id)
        if inp is None:
            raise FkViolation("system_output", "input_id", input_id)
        ts = max(self.clock.now(), inp.ts)
        return self.warehouse.put(SystemOutput(input_id=input_id, payload=payload, ts=ts))

    def history(self, login_id: int, limit: Optional[int] = None
                ) -> list[tuple[SystemInput, list[SystemOutput]]]:
        """That user's inputs newest-first, each with its outputs oldest-first."""
        inputs = self.warehouse.scan("system_input", lambda r: r.login_id == login_id)
        inputs.sort(key=lambda r: (r.ts, r.input_id), reverse=True)
        if limit is not None:
            inputs = inputs[:limit]
        out = []
        for inp in inputs:
            outputs = self.warehouse.scan(
                "system_output", lambda r: r.input_id == inp.input_id)
            outputs.sort(key=lambda r: (r.ts, r.output_id))
            out.append((inp, outputs))
        return out
