"""Job scheduling, monitoring, retry handling, and notification.

The scheduler is tick-driven against an injected clock, which makes every
test deterministic: tick(now) starts exactly one run per elapsed due time
(catching up if ticks are sparse) and re-attempts runs that are waiting on
backoff. Failures never escape a job body; they are captured on the run and
retried with exponential backoff until attempts run out, at which point one
notification line is appended to the sink.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from .clock import SystemClock, parse_instant, utc_second
from .errors import InvalidSpec, SinkUnavailable

__all__ = [
    "JobKind", "RunState", "Schedule", "JobSpec", "JobRun",
    "FileNotificationSink", "MemoryNotificationSink", "Scheduler",
    "MAX_RETRY_LIMIT",
]

MAX_RETRY_LIMIT = 10


class JobKind(str, Enum):
    PIPELINE_RUN = "pipeline_run"
    SNAPSHOT = "snapshot"
    AGGREGATE_REFRESH = "aggregate_refresh"


class RunState(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    RETRYING = "retrying"


TERMINAL = {RunState.COMPLETED, RunState.FAILED}

# legal transitions; terminal states are absorbing
LEGAL_TRANSITIONS = {
    (RunState.PENDING, RunState.RUNNING),
    (RunState.RUNNING, RunState.COMPLETED),
    (RunState.RUNNING, RunState.RETRYING),
    (RunState.RUNNING, RunState.FAILED),
    (RunState.RETRYING, RunState.RUNNING),
}


@dataclass(frozen=True)
class Schedule:
    """Either a one-shot instant or a fixed repeat interval."""
    at: Optional[datetime] = None
    every: Optional[timedelta] = None

    def validate(self) -> None:
        if (self.at is None) == (self.every is None):
            raise InvalidSpec("schedule needs exactly one of 'at' or 'every'")
        if self.every is not None and self.every <= timedelta(0):
            raise InvalidSpec("interval must be positive")


@dataclass
class JobSpec:
    job_id: int = 0
    kind: JobKind = JobKind.PIPELINE_RUN
    schedule: Schedule = field(default_factory=Schedule)
    max_retries: int = 0
    backoff: timedelta = timedelta(seconds=60)
    enabled: bool = True
    sources: tuple[str, ...] = ()          # pipeline_run: which sources to run
    notify_on_success: bool = False

    def validate(self) -> None:
        self.schedule.validate()
        if not 0 <= self.max_retries <= MAX_RETRY_LIMIT:
            raise InvalidSpec(f"max_retries must be within 0..{MAX_RETRY_LIMIT}")
        if self.backoff < timedelta(0):
            raise InvalidSpec("backoff must not be negative")


@dataclass
class JobRun:
    run_id: int
    job_id: int
    due_ts: datetime
    attempt: int = 0
    state: RunState = RunState.PENDING
    started_ts: Optional[datetime] = None
    finished_ts: Optional[datetime] = None
    next_attempt_ts: Optional[datetime] = None
    error: Optional[str] = None
    notified: bool = False


class FileNotificationSink:
    """Append-only notification file, one JSON object per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def deliver(self, payload: dict) -> None:
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(payload, sort_keys=True) + "\n")
        except OSError as exc:
            raise SinkUnavailable(str(exc)) from exc


class MemoryNotificationSink:
    def __init__(self):
        self.lines: list[dict] = []
        self.fail = False       # tests flip this to simulate an outage

    def deliver(self, payload: dict) -> None:
        if self.fail:
            raise SinkUnavailable("sink down")
        self.lines.append(payload)


class Scheduler:
    """Deterministic tick-driven job scheduler.

    Bodies are plain callables registered per job id (or per kind as a
    default); a body's exception is captured into the run, never raised.
    """

    def __init__(self, clock=None, sink=None):
        self.clock = clock if clock is not None else SystemClock()
        self.sink = sink if sink is not None else MemoryNotificationSink()
        self.jobs: dict[int, JobSpec] = {}
        self.runs: dict[int, JobRun] = {}
        self.next_due: dict[int, Optional[datetime]] = {}
        self.transitions: list[dict] = []
        self._bodies: dict[int, Callable[[JobSpec], None]] = {}
        self._kind_bodies: dict[JobKind, Callable[[JobSpec], None]] = {}
        self._next_job_id = 1
        self._next_run_id = 1
        self._pending_notifications: list[int] = []

    # -- registration --

    def schedule(self, spec: JobSpec) -> int:
        """Register a job; the first due time is computed from the clock."""
        spec.validate()
        if spec.job_id == 0:
            spec.job_id = self._next_job_id
        self._next_job_id = max(self._next_job_id, spec.job_id + 1)
        self.jobs[spec.job_id] = spec
        now = self.clock.now()
        if spec.schedule.at is not None:
            self.next_due[spec.job_id] = utc_second(spec.schedule.at)
        else:
            self.next_due[spec.job_id] = now + spec.schedule.every
        return spec.job_id

    def set_body(self, job_id: int, body: Callable[[JobSpec], None]) -> None:
        self._bodies[job_id] = body

    def set_kind_body(self, kind: JobKind, body: Callable[[JobSpec], None]) -> None:
        self._kind_bodies[kind] = body

    def _body_for(self, spec: JobSpec) -> Callable[[JobSpec], None]:
        if spec.job_id in self._bodies:
            return self._bodies[spec.job_id]
        if spec.kind in self._kind_bodies:
            return self._kind_bodies[spec.kind]
        return lambda _spec: None

    # -- state machine --

    def _transition(self, run: JobRun, new_state: RunState) -> None:
        assert (run.state, new_state) in LEGAL_TRANSITIONS, \
            f"illegal transition {run.state.value} -> {new_state.value}"
        self.transitions.append({
            "run_id": run.run_id, "job_id": run.job_id,
            "from": run.state.value, "to": new_state.value,
            "attempt": run.attempt, "ts": self.clock.now().isoformat(),
            "error": run.error,
        })
        run.state = new_state

    def _attempt(self, run: JobRun, body: Callable[[JobSpec], None], now: datetime) -> None:
        """One attempt cycle: -> running -> completed | retrying | failed."""
        spec = self.jobs[run.job_id]
        run.attempt += 1
        run.started_ts = run.started_ts or now
        run.next_attempt_ts = None
        self._transition(run, RunState.RUNNING)
        try:
            body(spec)
        except Exception as exc:
            run.error = f"{type(exc).__name__}: {exc}"
            if run.attempt <= spec.max_retries:
                delay = spec.backoff * (2 ** (run.attempt - 1))
                run.next_attempt_ts = now + delay
                self._transition(run, RunState.RETRYING)
            else:
                run.finished_ts = now
                self._transition(run, RunState.FAILED)
                self._notify(run)
        else:
            run.error = None
            run.finished_ts = now
            self._transition(run, RunState.COMPLETED)
            if spec.notify_on_success:
                self._notify(run)

    def execute(self, run: JobRun, body: Callable[[JobSpec], None]) -> JobRun:
        """Drive one run to a terminal state, re-attempting immediately.

        Backoff instants are still recorded on the run; the waiting itself
        only happens in tick-driven mode.
        """
        while run.state not in TERMINAL:
            self._attempt(run, body, self.clock.now())
        return run

    # -- ticking --

    def tick(self, now: datetime | None = None) -> list[JobRun]:
        """Start one run per elapsed due time and re-attempt waiting retries.

        Idempotent at a fixed instant: a second tick at the same `now`
        starts nothing new.
        """
        now = utc_second(now) if now is not None else self.clock.now()
        started: list[JobRun] = []
        for job_id in sorted(self.jobs):
            spec = self.jobs[job_id]
            if not spec.enabled:
                continue
            while (due := self.next_due.get(job_id)) is not None and due <= now:
                if spec.schedule.at is not None:
                    self.next_due[job_id] = None
                else:
                    self.next_due[job_id] = due + spec.schedule.every
                run = JobRun(run_id=self._next_run_id, job_id=job_id, due_ts=due)
                self._next_run_id += 1
                self.runs[run.run_id] = run
                started.append(run)
                self._attempt(run, self._body_for(spec), now)
        for run_id in sorted(self.runs):
            run = self.runs[run_id]
            if run.state is RunState.RETRYING and run.next_attempt_ts is not None \
                    and run.next_attempt_ts <= now:
                self._attempt(run, self._body_for(self.jobs[run.job_id]), now)
        self._retry_notifications()
        return started

    # -- notification --

    def _notify(self, run: JobRun) -> None:
        payload = {
            "job_id": run.job_id, "run_id": run.run_id,
            "state": run.state.value, "attempt": run.attempt,
            "error": run.error,
            "ts": (run.finished_ts or self.clock.now()).isoformat(),
        }
        try:
            self.sink.deliver(payload)
        except SinkUnavailable:
            if run.run_id not in self._pending_notifications:
                self._pending_notifications.append(run.run_id)
        else:
            run.notified = True

    def _retry_notifications(self) -> None:
        still_waiting: list[int] = []
        for run_id in self._pending_notifications:
            run = self.runs[run_id]
            if run.notified:
                continue
            try:
                self.sink.deliver({
                    "job_id": run.job_id, "run_id": run.run_id,
                    "state": run.state.value, "attempt": run.attempt,
                    "error": run.error,
                    "ts": (run.finished_ts or self.clock.now()).isoformat(),
                })
            except SinkUnavailable:
                still_waiting.append(run_id)
            else:
                run.notified = True
        self._pending_notifications = still_waiting

    # -- persistence (CLI state file) --

    def to_state(self) -> dict:
        def enc_sched(s: Schedule) -> dict:
            return {"at": s.at.isoformat() if s.at else None,
                    "every": s.every.total_seconds() if s.every else None}
        return {
            "jobs": [{
                "job_id": s.job_id, "kind": s.kind.value,
                "schedule": enc_sched(s.schedule),
                "max_retries": s.max_retries,
                "backoff": s.backoff.total_seconds(),
                "enabled": s.enabled, "sources": list(s.sources),
                "notify_on_success": s.notify_on_success,
            } for s in self.jobs.values()],
            "runs": [{
                "run_id": r.run_id, "job_id": r.job_id,
                "due_ts": r.due_ts.isoformat(), "attempt": r.attempt,
                "state": r.state.value,
                "started_ts": r.started_ts.isoformat() if r.started_ts else None,
                "finished_ts": r.finished_ts.isoformat() if r.finished_ts else None,
                "next_attempt_ts": r.next_attempt_ts.isoformat() if r.next_attempt_ts else None,
                "error": r.error, "notified": r.notified,
            } for r in self.runs.values()],
            "next_due": {str(j): d.isoformat() if d else None
                         for j, d in self.next_due.items()},
            "next_job_id": self._next_job_id,
            "next_run_id": self._next_run_id,
            "pending_notifications": list(self._pending_notifications),
        }

    def load_state(self, state: dict) -> None:
        for j in state.get("jobs", []):
            sched = Schedule(
                at=parse_instant(j["schedule"]["at"]) if j["schedule"]["at"] else None,
                every=timedelta(seconds=j["schedule"]["every"]) if j["schedule"]["every"] else None)
            spec = JobSpec(job_id=j["job_id"], kind=JobKind(j["kind"]), schedule=sched,
                           max_retries=j["max_retries"],
                           backoff=timedelta(seconds=j["backoff"]),
                           enabled=j["enabled"], sources=tuple(j.get("sources", ())),
                           notify_on_success=j.get("notify_on_success", False))
            self.jobs[spec.job_id] = spec
            self._next_job_id = max(self._next_job_id, spec.job_id + 1)
        for r in state.get("runs", []):
            run = JobRun(
                run_id=r["run_id"], job_id=r["job_id"],
                due_ts=parse_instant(r["due_ts"]), attempt=r["attempt"],
                state=RunState(r["state"]),
                started_ts=parse_instant(r["started_ts"]) if r["started_ts"] else None,
                finished_ts=parse_instant(r["finished_ts"]) if r["finished_ts"] else None,
                next_attempt_ts=parse_instant(r["next_attempt_ts"]) if r["next_attempt_ts"] else None,
                error=r["error"], notified=r["notified"])
            self.runs[run.run_id] = run
            self._next_run_id = max(self._next_run_id, run.run_id + 1)
        for job_id, due in state.get("next_due", {}).items():
            self.next_due[int(job_id)] = parse_instant(due) if due else None
        self._next_job_id = state.get("next_job_id", self._next_job_id)
        self._next_run_id = state.get("next_run_id", self._next_run_id)
        self._pending_notifications = list(state.get("pending_notifications", []))
