"""Protocol state machines for time-triggered configuration.

Two transport-independent machines live here:

* Scheduled bundles: a controller stages a sequence of commands on a
  switch (open / add* / close), then commits with an optional execution
  time. The switch applies the whole bundle as one unit when its local
  clock reaches the committed time, and the controller may discard the
  bundle any time before it executes.

* Timed RPCs: a client-server exchange where the request may carry a
  scheduled start time and may ask the server to report the completion
  time back, so clients can learn how long the server actually takes.

Protocol-level failures are replies with an error code, not exceptions:
a misbehaving peer must never corrupt the machine, only get told no.

Both machines share the line-oriented trace format
``time direction kind ident detail`` used for golden-trace tests and by
the network simulator's event log.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Any, Callable

from .timebase import Duration, SimTime

Command = Any
LatencyModel = Callable[[], Duration]


class TraceLog:
    """Append-only event log with a stable one-line-per-event format."""

    def __init__(self) -> None:
        self.lines: list[str] = []

    def log(self, time: SimTime, direction: str, kind: str, ident: Any, detail: str = "") -> None:
        line = f"{time} {direction} {kind} {ident}"
        if detail:
            line += f" {detail}"
        self.lines.append(line)

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


# --- Scheduled bundles -----------------------------------------------------


@dataclass(frozen=True)
class BundleOpen:
    bundle_id: int


@dataclass(frozen=True)
class BundleAdd:
    bundle_id: int
    command: Command


@dataclass(frozen=True)
class BundleClose:
    bundle_id: int


@dataclass(frozen=True)
class BundleCommit:
    bundle_id: int
    scheduled_time: SimTime | None = None


@dataclass(frozen=True)
class BundleDiscard:
    bundle_id: int


BundleMsg = BundleOpen | BundleAdd | BundleClose | BundleCommit | BundleDiscard


class Phase(Enum):
    OPENED = "opened"
    CLOSED = "closed"
    COMMITTED = "committed"
    EXECUTED = "executed"
    DISCARDED = "discarded"


class ReplyCode(Enum):
    OK = "ok"
    BUNDLE_STATE_ERROR = "bundle-state-error"
    SCHEDULE_PAST = "schedule-past"
    ALREADY_EXECUTED = "already-executed"
    DUPLICATE_BUNDLE = "duplicate-bundle"


@dataclass(frozen=True)
class BundleReply:
    bundle_id: int
    code: ReplyCode

    @property
    def ok(self) -> bool:
        return self.code is ReplyCode.OK


@dataclass
class BundleState:
    bundle_id: int
    phase: Phase = Phase.OPENED
    staged: list[Command] = dc_field(default_factory=list)
    scheduled_time: SimTime | None = None
    executed_at: SimTime | None = None
    commit_seq: int = -1


class EmptyBundleError(ValueError):
    """Raised when building a bundle with no commands."""


class BundleSwitch:
    """Switch-side bundle machine.

    Legal phase walk is opened -> closed -> committed -> executed, with
    discarded reachable from every phase but executed. Commands stage in
    arrival order and execute contiguously per bundle; committed bundles
    fire in scheduled-time order when :meth:`execute_due` advances past
    their time. ``exec_latency`` models how far past the scheduled time
    the device lands (default: exactly on time).
    """

    def __init__(
        self,
        exec_latency: LatencyModel | None = None,
        trace: TraceLog | None = None,
        name: str = "sw",
    ) -> None:
        self.bundles: dict[int, BundleState] = {}
        self.exec_latency = exec_latency or (lambda: 0)
        self.trace = trace
        self.name = name
        self._commit_counter = itertools.count()
        self._outbox: list[tuple[Command, SimTime]] = []

    def _reply(self, now: SimTime, bundle_id: int, code: ReplyCode) -> BundleReply:
        if self.trace is not None:
            detail = "ok" if code is ReplyCode.OK else f"err={code.value}"
            self.trace.log(now, "s>c", "reply", bundle_id, detail)
        return BundleReply(bundle_id, code)

    def handle(self, msg: BundleMsg, now: SimTime) -> BundleReply:
        """Process one controller message; never raises on bad sequences."""
        if self.trace is not None:
            kind = type(msg).__name__.removeprefix("Bundle").lower()
            detail = ""
            if isinstance(msg, BundleAdd):
                detail = f"cmd={msg.command}"
            elif isinstance(msg, BundleCommit):
                detail = "immediate" if msg.scheduled_time is None else f"ts={msg.scheduled_time}"
            self.trace.log(now, "c>s", kind, msg.bundle_id, detail)

        state = self.bundles.get(msg.bundle_id)
        if isinstance(msg, BundleOpen):
            if state is not None:
                return self._reply(now, msg.bundle_id, ReplyCode.DUPLICATE_BUNDLE)
            self.bundles[msg.bundle_id] = BundleState(msg.bundle_id)
            return self._reply(now, msg.bundle_id, ReplyCode.OK)

        if isinstance(msg, BundleAdd):
            if state is None or state.phase is not Phase.OPENED:
                return self._reply(now, msg.bundle_id, ReplyCode.BUNDLE_STATE_ERROR)
            state.staged.append(msg.command)
            return self._reply(now, msg.bundle_id, ReplyCode.OK)

        if isinstance(msg, BundleClose):
            if state is None or state.phase is not Phase.OPENED:
                return self._reply(now, msg.bundle_id, ReplyCode.BUNDLE_STATE_ERROR)
            state.phase = Phase.CLOSED
            return self._reply(now, msg.bundle_id, ReplyCode.OK)

        if isinstance(msg, BundleCommit):
            if state is None or state.phase is not Phase.CLOSED:
                return self._reply(now, msg.bundle_id, ReplyCode.BUNDLE_STATE_ERROR)
            if msg.scheduled_time is not None and msg.scheduled_time < now:
                return self._reply(now, msg.bundle_id, ReplyCode.SCHEDULE_PAST)
            state.commit_seq = next(self._commit_counter)
            if msg.scheduled_time is None:
                # An unscheduled commit applies on the spot.
                state.scheduled_time = now
                self._fire(state, now)
            else:
                state.phase = Phase.COMMITTED
                state.scheduled_time = msg.scheduled_time
            return self._reply(now, msg.bundle_id, ReplyCode.OK)

        if isinstance(msg, BundleDiscard):
            if state is None or state.phase is Phase.DISCARDED:
                return self._reply(now, msg.bundle_id, ReplyCode.BUNDLE_STATE_ERROR)
            if state.phase is Phase.EXECUTED:
                return self._reply(now, msg.bundle_id, ReplyCode.ALREADY_EXECUTED)
            state.phase = Phase.DISCARDED
            state.staged = []
            return self._reply(now, msg.bundle_id, ReplyCode.OK)

        raise TypeError(f"unknown bundle message {msg!r}")

    def _fire(self, state: BundleState, now: SimTime) -> None:
        at = state.scheduled_time + self.exec_latency()
        state.phase = Phase.EXECUTED
        state.executed_at = at
        self._outbox.extend((command, at) for command in state.staged)
        if self.trace is not None:
            self.trace.log(
                now, "local", "execute", state.bundle_id, f"n={len(state.staged)} at={at}"
            )

    def next_due(self) -> SimTime | None:
        """Earliest committed-but-unexecuted scheduled time, if any."""
        times = [
            s.scheduled_time
            for s in self.bundles.values()
            if s.phase is Phase.COMMITTED and s.scheduled_time is not None
        ]
        return min(times) if times else None

    def execute_due(self, now: SimTime) -> list[tuple[Command, SimTime]]:
        """Execute every committed bundle whose time has arrived.

        Bundles fire in (scheduled_time, commit order); each bundle's
        commands come out contiguously, stamped with the execution time
        (scheduled time plus modeled latency). Calling again at the same
        ``now`` executes nothing further.
        """
        due = sorted(
            (
                s
                for s in self.bundles.values()
                if s.phase is Phase.COMMITTED
                and s.scheduled_time is not None
                and s.scheduled_time <= now
            ),
            key=lambda s: (s.scheduled_time, s.commit_seq),
        )
        for state in due:
            self._fire(state, now)
        executed = self._outbox
        self._outbox = []
        return executed


def build_scheduled_bundle(
    commands: list[Command], scheduled_time: SimTime | None, bundle_id: int
) -> list[BundleMsg]:
    """Controller-side message sequence staging ``commands`` for ``scheduled_time``."""
    if not commands:
        raise EmptyBundleError("a bundle needs at least one command")
    msgs: list[BundleMsg] = [BundleOpen(bundle_id)]
    msgs.extend(BundleAdd(bundle_id, command) for command in commands)
    msgs.append(BundleClose(bundle_id))
    msgs.append(BundleCommit(bundle_id, scheduled_time))
    return msgs


class BundleSession:
    """Allocates fresh bundle ids for one controller-switch session."""

    def __init__(self, start: int = 1) -> None:
        self._ids = itertools.count(start)

    def build(self, commands: list[Command], scheduled_time: SimTime | None = None) -> list[BundleMsg]:
        return build_scheduled_bundle(commands, scheduled_time, next(self._ids))


# --- Timed RPCs ------------------------------------------------------------


@dataclass(frozen=True)
class ScheduledRpc:
    """A command with an optional start time and completion-time request."""

    rpc_id: int
    payload: Command = None
    scheduled_time: SimTime | None = None
    get_time: bool = False


@dataclass(frozen=True)
class RpcReply:
    rpc_id: int
    status: str  # "ok" or "too-late"
    execution_time: SimTime | None = None  # completion time, iff get_time


@dataclass(frozen=True)
class PendingRpc:
    """A dispatched RPC; the reply becomes observable at ``completion``."""

    rpc_id: int
    actual_start: SimTime
    completion: SimTime
    reply: RpcReply


class RpcServer:
    """Server that starts each RPC as close to its scheduled time as it can.

    ``start_jitter`` models how late execution begins after the start
    time; ``run_time`` models the work itself. A request whose scheduled
    time is already more than ``staleness_bound`` in the past is refused
    with a "too-late" reply.
    """

    def __init__(
        self,
        start_jitter: LatencyModel | None = None,
        run_time: LatencyModel | None = None,
        staleness_bound: Duration = 1_000_000_000,
        trace: TraceLog | None = None,
    ) -> None:
        self.start_jitter = start_jitter or (lambda: 0)
        self.run_time = run_time or (lambda: 0)
        self.staleness_bound = staleness_bound
        self.trace = trace

    def dispatch(self, rpc: ScheduledRpc, now: SimTime) -> PendingRpc | RpcReply:
        """Start (or refuse) one RPC; returns the pending execution.

        The reply inside a :class:`PendingRpc` carries the completion time
        when the request asked for it. A bare :class:`RpcReply` return
        means the request was refused outright.
        """
        if self.trace is not None:
            sched = "now" if rpc.scheduled_time is None else str(rpc.scheduled_time)
            self.trace.log(now, "c>s", "rpc", rpc.rpc_id, f"ts={sched} get-time={int(rpc.get_time)}")
        if rpc.scheduled_time is not None and rpc.scheduled_time < now - self.staleness_bound:
            if self.trace is not None:
                self.trace.log(now, "s>c", "rpc-reply", rpc.rpc_id, "err=too-late")
            return RpcReply(rpc.rpc_id, "too-late")
        start = now if rpc.scheduled_time is None else max(now, rpc.scheduled_time)
        actual_start = start + self.start_jitter()
        completion = actual_start + self.run_time()
        reply = RpcReply(
            rpc.rpc_id, "ok", execution_time=completion if rpc.get_time else None
        )
        if self.trace is not None:
            detail = "ok" if reply.execution_time is None else f"ok exec={reply.execution_time}"
            self.trace.log(completion, "s>c", "rpc-reply", rpc.rpc_id, detail)
        return PendingRpc(rpc.rpc_id, actual_start, completion, reply)
