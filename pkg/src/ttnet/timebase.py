"""Simulated per-node clocks and controller-side offset tracking.

All simulation time is an integer count of nanoseconds since the epoch
(``SimTime``); durations are signed integer nanoseconds (``Duration``).
Keeping time integral makes every run bit-reproducible.

A :class:`ClockModel` turns true simulation time into what a node's local
clock reads: a fixed offset, a linear skew in parts per million, and
optional Gaussian read noise. Reads are pure functions of
``(model, true_time)`` - two reads of the same clock at the same true time
return the same value, so replaying a run replays its clocks.

Offset tracking follows the reverse-direction synchronization scheme for
centrally managed networks: switches periodically timestamp a two-way
exchange with the controller, the controller does all the arithmetic and
keeps one :class:`OffsetRecord` per switch, and a scheduled time ``T`` on
the controller clock translates to ``T + offset`` on the switch clock.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A SimTime is an int (ns since epoch); a Duration is an int (signed ns).
SimTime = int
Duration = int

NS = 1
US = 1_000
MS = 1_000_000
SEC = 1_000_000_000

U64_MAX = 2**64 - 1


class TimeRangeError(ValueError):
    """Raised when time arithmetic leaves the valid unsigned 64-bit range."""


class UnknownSwitchError(KeyError):
    """Raised when a switch id has no offset record."""


class MalformedExchangeError(ValueError):
    """Raised when a sync exchange is causally inconsistent or stale."""


def check_time(value: int) -> SimTime:
    """Validate that ``value`` is a representable SimTime and return it."""
    if not 0 <= value <= U64_MAX:
        raise TimeRangeError(f"time {value} outside [0, 2^64)")
    return value


def add_time(t: SimTime, d: Duration) -> SimTime:
    """Return ``t + d``, raising instead of wrapping outside [0, 2^64)."""
    return check_time(t + d)


@dataclass(frozen=True)
class ClockModel:
    """Error model of one node's clock.

    ``true_offset`` is the constant lead of the local clock over true time
    (negative = lagging). ``skew_ppm`` adds a linear rate error: at true
    time t the deterministic reading is ``t + true_offset + t*skew_ppm/1e6``.
    ``jitter_std`` adds zero-mean Gaussian read noise, seeded by
    ``(rng_seed, true_time)`` so reads are reproducible.
    """

    true_offset: Duration = 0
    skew_ppm: float = 0.0
    jitter_std: float = 0.0
    rng_seed: int = 0


def read_clock(clock: ClockModel, true_time: SimTime) -> SimTime:
    """Read the local clock at the given true time (clamped at 0)."""
    check_time(true_time)
    value = true_time + clock.true_offset
    if clock.skew_ppm:
        value += round(true_time * clock.skew_ppm / 1e6)
    if clock.jitter_std:
        rng = np.random.default_rng((clock.rng_seed, true_time))
        value += round(rng.normal(0.0, clock.jitter_std))
    return max(0, value)


def invert_clock(clock: ClockModel, local_time: SimTime) -> SimTime:
    """Earliest true time at which the clock's deterministic part reads
    at least ``local_time``.

    Jitter is ignored: this answers "when does a node whose clock shows
    ``local_time`` act", and scheduled executions key off the clock's
    deterministic progression. With ``jitter_std > 0`` the actual read at
    the returned instant may differ by the noise term.
    """
    rate = 1.0 + clock.skew_ppm / 1e6

    def det_read(t: SimTime) -> int:
        return t + clock.true_offset + (round(t * clock.skew_ppm / 1e6) if clock.skew_ppm else 0)

    guess = max(0, round((local_time - clock.true_offset) / rate))
    while guess > 0 and det_read(guess - 1) >= local_time:
        guess -= 1
    while det_read(guess) < local_time:
        guess += 1
    return guess


@dataclass(frozen=True)
class SyncExchange:
    """Timestamps of one two-way switch-initiated sync exchange.

    ``t1``: switch send time (switch clock); ``t2``: controller receive
    (controller clock); ``t3``: controller send (controller clock);
    ``t4``: switch receive (switch clock).
    """

    switch_id: str
    t1: SimTime
    t2: SimTime
    t3: SimTime
    t4: SimTime


def rptp_exchange(
    switch_clock: ClockModel,
    controller_clock: ClockModel,
    fwd_delay: Duration,
    rev_delay: Duration,
    true_time: SimTime,
    switch_id: str = "sw",
) -> SyncExchange:
    """Simulate one sync exchange starting at ``true_time``.

    The switch sends at ``true_time`` (forward delay to the controller),
    the controller turns the message around immediately, and the reply
    takes ``rev_delay`` back. Each timestamp is read from the owning clock
    at the causally correct true instant.
    """
    if fwd_delay < 0 or rev_delay < 0:
        raise ValueError("link delays must be non-negative")
    t_send = check_time(true_time)
    t_ctl = add_time(t_send, fwd_delay)
    t_back = add_time(t_ctl, rev_delay)
    return SyncExchange(
        switch_id=switch_id,
        t1=read_clock(switch_clock, t_send),
        t2=read_clock(controller_clock, t_ctl),
        t3=read_clock(controller_clock, t_ctl),
        t4=read_clock(switch_clock, t_back),
    )


@dataclass
class OffsetRecord:
    """Controller-side knowledge of one switch clock.

    ``estimated_offset`` is switch-minus-controller; ``error_bound`` is
    half the measured round-trip (the classic asymmetry bound);
    ``last_update`` is the controller time of the producing exchange.
    """

    switch_id: str
    estimated_offset: Duration
    last_update: SimTime
    error_bound: Duration


class OffsetTable:
    """Per-switch offset records, updated from sync exchanges.

    All bookkeeping lives here, on the controller side; switches only
    timestamp. Updates are serialized by the caller.
    """

    def __init__(self) -> None:
        self._records: dict[str, OffsetRecord] = {}

    def __contains__(self, switch_id: str) -> bool:
        return switch_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, switch_id: str) -> OffsetRecord:
        try:
            return self._records[switch_id]
        except KeyError:
            raise UnknownSwitchError(switch_id) from None

    def update(self, ex: SyncExchange) -> OffsetRecord:
        """Fold one exchange into the table and return the new record.

        The estimate is the two-way formula ((t1-t2) + (t4-t3)) / 2,
        switch-minus-controller. A causally impossible exchange
        (t4 < t1 on the switch clock) or one older than the stored record
        is rejected and the table is left unchanged.
        """
        if ex.t4 < ex.t1:
            raise MalformedExchangeError(
                f"switch timestamps run backwards: t4={ex.t4} < t1={ex.t1}"
            )
        prev = self._records.get(ex.switch_id)
        if prev is not None and ex.t2 < prev.last_update:
            raise MalformedExchangeError(
                f"stale exchange for {ex.switch_id}: t2={ex.t2} < {prev.last_update}"
            )
        estimate = ((ex.t1 - ex.t2) + (ex.t4 - ex.t3)) // 2
        round_trip = (ex.t4 - ex.t1) - (ex.t3 - ex.t2)
        record = OffsetRecord(
            switch_id=ex.switch_id,
            estimated_offset=estimate,
            last_update=ex.t2,
            error_bound=max(0, round_trip // 2),
        )
        self._records[ex.switch_id] = record
        return record

    def translate(self, switch_id: str, controller_time: SimTime) -> SimTime:
        """Switch-local time at which to act so the action lands at
        ``controller_time`` on the controller clock."""
        record = self.get(switch_id)
        return add_time(check_time(controller_time), record.estimated_offset)


# Functional aliases matching the operation names used by the simulator.
def rptp_update(table: OffsetTable, ex: SyncExchange) -> OffsetRecord:
    return table.update(ex)


def translate_time(table: OffsetTable, switch_id: str, controller_time: SimTime) -> SimTime:
    return table.translate(switch_id, controller_time)
