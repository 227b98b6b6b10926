"""Ternary match tables and time-range rule compilation.

A ternary word matches packet bits against {0, 1, don't-care}; a table
entry pairs a key word with a timestamp word, so a rule can be armed for
a *range* of device timestamps. Compiling a scheduled update then becomes
range encoding: express [T0, 2^k), a window [T0, T1), or a periodic
window of the k-bit timestamp field as few disjoint prefix words.

The encoders use the greedy largest-aligned-block decomposition, which is
minimal for prefix covers of an interval; :func:`optimal_cover_size`
recomputes the minimum by dynamic programming over dyadic blocks and is
kept deliberately independent of the encoders so each can check the other.
When the caller has freedom in when the update fires (a scheduling
tolerance), :func:`choose_update_time` picks the in-window time whose
range costs the fewest entries.

Timestamp semantics: the k-bit field holds the low k bits of
(local time / tick). The field wraps every 2^k ticks, which is what the
periodic encoding and the install/cleanup pairing rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

from .timebase import Duration, SimTime


class RangeOutOfFieldError(ValueError):
    """Raised when a threshold does not fit the timestamp field width."""


class EmptyRangeError(ValueError):
    """Raised for an empty or inverted match window."""


class PeriodTooShortError(ValueError):
    """Raised when a hold window cannot be disambiguated within one wrap."""


class NoCandidateError(ValueError):
    """Raised when a scheduling tolerance contains no representable time."""


class TableFullError(RuntimeError):
    """Raised when adding an entry would exceed the table capacity."""


class NoMatchError(LookupError):
    """Raised when no table entry matches a lookup (table miss)."""


class TableFormatError(ValueError):
    """Raised when parsing a dumped table fails."""


@dataclass(frozen=True)
class TernaryWord:
    """A fixed-width match word over {0, 1, *}, most-significant bit first.

    Stored as (value, care): bit i of ``care`` set means bit i of
    ``value`` must match; clear means don't-care (and the value bit is 0).
    """

    width: int
    value: int
    care: int

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError("width must be >= 1")
        full = (1 << self.width) - 1
        if not 0 <= self.care <= full:
            raise ValueError("care mask outside field width")
        if self.value & ~self.care & full or not 0 <= self.value <= full:
            raise ValueError("value bits set outside care mask")

    @classmethod
    def from_string(cls, text: str) -> TernaryWord:
        """Parse a word like ``"01*"`` (MSB first)."""
        if not text or any(c not in "01*" for c in text):
            raise ValueError(f"bad ternary word {text!r}")
        value = care = 0
        for c in text:
            value <<= 1
            care <<= 1
            if c != "*":
                care |= 1
                value |= c == "1"
        return cls(len(text), value, care)

    @classmethod
    def all_dontcare(cls, width: int) -> TernaryWord:
        return cls(width, 0, 0)

    @classmethod
    def exact(cls, width: int, value: int) -> TernaryWord:
        full = (1 << width) - 1
        return cls(width, value & full, full)

    @classmethod
    def prefix_block(cls, width: int, start: int, low_bits: int) -> TernaryWord:
        """Word matching the aligned block [start, start + 2^low_bits)."""
        if start % (1 << low_bits):
            raise ValueError("block start not aligned to its size")
        full = (1 << width) - 1
        care = full ^ ((1 << low_bits) - 1)
        return cls(width, start & care, care)

    def matches(self, bits: int) -> bool:
        return (bits ^ self.value) & self.care == 0

    def overlaps(self, other: TernaryWord) -> bool:
        both = self.care & other.care
        return (self.value ^ other.value) & both == 0

    @property
    def dontcare_count(self) -> int:
        return self.width - bin(self.care).count("1")

    def covered(self) -> range | list[int]:
        """Matched values; a contiguous ``range`` for prefix words."""
        low = (1 << self.width) - 1 - self.care
        if (low + 1) & low == 0:  # don't-cares form a suffix: aligned block
            return range(self.value, self.value + low + 1)
        return [v for v in range(1 << self.width) if self.matches(v)]

    def __str__(self) -> str:
        out = []
        for i in range(self.width - 1, -1, -1):
            if not self.care >> i & 1:
                out.append("*")
            else:
                out.append("1" if self.value >> i & 1 else "0")
        return "".join(out)


def _check_field(k: int) -> int:
    if k < 1:
        raise ValueError("timestamp field needs at least 1 bit")
    return 1 << k


def encode_window(t0: int, t1: int, k: int) -> list[TernaryWord]:
    """Minimal disjoint prefix cover of the half-open window [t0, t1).

    Greedy: repeatedly take the largest aligned block starting at the
    window's low end. At most 2k-2 words for k >= 2.
    """
    size = _check_field(k)
    if not 0 <= t0 < size or not t0 < t1 <= size:
        if t0 >= t1:
            raise EmptyRangeError(f"window [{t0}, {t1}) is empty")
        raise RangeOutOfFieldError(f"window [{t0}, {t1}) outside {k}-bit field")
    words = []
    v = t0
    while v < t1:
        low_bits = k if v == 0 else (v & -v).bit_length() - 1
        while (1 << low_bits) > t1 - v:
            low_bits -= 1
        words.append(TernaryWord.prefix_block(k, v, low_bits))
        v += 1 << low_bits
    return words


def encode_geq(t0: int, k: int) -> list[TernaryWord]:
    """Minimal disjoint prefix cover of {v : v >= t0} in a k-bit field."""
    size = _check_field(k)
    if not 0 <= t0 < size:
        raise RangeOutOfFieldError(f"threshold {t0} outside {k}-bit field")
    return encode_window(t0, size, k)


def optimal_cover_size(t0: int, t1: int, k: int) -> int:
    """Minimum number of prefix words whose union is exactly [t0, t1).

    Dynamic program over dyadic blocks: best(v) = 1 + min over aligned
    blocks [v, v+2^j) within the window of best(v + 2^j). Independent of
    the greedy encoders; used as their optimality oracle.
    """
    size = _check_field(k)
    if not (0 <= t0 < t1 <= size):
        raise ValueError(f"bad window [{t0}, {t1}) for k={k}")
    best = {t1: 0}
    for v in range(t1 - 1, t0 - 1, -1):
        max_j = k if v == 0 else (v & -v).bit_length() - 1
        score = None
        for j in range(max_j + 1):
            end = v + (1 << j)
            if end > t1:
                break
            cand = 1 + best[end]
            if score is None or cand < score:
                score = cand
        best[v] = score
    return best[t0]


def cyclic_window_words(start: int, length: int, k: int) -> list[TernaryWord]:
    """Prefix cover of the cyclic field interval [start, start+length) mod 2^k."""
    size = _check_field(k)
    if not 0 < length <= size:
        raise EmptyRangeError(f"cyclic window length {length} invalid for k={k}")
    start %= size
    if start + length <= size:
        return encode_window(start, start + length, k)
    return encode_window(start, size, k) + encode_window(0, (start + length) % size, k)


def encode_periodic(
    t0: SimTime, hold: Duration, k: int, tick: Duration
) -> tuple[list[TernaryWord], SimTime]:
    """Words arming a rule for [t0, t0+hold) via the wrapping k-bit field.

    Returns (words, valid_until): the words match exactly the field
    values the device timestamp takes during the hold window, and the
    entry must be removed by ``valid_until = t0 + hold`` - one wrap later
    the same field values recur. The quantized window may cover at most
    half the field (2^(k-1) ticks) so a bounded-installation-time deadline
    always exists.
    """
    size = _check_field(k)
    if tick <= 0:
        raise ValueError("tick must be positive")
    if hold <= 0:
        raise PeriodTooShortError("hold window is empty")
    first = t0 // tick
    last = -(-(t0 + hold) // tick)  # ceil
    length = last - first
    if length > size // 2:
        raise PeriodTooShortError(
            f"hold of {length} ticks exceeds half the {k}-bit field period"
        )
    return cyclic_window_words(first % size, length, k), t0 + hold


@dataclass(frozen=True)
class ScheduleTolerance:
    """Closed time window [t_min, t_max] within which an update may fire."""

    t_min: SimTime
    t_max: SimTime

    def __post_init__(self) -> None:
        if self.t_min > self.t_max:
            raise ValueError("tolerance window inverted")


def choose_update_time(
    tol: ScheduleTolerance,
    k: int,
    tick: Duration,
    kind: str = "geq",
    hold: Duration | None = None,
) -> tuple[SimTime, list[TernaryWord]]:
    """Pick the update time inside the tolerance whose range is cheapest.

    Candidates are the tick-aligned times in [t_min, t_max]; the cost of a
    candidate is the entry count of its range encoding (``kind="geq"`` for
    T >= T0; ``"window"``/``"periodic"`` for a hold of ``hold`` ns). Ties
    break toward the earliest time, so results are deterministic. No
    candidate beats the returned one - verified exhaustively in tests.
    """
    size = _check_field(k)
    if tick <= 0:
        raise ValueError("tick must be positive")
    if kind not in ("geq", "window", "periodic"):
        raise ValueError(f"unknown range kind {kind!r}")
    if kind != "geq" and (hold is None or hold <= 0):
        raise ValueError("window/periodic kinds need a positive hold")
    q_lo = -(-tol.t_min // tick)
    q_hi = tol.t_max // tick
    if q_lo > q_hi:
        raise NoCandidateError(
            f"no tick-aligned time in [{tol.t_min}, {tol.t_max}] at tick={tick}"
        )
    best_q = None
    best_words: list[TernaryWord] = []
    # Field values repeat every 2^k ticks; scanning more candidates than
    # that cannot improve on the earliest occurrence.
    for q in range(q_lo, min(q_hi, q_lo + size - 1) + 1):
        if kind == "geq":
            words = encode_geq(q % size, k)
        else:
            words = encode_periodic(q * tick, hold, k, tick)[0]
        if best_q is None or len(words) < len(best_words):
            best_q, best_words = q, words
            if len(best_words) == 1:
                break
    assert best_q is not None
    return best_q * tick, best_words


@dataclass
class TcamEntry:
    """One table entry: higher priority wins; ties go to the lower index."""

    priority: int
    key: TernaryWord
    ts: TernaryWord
    action: str
    version: int = 1


@dataclass
class TimeFlipCleanup:
    """Pending collapse of a time-armed install back to a single entry."""

    due: SimTime
    old_entry: TcamEntry
    cover: list[TcamEntry]
    new_action: str
    new_version: int


@dataclass
class TimeFlipInstall:
    """Result of arming an update: the cover entries and their cleanup."""

    entries: list[TcamEntry]
    activate_field: int
    cleanup: TimeFlipCleanup


class TcamTable:
    """A priority-resolved ternary match table with a timestamp field.

    Single-owner mutation; lookups are read-only and deterministic:
    highest priority wins, ties resolved by lowest entry index.
    """

    def __init__(self, key_width: int, ts_width: int, capacity: int | None = None):
        self.key_width = key_width
        self.ts_width = ts_width
        self.capacity = capacity
        self.entries: list[TcamEntry] = []
        self._cleanups: list[TimeFlipCleanup] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, entry: TcamEntry) -> TcamEntry:
        if entry.key.width != self.key_width or entry.ts.width != self.ts_width:
            raise ValueError("entry width does not match table configuration")
        if self.capacity is not None and len(self.entries) >= self.capacity:
            raise TableFullError(f"table capacity {self.capacity} exceeded")
        self.entries.append(entry)
        return entry

    def remove(self, entry: TcamEntry) -> None:
        self.entries = [e for e in self.entries if e is not entry]

    def lookup(self, key_bits: int, ts_bits: int) -> tuple[str, int]:
        """Action and config version of the best matching entry."""
        best: TcamEntry | None = None
        for entry in self.entries:
            if best is not None and entry.priority <= best.priority:
                continue
            if entry.key.matches(key_bits) and entry.ts.matches(ts_bits):
                best = entry
        if best is None:
            raise NoMatchError(f"no entry matches key={key_bits} ts={ts_bits}")
        return best.action, best.version

    def timestamp_field(self, local_time: SimTime, tick: Duration) -> int:
        """Low ts_width bits of (local_time / tick): the lookup timestamp."""
        return (local_time // tick) % (1 << self.ts_width)

    def install_timeflip(
        self,
        old_entry: TcamEntry,
        new_action: str,
        t0: SimTime,
        tick: Duration,
        grace: Duration | None = None,
    ) -> TimeFlipInstall:
        """Arm ``new_action`` to shadow ``old_entry`` for timestamps >= t0.

        Adds one entry per word of the T >= T0 prefix cover at priority
        old+1 with a bumped config version; the old entry stays. A cleanup
        is registered for ``t0 + grace`` (default one full field wrap) that
        drops the cover and the old entry and installs a single timeless
        entry carrying the new action. All entries of one install share the
        same timestamp cover, so the flip is atomic across them.
        """
        if not any(e is old_entry for e in self.entries):
            raise ValueError("old entry not present in table")
        v0 = (-(-t0 // tick)) % (1 << self.ts_width)
        words = encode_geq(v0, self.ts_width)
        if self.capacity is not None and len(self.entries) + len(words) > self.capacity:
            raise TableFullError(
                f"time-armed cover of {len(words)} entries exceeds capacity"
            )
        cover = [
            self.add(
                TcamEntry(
                    priority=old_entry.priority + 1,
                    key=old_entry.key,
                    ts=word,
                    action=new_action,
                    version=old_entry.version + 1,
                )
            )
            for word in words
        ]
        if grace is None:
            grace = 2 * tick * (1 << (self.ts_width - 1))
        cleanup = TimeFlipCleanup(
            due=t0 + grace,
            old_entry=old_entry,
            cover=cover,
            new_action=new_action,
            new_version=old_entry.version + 1,
        )
        self._cleanups.append(cleanup)
        return TimeFlipInstall(entries=cover, activate_field=v0, cleanup=cleanup)

    def cleanup_due(self, now: SimTime) -> int:
        """Apply every registered cleanup with due <= now; returns count."""
        due = [c for c in self._cleanups if c.due <= now]
        self._cleanups = [c for c in self._cleanups if c.due > now]
        for cleanup in due:
            for entry in cleanup.cover:
                self.remove(entry)
            self.remove(cleanup.old_entry)
            self.add(
                TcamEntry(
                    priority=cleanup.old_entry.priority,
                    key=cleanup.old_entry.key,
                    ts=TernaryWord.all_dontcare(self.ts_width),
                    action=cleanup.new_action,
                    version=cleanup.new_version,
                )
            )
        return len(due)

    def dump(self) -> str:
        """Line format: ``priority key_ternary ts_ternary action version``."""
        return "".join(
            f"{e.priority} {e.key} {e.ts} {e.action} {e.version}\n" for e in self.entries
        )

    @classmethod
    def load(cls, text: str, capacity: int | None = None) -> TcamTable:
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise TableFormatError(f"line {lineno}: expected 5 fields, got {len(parts)}")
            try:
                entries.append(
                    TcamEntry(
                        priority=int(parts[0]),
                        key=TernaryWord.from_string(parts[1]),
                        ts=TernaryWord.from_string(parts[2]),
                        action=parts[3],
                        version=int(parts[4]),
                    )
                )
            except ValueError as exc:
                raise TableFormatError(f"line {lineno}: {exc}") from exc
        if not entries:
            raise TableFormatError("empty table dump")
        table = cls(entries[0].key.width, entries[0].ts.width, capacity)
        for entry in entries:
            table.add(entry)
        return table
