"""Prediction-based scheduling of remote operations.

A client that wants an operation *completed* at time T_d cannot just ask
for it at T_d: the server starts late and the work takes time. The loop
here measures the elapsed time of execution (ETE) of each call - the span
from the scheduled start to the actual completion - predicts the next
ETE from history, and schedules the next call at T_d minus the
prediction, so completion lands on target.

Three predictors are provided: a windowed average, a fault-tolerant
average that throws away median/MAD outliers before averaging (robust to
occasional garbage timestamps from a broken clock), and a scalar
random-walk Kalman filter. An always-zero predictor serves as the
no-compensation baseline.
"""

from __future__ import annotations

import csv
import statistics
from collections import deque
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .proto import RpcServer, ScheduledRpc
from .timebase import Duration, SimTime

DEFAULT_WINDOW = 16
DEFAULT_MAD_MULT = 3.0
DEFAULT_HISTORY_CAPACITY = 256


@dataclass(frozen=True)
class EteSample:
    """One measured call: scheduled start, actual start, completion.

    ``ete`` is completion minus *scheduled* start, so it folds the
    server's start error and the run time together. A sample whose
    completion precedes its scheduled start is physically impossible and
    flags a clock fault; it is kept for the record but excluded from
    prediction.
    """

    scheduled_start: SimTime
    actual_start: SimTime
    completion: SimTime

    @property
    def ete(self) -> Duration:
        return self.completion - self.scheduled_start

    @property
    def flagged(self) -> bool:
        return self.completion < self.scheduled_start


class History:
    """Bounded ring of samples for one server, oldest evicted first."""

    def __init__(self, capacity: int = DEFAULT_HISTORY_CAPACITY) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._samples: deque[EteSample] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._samples)

    def record(self, sample: EteSample) -> None:
        self._samples.append(sample)

    def samples(self) -> list[EteSample]:
        return list(self._samples)

    def etes(self, last: int | None = None) -> list[Duration]:
        """Usable (unflagged) ETE values, optionally only the last ``last``."""
        values = [s.ete for s in self._samples if not s.flagged]
        return values if last is None else values[-last:]


@dataclass(frozen=True)
class Average:
    """Plain mean of the last ``window`` measurements."""

    window: int = DEFAULT_WINDOW

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass(frozen=True)
class FtAverage:
    """Mean of the last ``window`` measurements after discarding samples
    farther than ``mad_mult`` * MAD from the window median."""

    window: int = DEFAULT_WINDOW
    mad_mult: float = DEFAULT_MAD_MULT

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.mad_mult <= 0:
            raise ValueError("mad_mult must be positive")


@dataclass(frozen=True)
class Kalman:
    """Scalar random-walk filter: state is the ETE itself.

    ``process_var`` is how much the true ETE is allowed to wander per
    step, ``measurement_var`` how noisy each measurement is. Defaults are
    (0.1 ms)^2 and (1 ms)^2.
    """

    process_var: float = (100_000.0) ** 2
    measurement_var: float = (1_000_000.0) ** 2

    def __post_init__(self) -> None:
        if self.process_var <= 0 or self.measurement_var <= 0:
            raise ValueError("variances must be positive")


@dataclass(frozen=True)
class Naive:
    """The no-prediction baseline: always predicts zero."""


Predictor = Average | FtAverage | Kalman | Naive


def ft_trimmed(values: list[Duration], mad_mult: float) -> list[Duration]:
    """Values kept by median/MAD trimming (|x - median| <= mad_mult * MAD)."""
    med = statistics.median(values)
    mad = statistics.median([abs(v - med) for v in values])
    return [v for v in values if abs(v - med) <= mad_mult * mad]


def kalman_fold(
    values: Iterable[Duration], process_var: float, measurement_var: float
) -> tuple[float, float]:
    """Run the scalar filter over ``values``; returns (estimate, variance).

    The first measurement initializes the state exactly; afterwards each
    step widens the variance by ``process_var`` and blends the new
    measurement in with the standard gain. Variance stays positive.
    """
    estimate: float | None = None
    variance = measurement_var
    for z in values:
        if estimate is None:
            estimate = float(z)
            continue
        variance += process_var
        gain = variance / (variance + measurement_var)
        estimate += gain * (z - estimate)
        variance *= 1.0 - gain
    return (0.0 if estimate is None else estimate), variance


def predict(predictor: Predictor, history: History) -> Duration:
    """Next-ETE prediction; 0 on an empty (or naive) history."""
    if isinstance(predictor, Naive):
        return 0
    if isinstance(predictor, Average):
        values = history.etes(last=predictor.window)
        return round(statistics.fmean(values)) if values else 0
    if isinstance(predictor, FtAverage):
        values = history.etes(last=predictor.window)
        if not values:
            return 0
        return round(statistics.fmean(ft_trimmed(values, predictor.mad_mult)))
    if isinstance(predictor, Kalman):
        values = history.etes()
        if not values:
            return 0
        estimate, _ = kalman_fold(values, predictor.process_var, predictor.measurement_var)
        return round(estimate)
    raise TypeError(f"unknown predictor {predictor!r}")


def schedule(desired: SimTime, ete_hat: Duration, now: SimTime = 0) -> SimTime:
    """Start time for a call that should complete at ``desired``.

    ``desired - ete_hat``, clamped to ``now`` when the prediction says the
    target is already unreachable.
    """
    return max(now, desired - ete_hat)


# --- Server models and the closed loop --------------------------------------


@dataclass(frozen=True)
class ConstantServer:
    """Fixed start lag and run time; ETE is learned exactly."""

    start_jitter: Duration = 0
    run_time: Duration = 0

    def draw(self, rng: np.random.Generator) -> tuple[Duration, Duration, Duration]:
        return self.start_jitter, self.run_time, 0


@dataclass(frozen=True)
class GaussianServer:
    """Run time ~ N(mean, std), truncated at zero; honest reports."""

    mean: Duration
    std: Duration

    def draw(self, rng: np.random.Generator) -> tuple[Duration, Duration, Duration]:
        run = max(0, round(rng.normal(self.mean, self.std)))
        return 0, run, 0


@dataclass(frozen=True)
class ContaminatedGaussianServer:
    """Gaussian run time whose *reported* completion is occasionally junk.

    With probability ``outlier_prob`` the completion report comes back
    inflated by ``outlier_scale * mean`` - a faulty timestamp, not a slow
    execution. The work itself is unaffected, so a robust predictor can
    keep scheduling accurately while a fragile one gets dragged away.
    """

    mean: Duration
    std: Duration
    outlier_prob: float = 0.05
    outlier_scale: float = 10.0

    def draw(self, rng: np.random.Generator) -> tuple[Duration, Duration, Duration]:
        run = max(0, round(rng.normal(self.mean, self.std)))
        bias = 0
        if rng.random() < self.outlier_prob:
            bias = round(self.outlier_scale * self.mean)
        return 0, run, bias


@dataclass(frozen=True)
class RpcOutcome:
    """Per-call result of a closed-loop run; ``error`` is completion - desired."""

    index: int
    desired: SimTime
    scheduled_start: SimTime
    actual_start: SimTime
    completion: SimTime
    error: Duration


def closed_loop_run(
    server_model,
    predictor: Predictor,
    n_rpcs: int,
    seed: int,
    desired_spacing: Duration = 1_000_000_000,
    history_capacity: int = DEFAULT_HISTORY_CAPACITY,
) -> list[RpcOutcome]:
    """Drive predict -> schedule -> dispatch -> record for ``n_rpcs`` calls.

    Desired completion times are spaced ``desired_spacing`` apart, far
    enough ahead that calls never overlap. Errors are measured against
    the true completion; what goes into the history is the server's
    *report*, which some models corrupt.
    """
    if n_rpcs < 1:
        raise ValueError("n_rpcs must be >= 1")
    rng = np.random.default_rng(seed)
    draws: list[tuple[Duration, Duration, Duration]] = []

    def next_jitter() -> Duration:
        return draws[-1][0]

    def next_run() -> Duration:
        return draws[-1][1]

    server = RpcServer(start_jitter=next_jitter, run_time=next_run)
    history = History(capacity=history_capacity)
    outcomes: list[RpcOutcome] = []
    now: SimTime = 0
    for i in range(n_rpcs):
        desired = (i + 1) * desired_spacing
        ete_hat = predict(predictor, history)
        t_s = schedule(desired, ete_hat, now)
        draws.append(server_model.draw(rng))
        pending = server.dispatch(ScheduledRpc(i, get_time=True), t_s)
        report_bias = draws[-1][2]
        history.record(
            EteSample(
                scheduled_start=t_s,
                actual_start=pending.actual_start,
                completion=pending.completion + report_bias,
            )
        )
        outcomes.append(
            RpcOutcome(
                index=i,
                desired=desired,
                scheduled_start=t_s,
                actual_start=pending.actual_start,
                completion=pending.completion,
                error=pending.completion - desired,
            )
        )
        now = max(now, pending.completion)
    return outcomes


def predictor_label(predictor: Predictor) -> str:
    return {
        Average: "average",
        FtAverage: "ft-average",
        Kalman: "kalman",
        Naive: "naive",
    }[type(predictor)]


def write_outcomes_csv(stream: IO[str], outcomes: list[RpcOutcome], label: str) -> None:
    """Emit per-call rows for offline analysis (times in integer ns)."""
    writer = csv.writer(stream)
    writer.writerow(
        [
            "rpc_index",
            "desired_time",
            "scheduled_start",
            "actual_start",
            "completion",
            "error",
            "predictor",
        ]
    )
    for o in outcomes:
        writer.writerow(
            [o.index, o.desired, o.scheduled_start, o.actual_start, o.completion, o.error, label]
        )
