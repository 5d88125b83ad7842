"""Discrete-event engine: integer-millisecond clock, ordered event queue,
named random streams and metric series.

Times are plain ``int`` milliseconds everywhere in the package.  Use
:func:`seconds`, :func:`minutes`, :func:`hours` and :func:`days` to build
them from human units.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

MS_PER_S = 1000
MS_PER_MIN = 60 * MS_PER_S
MS_PER_H = 60 * MS_PER_MIN
MS_PER_DAY = 24 * MS_PER_H

# Sentinel duration for windows with no reservation bounding them.
UNBOUNDED: Optional[int] = None


def _to_ms(value: float, scale: int) -> int:
    return int(round(value * scale))


def seconds(x: float) -> int:
    return _to_ms(x, MS_PER_S)


def minutes(x: float) -> int:
    return _to_ms(x, MS_PER_MIN)


def hours(x: float) -> int:
    return _to_ms(x, MS_PER_H)


def days(x: float) -> int:
    return _to_ms(x, MS_PER_DAY)


def ceil_ms(x_seconds: float) -> int:
    """Round a duration in seconds up to the next whole millisecond.

    A relative slack of 1e-9 absorbs float noise so exact values such as
    0.32 s map to 320 ms, not 321 ms.
    """
    ms = x_seconds * MS_PER_S
    return int(math.ceil(ms - 1e-9 * max(1.0, abs(ms))))


class PastEvent(ValueError):
    pass


class UnknownMetric(KeyError):
    pass


class EventKind(enum.Enum):
    JOB_ARRIVAL = "job-arrival"
    JOB_START = "job-start"
    JOB_END = "job-end"
    PILOT_REGISTER = "pilot-register"
    PILOT_EXPIRE = "pilot-expire"
    TASK_DISPATCH = "task-dispatch"
    TASK_COMPLETE = "task-complete"
    TASK_PREEMPT = "task-preempt"
    TRANSFER_COMPLETE = "transfer-complete"
    CREDENTIAL_RENEWAL = "credential-renewal"
    CREDENTIAL_EXPIRE = "credential-expire"
    SCHEDULER_CYCLE = "scheduler-cycle"
    BROKER_CYCLE = "broker-cycle"
    METRIC_SAMPLE = "metric-sample"


@dataclass(eq=False)
class Event:
    fire_at: int
    kind: EventKind
    entity_id: object = "-"
    action: Optional[Callable[[], None]] = None
    detail: str = ""
    seq: int = -1
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class MetricSeries:
    name: str
    times: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def append(self, t: int, value: float) -> None:
        # same-instant samples are allowed, going backwards is not
        if self.times and t < self.times[-1]:
            raise ValueError(f"sample at {t} precedes last sample {self.times[-1]} in {self.name}")
        self.times.append(t)
        self.values.append(value)

    @property
    def samples(self) -> list:
        return list(zip(self.times, self.values))

    def __len__(self) -> int:
        return len(self.times)


class RngStreams:
    """Independent PCG64 generators keyed by a label.

    The child seed is ``SeedSequence([seed, h])`` where ``h`` is the first
    8 bytes of the BLAKE2b digest of the label, so streams are stable across
    platforms and adding a stream never perturbs another one.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    @staticmethod
    def label_key(stream_id: str) -> int:
        digest = hashlib.blake2b(stream_id.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def stream(self, stream_id: str) -> np.random.Generator:
        gen = self._streams.get(stream_id)
        if gen is None:
            ss = np.random.SeedSequence([self.seed, self.label_key(stream_id)])
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[stream_id] = gen
        return gen

    __getitem__ = stream


@dataclass
class SimReport:
    clock: int
    series: dict
    scalars: dict
    trace: Optional[list] = None

    def metrics_csv(self) -> str:
        """Rows ``time_ms,metric,value`` ordered by time then registration order."""
        rows = []
        for order, s in enumerate(self.series.values()):
            for t, v in zip(s.times, s.values):
                rows.append((t, order, s.name, v))
        rows.sort(key=lambda r: (r[0], r[1]))
        lines = ["time_ms,metric,value"]
        lines.extend(f"{t},{name},{_fmt(v)}" for t, _, name, v in rows)
        return "\n".join(lines) + "\n"

    def trace_log(self) -> str:
        return "".join(line + "\n" for line in (self.trace or []))


def _fmt(v: float) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Engine:
    """Single-threaded event loop ordered by ``(fire_at, seq)``."""

    def __init__(self, trace: bool = False):
        self.clock = 0
        self._seq = 0
        self._queue: list = []
        self.series: dict[str, MetricSeries] = {}
        self.scalars: dict[str, float] = {}
        self.trace: Optional[list] = [] if trace else None
        self.processed = 0
        self._stopped = False

    # -- queue ---------------------------------------------------------
    def schedule(self, event: Event) -> Event:
        if event.fire_at < self.clock:
            raise PastEvent(f"event at {event.fire_at} ms is before clock {self.clock} ms")
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (event.fire_at, event.seq, event))
        return event

    def at(self, fire_at: int, kind: EventKind, action: Callable[[], None], entity_id: object = "-",
           detail: str = "") -> Event:
        return self.schedule(Event(int(fire_at), kind, entity_id, action, detail))

    def after(self, delay: int, kind: EventKind, action: Callable[[], None], entity_id: object = "-",
              detail: str = "") -> Event:
        return self.at(self.clock + int(delay), kind, action, entity_id, detail)

    def pending(self) -> int:
        return sum(1 for _, _, e in self._queue if not e.cancelled)

    def stop(self) -> None:
        """Stop the current :meth:`run_until` after the event being processed."""
        self._stopped = True

    def run_until(self, t_end: int) -> SimReport:
        self._stopped = False
        q = self._queue
        while q and q[0][0] <= t_end:
            fire_at, _, ev = heapq.heappop(q)
            if ev.cancelled:
                continue
            self.clock = fire_at
            self.processed += 1
            self.note(ev.kind, ev.entity_id, ev.detail)
            if ev.action is not None:
                ev.action()
            if self._stopped:
                break
        if not self._stopped:
            self.clock = max(self.clock, t_end)
        return self.report()

    def report(self) -> SimReport:
        return SimReport(self.clock, self.series, dict(self.scalars),
                         list(self.trace) if self.trace is not None else None)

    # -- observation ---------------------------------------------------
    def note(self, kind: EventKind, entity_id: object = "-", detail: str = "") -> None:
        """Append a trace line at the current clock (no-op when tracing is off)."""
        if self.trace is not None:
            self.trace.append(f"{self.clock} {kind.value} {entity_id} {detail}".rstrip())

    def register_metric(self, name: str) -> MetricSeries:
        if name not in self.series:
            self.series[name] = MetricSeries(name)
        return self.series[name]

    def sample(self, metric: str, value: float) -> None:
        try:
            s = self.series[metric]
        except KeyError:
            raise UnknownMetric(metric) from None
        s.append(self.clock, value)
