"""Stage-in/stage-out transfers over a load-balanced DTN pool and a shared
filesystem input cache, gated by a renewable credential.

Sizes are gigabytes, rates gigabits per second.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import MS_PER_DAY, MS_PER_S, Engine, EventKind, ceil_ms


class CredentialExpired(RuntimeError):
    pass


class CacheFull(RuntimeError):
    pass


class Direction(str, enum.Enum):
    STAGE_IN = "stage_in"
    STAGE_OUT = "stage_out"


@dataclass
class Credential:
    issued_at: int = 0
    lifetime_days: float = 11.0
    renewal_period_days: float = 7.0
    auto_renew: bool = True

    @property
    def lifetime(self) -> int:
        return int(round(self.lifetime_days * MS_PER_DAY))

    @property
    def renewal_period(self) -> int:
        return int(round(self.renewal_period_days * MS_PER_DAY))

    def last_issue(self, t: int) -> int:
        if not self.auto_renew or t < self.issued_at or self.renewal_period <= 0:
            return self.issued_at
        return self.issued_at + (t - self.issued_at) // self.renewal_period * self.renewal_period

    def valid(self, t: int) -> bool:
        return self.issued_at <= t and t - self.last_issue(t) < self.lifetime

    def expires_at(self, t: int) -> int:
        return self.last_issue(t) + self.lifetime

    def renew(self, t: int) -> None:
        self.issued_at = t


class _Pool:
    """Processor-sharing bandwidth pool.

    Every moving transfer gets the same rate ``min(cap, aggregate / n)``, so
    progress is tracked once per pool as ``service``: gigabytes delivered to
    each moving transfer since the pool was created.  A transfer finishes
    when ``service`` reaches the level recorded at its start plus its size,
    and only the earliest such finish needs an event.
    """

    def __init__(self, aggregate: float, cap: float):
        self.aggregate = aggregate
        self.cap = cap
        self.active: dict[int, "Transfer"] = {}
        self.service = 0.0
        self.last = 0
        self.rate = 0.0
        self.max_rate = 0.0
        self.paused = False
        self.heap: list = []
        self.ev = None

    def service_at(self, t: int) -> float:
        return self.service + self.rate * (t - self.last) / MS_PER_S / 8

    def advance(self, t: int) -> None:
        self.service = self.service_at(t)
        self.last = t

    def share(self) -> float:
        n = len(self.active)
        if self.paused or n == 0:
            return 0.0
        return min(self.cap, self.aggregate / n)


@dataclass(eq=False)
class Transfer:
    id: int
    dataset: str
    size_gb: float
    direction: Direction
    started: int
    remote: bool
    fills_cache: bool = False
    finished: Optional[int] = None
    waiters: list = field(default_factory=list, repr=False)
    _pool: Optional[_Pool] = field(default=None, repr=False)
    _join: float = field(default=0.0, repr=False)
    _clock: Optional[Callable[[], int]] = field(default=None, repr=False)
    _delivered: float = field(default=0.0, repr=False)
    max_rate_gbps: float = 0.0

    @property
    def done(self) -> bool:
        return self.finished is not None

    @property
    def delivered_gb(self) -> float:
        """Integral of the assigned rate so far (gigabytes)."""
        if self.done or self._pool is None:
            return self._delivered
        return self._pool.service_at(self._clock()) - self._join

    @property
    def remaining_gb(self) -> float:
        return max(self.size_gb - self.delivered_gb, 0.0)

    @property
    def current_rate_gbps(self) -> float:
        if self.done or self._pool is None:
            return 0.0
        return self._pool.rate

    @property
    def paused(self) -> bool:
        return self._pool is not None and not self.done and self._pool.paused


@dataclass
class DataHub:
    dtn_count: int = 12
    per_dtn_gbps: float = 10.0
    stream_cap_gbps: float = 10.0

    @property
    def aggregate_gbps(self) -> float:
        return self.dtn_count * self.per_dtn_gbps


@dataclass
class SharedFilesystem:
    agg_bw_gbps: float = 100.0
    capacity_gb: float = 0.0  # 0 disables the input cache
    cache: "OrderedDict[str, float]" = field(default_factory=OrderedDict)
    pins: dict = field(default_factory=dict)

    @property
    def enabled(self) -> bool:
        return self.capacity_gb > 0

    def used_gb(self) -> float:
        return sum(self.cache.values())


class DataPlane:
    def __init__(self, engine: Engine, hub: Optional[DataHub] = None, fs: Optional[SharedFilesystem] = None,
                 credential: Optional[Credential] = None):
        self.engine = engine
        self.hub = hub or DataHub()
        self.fs = fs or SharedFilesystem()
        self.credential = credential or Credential()
        self._ids = itertools.count(1)
        self._remote = _Pool(self.hub.aggregate_gbps, self.hub.stream_cap_gbps)
        self._local = _Pool(self.fs.agg_bw_gbps, self.fs.agg_bw_gbps)
        self.completed: list[Transfer] = []
        self._filling: dict[str, Transfer] = {}
        self._cached_ready: set = set()
        self.hub_transfers = 0
        self.cache_hits = 0
        self.pause_intervals: list[list] = []

    @property
    def remote(self) -> dict[int, Transfer]:
        return self._remote.active

    @property
    def local(self) -> dict[int, Transfer]:
        return self._local.active

    # -- credential ------------------------------------------------------
    def credential_valid(self) -> bool:
        return self.credential.valid(self.engine.clock)

    def start_credential_clock(self) -> None:
        """Schedule renewals and the expiry check for the current credential."""
        cred = self.credential
        now = self.engine.clock
        if cred.auto_renew and cred.renewal_period > 0:
            nxt = cred.last_issue(now) + cred.renewal_period
            self.engine.at(nxt, EventKind.CREDENTIAL_RENEWAL, self.credential_tick, "credential")
        self.engine.at(cred.expires_at(now), EventKind.CREDENTIAL_EXPIRE, self._expiry_check, "credential")

    def credential_tick(self) -> None:
        """Renewal event: reissue, resume paused transfers, plan the next renewal."""
        now = self.engine.clock
        cred = self.credential
        if not cred.auto_renew:
            return
        self._resume_remote()
        self.engine.at(now + cred.renewal_period, EventKind.CREDENTIAL_RENEWAL, self.credential_tick, "credential")
        self.engine.at(cred.expires_at(now), EventKind.CREDENTIAL_EXPIRE, self._expiry_check, "credential")

    def renew(self) -> None:
        """Manual reissue at the current clock."""
        self.credential.renew(self.engine.clock)
        self._resume_remote()
        self.engine.at(self.credential.expires_at(self.engine.clock), EventKind.CREDENTIAL_EXPIRE,
                       self._expiry_check, "credential")

    def _expiry_check(self) -> None:
        if self.credential_valid():
            return
        now = self.engine.clock
        if not self.pause_intervals or self.pause_intervals[-1][1] is not None:
            self.pause_intervals.append([now, None])
            self.engine.note(EventKind.CREDENTIAL_EXPIRE, "credential", "remote transfers paused")
        self._remote.advance(now)
        self._remote.paused = True
        self._retime(self._remote)

    def _resume_remote(self) -> None:
        if not self.credential_valid():
            return
        if self.pause_intervals and self.pause_intervals[-1][1] is None:
            self.pause_intervals[-1][1] = self.engine.clock
            self.engine.note(EventKind.CREDENTIAL_RENEWAL, "credential", "remote transfers resumed")
        self._remote.advance(self.engine.clock)
        self._remote.paused = False
        self._retime(self._remote)

    # -- cache -----------------------------------------------------------
    def is_cached(self, dataset: str) -> bool:
        return dataset in self._cached_ready

    def pin(self, dataset: str) -> None:
        self.fs.pins[dataset] = self.fs.pins.get(dataset, 0) + 1

    def unpin(self, dataset: str) -> None:
        left = self.fs.pins.get(dataset, 0) - 1
        if left > 0:
            self.fs.pins[dataset] = left
        else:
            self.fs.pins.pop(dataset, None)

    def prepopulate(self, datasets: dict) -> None:
        for name, size in datasets.items():
            self._reserve(name, size)
            self._cached_ready.add(name)

    def _reserve(self, dataset: str, size_gb: float) -> None:
        fs = self.fs
        if size_gb > fs.capacity_gb:
            raise CacheFull(f"dataset {dataset} ({size_gb} GB) exceeds cache capacity {fs.capacity_gb} GB")
        free = fs.capacity_gb - fs.used_gb()
        if free < size_gb:
            for victim in list(fs.cache):
                if free >= size_gb:
                    break
                if fs.pins.get(victim) or victim in self._filling:
                    continue
                free += fs.cache.pop(victim)
                self._cached_ready.discard(victim)
        if free < size_gb - 1e-12:
            raise CacheFull(f"cannot free {size_gb} GB for dataset {dataset}")
        fs.cache[dataset] = size_gb

    # -- transfers -------------------------------------------------------
    def stage_in_estimate(self, size_gb: float) -> int:
        """Optimistic stage-in time used by matchmakers: size over the stream cap."""
        return ceil_ms(size_gb * 8 / self.hub.stream_cap_gbps)

    def begin_transfer(self, dataset: str, size_gb: float, direction: Direction | str,
                       on_done: Optional[Callable[[Transfer], None]] = None, use_cache: bool = True,
                       allow_paused: bool = False) -> Transfer:
        """Start a transfer and return it; ``on_done`` fires on completion.

        Stage-ins of cached datasets read from the shared filesystem.  A
        stage-in of a dataset already being fetched joins that transfer.
        Remote transfers need a valid credential unless ``allow_paused``, in
        which case they wait paused until renewal.
        """
        direction = Direction(direction)
        if size_gb < 0:
            raise ValueError("transfer size must be nonnegative")
        now = self.engine.clock
        caching = use_cache and self.fs.enabled and direction is Direction.STAGE_IN
        if caching and dataset in self._cached_ready:
            self.fs.cache.move_to_end(dataset)
            self.cache_hits += 1
            tr = Transfer(next(self._ids), dataset, size_gb, direction, now, remote=False)
            if on_done:
                tr.waiters.append(on_done)
            self._add(self._local, tr)
            return tr
        if caching and dataset in self._filling:
            tr = self._filling[dataset]
            if on_done:
                tr.waiters.append(on_done)
            return tr
        valid = self.credential_valid()
        if not valid and not allow_paused:
            raise CredentialExpired(f"credential invalid at {now} ms; cannot reach the data hub")
        if caching:
            self._reserve(dataset, size_gb)
        tr = Transfer(next(self._ids), dataset, size_gb, direction, now, remote=True, fills_cache=caching)
        if on_done:
            tr.waiters.append(on_done)
        if caching:
            self._filling[dataset] = tr
        self.hub_transfers += 1
        self._add(self._remote, tr)
        return tr

    def detach(self, tr: Transfer, waiter: Callable) -> None:
        """Drop interest in ``tr``; it is cancelled unless it still fills the cache
        or other parties wait on it."""
        if tr.done:
            return
        if waiter in tr.waiters:
            tr.waiters.remove(waiter)
        if tr.waiters or tr.fills_cache:
            return
        pool = tr._pool
        pool.advance(self.engine.clock)
        tr._delivered = pool.service - tr._join
        tr._pool = None
        del pool.active[tr.id]
        self._retime(pool)

    def rates(self) -> dict[int, float]:
        """Current per-transfer rate assignment (Gbps) for every active transfer."""
        return {tid: pool.rate for pool in (self._remote, self._local) for tid in pool.active}

    def active(self) -> list[Transfer]:
        return list(self._remote.active.values()) + list(self._local.active.values())

    def _add(self, pool: _Pool, tr: Transfer) -> None:
        pool.advance(self.engine.clock)
        tr._pool = pool
        tr._clock = lambda: self.engine.clock
        tr._join = pool.service
        pool.active[tr.id] = tr
        heapq.heappush(pool.heap, (pool.service + tr.size_gb, tr.id))
        self._retime(pool)

    def _due_ms(self, pool: _Pool, target: float) -> int:
        return ceil_ms(max(target - pool.service, 0.0) * 8 / pool.rate)

    def _retime(self, pool: _Pool) -> None:
        """New share for everyone after an arrival, departure or pause."""
        pool.rate = pool.share()
        pool.max_rate = max(pool.max_rate, pool.rate)
        if pool.ev is not None:
            pool.ev.cancel()
            pool.ev = None
        heap = pool.heap
        while heap and heap[0][1] not in pool.active:
            heapq.heappop(heap)
        if not heap or pool.rate <= 0:
            return
        when = self.engine.clock + self._due_ms(pool, heap[0][0])
        pool.ev = self.engine.at(when, EventKind.TRANSFER_COMPLETE, lambda: self._finish_due(pool), "transfers",
                                 "remote" if pool is self._remote else "local")

    def _finish_due(self, pool: _Pool) -> None:
        now = self.engine.clock
        pool.ev = None
        pool.advance(now)
        done = []
        heap = pool.heap
        while heap:
            target, tid = heap[0]
            tr = pool.active.get(tid)
            if tr is None:
                heapq.heappop(heap)
                continue
            if self._due_ms(pool, target) > 0:
                break
            heapq.heappop(heap)
            done.append(tr)
        for tr in done:
            del pool.active[tr.id]
            tr._delivered = pool.service - tr._join
            tr.max_rate_gbps = pool.max_rate
            tr._pool = None
            tr.finished = now
            self.completed.append(tr)
            where = "remote" if tr.remote else "local"
            self.engine.note(EventKind.TRANSFER_COMPLETE, tr.id, f"{tr.direction.value} {tr.dataset} {where}")
            if tr.fills_cache:
                self._filling.pop(tr.dataset, None)
                if tr.dataset in self.fs.cache:
                    self._cached_ready.add(tr.dataset)
        self._retime(pool)
        for tr in done:
            waiters, tr.waiters = tr.waiters, []
            for cb in waiters:
                cb(tr)

    def flow_error_gb(self, tr: Transfer) -> float:
        return tr.delivered_gb - tr.size_gb

    def flow_tolerance_gb(self, tr: Transfer) -> float:
        """One millisecond at the fastest rate its pool reached."""
        return max(tr.max_rate_gbps, 0.0) * 1e-3 / 8 + 1e-9 * max(1.0, tr.size_gb)

    @staticmethod
    def transfer_seconds(size_gb: float, rate_gbps: float) -> float:
        return math.inf if rate_gbps <= 0 else size_gb * 8 / rate_gbps
