"""HPC machine model: nodes on a torus, a priority batch queue with EASY
backfill, placement policies and backfill-window queries.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .core import MS_PER_S, Engine, EventKind, seconds
from .topology import Torus, torus_dims


class TooLarge(ValueError):
    pass


class NoFit(Exception):
    pass


class EmptyWindow(ValueError):
    pass


class InvariantViolation(AssertionError):
    pass


class JobKind(str, enum.Enum):
    HPC = "hpc"
    PILOT = "pilot"
    WRAPPER = "wrapper"


class Placement(str, enum.Enum):
    TOPOLOGY_AWARE = "topology_aware"
    TRANSPARENT = "transparent"


class JobState(str, enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    EXPIRED = "expired"
    CANCELLED = "cancelled"


@dataclass(eq=False)
class BatchJob:
    nodes_requested: int
    walltime_req: int
    priority: int = 0
    kind: JobKind = JobKind.HPC
    placement: Optional[Placement] = None  # None: cluster default
    preemptible: bool = False
    runtime: Optional[int] = None  # None: holds its nodes until released or killed
    id: Optional[int] = None
    arrival: Optional[int] = None
    assigned_nodes: tuple = ()
    start: Optional[int] = None
    end: Optional[int] = None
    state: JobState = JobState.QUEUED
    backfilled: bool = False
    on_start: Optional[Callable[["BatchJob"], None]] = field(default=None, repr=False)
    on_end: Optional[Callable[["BatchJob", str], None]] = field(default=None, repr=False)
    _end_ev: object = field(default=None, repr=False)
    _kill_ev: object = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = JobKind(self.kind)
        if self.placement is not None:
            self.placement = Placement(self.placement)
        if self.kind is JobKind.WRAPPER:
            self.preemptible = True
        if self.nodes_requested <= 0:
            raise ValueError("nodes_requested must be positive")
        if self.walltime_req <= 0:
            raise ValueError("walltime_req must be positive")

    @property
    def walltime_end(self) -> Optional[int]:
        return None if self.start is None else self.start + self.walltime_req


@dataclass(frozen=True)
class BackfillWindow:
    node_count: int
    start: int
    duration: Optional[int]  # None: unbounded

    def admits(self, nodes: int, walltime: int) -> bool:
        return nodes <= self.node_count and (self.duration is None or walltime <= self.duration)


@dataclass(frozen=True)
class Reservation:
    job_id: int
    start: int
    nodes: tuple


@dataclass
class HeadEpisode:
    job_id: int
    reserved_start: int
    actual_start: Optional[int] = None


class Cluster:
    """One HPC machine owned by an :class:`~htcsim.core.Engine`."""

    def __init__(self, engine: Engine, nodes: int, cores_per_node: int = 32, memory_gb: float = 64.0,
                 torus: Optional[Iterable[int]] = None, placement: str = "transparent",
                 compactness_limit: float = 2.0, scheduler_period_s: float = 60.0, backfill: bool = True):
        if nodes <= 0 or cores_per_node <= 0 or memory_gb <= 0:
            raise ValueError("cluster sizes must be positive")
        dims = tuple(torus) if torus else torus_dims(nodes)
        if math.prod(dims) != nodes:
            raise ValueError(f"torus {list(dims)} has {math.prod(dims)} positions for {nodes} nodes")
        self.engine = engine
        self.size = nodes
        self.cores_per_node = cores_per_node
        self.memory_gb = memory_gb
        self.torus = Torus(dims)
        self.placement = Placement(placement)
        self.compactness_limit = compactness_limit
        self.scheduler_period = seconds(scheduler_period_s)
        self.backfill = backfill

        self.node_job: list[Optional[int]] = [None] * nodes
        self.free = np.ones(nodes, dtype=bool)
        self.drained: set[int] = set()
        self._drain_pending: set[int] = set()
        self.queue: list[BatchJob] = []
        self.running: dict[int, BatchJob] = {}
        self.finished: list[BatchJob] = []

        self._cycle_pending_at: Optional[int] = None
        self._dirty = True
        self.post_cycle_hooks: list[Callable[[], None]] = []
        self.start_observers: list[Callable[["Cluster", BatchJob, list, Optional[Reservation]], None]] = []

        self.reservation: Optional[Reservation] = None
        self._episode: Optional[HeadEpisode] = None
        self.head_episodes: list[HeadEpisode] = []
        self.reservation_delays = 0
        self.cycles = 0
        self._ids = itertools.count(1)

        # accounting: a step function of busy nodes plus per-node intervals
        self._busy = 0
        self._busy_kind = {k: 0 for k in JobKind}
        self._last_t = 0
        self.busy_node_ms = 0
        self.kind_node_ms = {k: 0 for k in JobKind}
        self._step_t = [0]
        self._step_busy = [0]
        self._step_cum = [0]
        self._busy_since: list[Optional[int]] = [None] * nodes
        self.node_intervals: list[list[tuple[int, int]]] = [[] for _ in range(nodes)]

    # -- submission ------------------------------------------------------
    def policy_of(self, job: BatchJob) -> Placement:
        return job.placement or self.placement

    def submit(self, job: BatchJob) -> BatchJob:
        if job.arrival is not None or job.state is not JobState.QUEUED:
            raise ValueError(f"job {job.id} was already submitted")
        if job.nodes_requested > self.size:
            raise TooLarge(f"job requests {job.nodes_requested} nodes, cluster has {self.size}")
        if self.policy_of(job) is Placement.TOPOLOGY_AWARE:
            if not self.torus.fits_when_empty(job.nodes_requested, self.compactness_limit):
                raise TooLarge(f"no compact placement of {job.nodes_requested} nodes exists on torus "
                               f"{list(self.torus.dims)} at compactness limit {self.compactness_limit}")
        if job.id is None:
            job.id = next(self._ids)
        job.arrival = self.engine.clock
        self.queue.append(job)
        self._dirty = True
        self.engine.note(EventKind.JOB_ARRIVAL, job.id, f"kind={job.kind.value} nodes={job.nodes_requested}")
        self.request_cycle()
        return job

    def cancel(self, job: BatchJob) -> None:
        """Withdraw a queued job."""
        if job.state is not JobState.QUEUED:
            raise ValueError(f"job {job.id} is not queued")
        self.queue.remove(job)
        job.state = JobState.CANCELLED
        job.end = self.engine.clock
        self._dirty = True
        self.request_cycle()

    def request_cycle(self) -> None:
        now = self.engine.clock
        if self._cycle_pending_at == now:
            return
        self._cycle_pending_at = now
        self.engine.at(now, EventKind.SCHEDULER_CYCLE, self._cycle_event, "cluster")

    def start_periodic(self) -> None:
        def tick():
            if self._dirty:
                self.schedule_cycle()
            self.engine.after(self.scheduler_period, EventKind.SCHEDULER_CYCLE, tick, "cluster", "periodic")

        self.engine.after(self.scheduler_period, EventKind.SCHEDULER_CYCLE, tick, "cluster", "periodic")

    def _cycle_event(self) -> None:
        if self._cycle_pending_at == self.engine.clock:
            self._cycle_pending_at = None
        self.schedule_cycle()

    def _run_hooks(self) -> None:
        for hook in self.post_cycle_hooks:
            hook()

    # -- scheduling ------------------------------------------------------
    def ordered_queue(self) -> list[BatchJob]:
        return sorted(self.queue, key=lambda j: (-j.priority, j.arrival, j.id))

    def free_ids(self) -> list[int]:
        return np.flatnonzero(self.free).tolist()

    def _try_place(self, job: BatchJob, mask: np.ndarray) -> Optional[list[int]]:
        n = job.nodes_requested
        if self.policy_of(job) is Placement.TRANSPARENT:
            ids = np.flatnonzero(mask)
            return ids[:n].tolist() if len(ids) >= n else None
        return self.torus.place_compact(mask, n, self.compactness_limit)

    def place(self, job: BatchJob, free: Iterable[int]) -> list[int]:
        """Choose nodes for ``job`` among ``free`` or raise :class:`NoFit`."""
        mask = np.zeros(self.size, dtype=bool)
        mask[list(free)] = True
        nodes = self._try_place(job, mask)
        if nodes is None:
            raise NoFit(f"job {job.id}: no {self.policy_of(job).value} placement for "
                        f"{job.nodes_requested} nodes among {int(mask.sum())} free")
        return nodes

    def compute_reservation(self, head: BatchJob) -> Optional[Reservation]:
        """Earliest start for ``head`` given running jobs' walltime ends.

        Returns ``None`` when no such time exists (drained nodes).
        """
        now = self.engine.clock
        mask = self.free.copy()
        n = head.nodes_requested
        transparent = self.policy_of(head) is Placement.TRANSPARENT
        released: list[int] = []
        ends = sorted(self.running.values(), key=lambda j: (j.walltime_end, j.id))
        idx = 0
        t = now
        while True:
            if transparent:
                if int(mask.sum()) >= n:
                    # reserve nodes that are busy now first, so currently idle ones stay usable
                    chosen = sorted(released)[:n]
                    if len(chosen) < n:
                        now_free = np.flatnonzero(self.free).tolist()
                        chosen += now_free[: n - len(chosen)]
                    return Reservation(head.id, t, tuple(sorted(chosen)))
            else:
                nodes = self.torus.place_compact(mask, n, self.compactness_limit)
                if nodes is not None:
                    return Reservation(head.id, t, tuple(nodes))
            if idx >= len(ends):
                return None
            t = ends[idx].walltime_end
            while idx < len(ends) and ends[idx].walltime_end == t:
                for node in ends[idx].assigned_nodes:
                    if node not in self.drained and node not in self._drain_pending:
                        mask[node] = True
                        released.append(node)
                idx += 1

    def schedule_cycle(self) -> list[BatchJob]:
        """Start what fits in priority order, reserve for the blocked head and
        backfill behind it without delaying that reservation (EASY).

        Post-cycle hooks run afterwards."""
        started = self._schedule()
        self._run_hooks()
        return started

    def _schedule(self) -> list[BatchJob]:
        self.cycles += 1
        self._dirty = False
        started: list[BatchJob] = []
        queue = self.ordered_queue()
        i = 0
        while i < len(queue):
            job = queue[i]
            nodes = self._try_place(job, self.free)
            if nodes is None:
                break
            self._start(job, nodes, backfilled=False)
            started.append(job)
            i += 1
        if i == len(queue):
            self.reservation = None
            self._episode = None
            return started

        head = queue[i]
        res = self.compute_reservation(head)
        self.reservation = res
        if res is not None:
            # jobs started ahead of the head outrank it and may push it back; that opens a new episode
            if self._episode is None or self._episode.job_id != head.id or started:
                self._episode = HeadEpisode(head.id, res.start)
                self.head_episodes.append(self._episode)
            elif res.start > self._episode.reserved_start:
                raise InvariantViolation(
                    f"reservation of head job {head.id} moved from {self._episode.reserved_start} to {res.start}")
        if not self.backfill or res is None:
            return started

        now = self.engine.clock
        reserved = np.zeros(self.size, dtype=bool)
        reserved[list(res.nodes)] = True
        failed: dict = {}
        for job in queue[i + 1:]:
            short = now + job.walltime_req <= res.start
            policy = self.policy_of(job)
            n = job.nodes_requested
            key = (short, policy)
            prior = failed.setdefault(key, set())
            if policy is Placement.TRANSPARENT:
                if prior and n >= min(prior):
                    continue
            elif n in prior:
                continue
            mask = self.free if short else (self.free & ~reserved)
            nodes = self._try_place(job, mask)
            if nodes is None:
                prior.add(n)
                continue
            self._start(job, nodes, backfilled=True)
            started.append(job)
            failed.clear()
        return started

    def _start(self, job: BatchJob, nodes: list[int], backfilled: bool) -> None:
        for obs in self.start_observers:
            obs(self, job, nodes, self.reservation if backfilled else None)
        now = self.engine.clock
        self._account()
        for node in nodes:
            if not self.free[node]:
                raise InvariantViolation(f"node {node} is not free for job {job.id}")
            self.free[node] = False
            self.node_job[node] = job.id
            self._busy_since[node] = now
        self._set_busy(self._busy + len(nodes), job.kind, len(nodes))
        self.queue.remove(job)
        job.assigned_nodes = tuple(nodes)
        job.start = now
        job.state = JobState.RUNNING
        job.backfilled = backfilled
        self.running[job.id] = job
        if self._episode is not None and self._episode.job_id == job.id:
            self._episode.actual_start = now
            if now > self._episode.reserved_start:
                self.reservation_delays += 1
            self._episode = None
        self.engine.note(EventKind.JOB_START, job.id,
                         f"kind={job.kind.value} nodes={len(nodes)}" + (" backfill" if backfilled else ""))
        if job.runtime is not None and job.runtime <= job.walltime_req:
            job._end_ev = self.engine.after(job.runtime, EventKind.JOB_END, lambda: self.finish(job),
                                            job.id, "done")
        kill_kind = EventKind.PILOT_EXPIRE if job.kind is JobKind.PILOT else EventKind.JOB_END
        job._kill_ev = self.engine.after(job.walltime_req, kill_kind, lambda: self.kill_at_walltime(job),
                                         job.id, "walltime")
        if job.on_start is not None:
            job.on_start(job)

    # -- termination -----------------------------------------------------
    def finish(self, job: BatchJob) -> None:
        """End a running job before (or exactly at) its walltime."""
        if job.state is not JobState.RUNNING:
            raise ValueError(f"job {job.id} is not running")
        self._release(job, JobState.COMPLETED)

    def kill_at_walltime(self, job: BatchJob) -> None:
        if job.state is not JobState.RUNNING:
            return
        if self.engine.clock != job.walltime_end:
            raise InvariantViolation(f"job {job.id} killed at {self.engine.clock}, walltime ends {job.walltime_end}")
        self._release(job, JobState.EXPIRED)

    def _release(self, job: BatchJob, state: JobState) -> None:
        now = self.engine.clock
        for ev in (job._end_ev, job._kill_ev):
            if ev is not None:
                ev.cancel()
        self._account()
        for node in job.assigned_nodes:
            self.node_intervals[node].append((self._busy_since[node], now))
            self._busy_since[node] = None
            self.node_job[node] = None
            if node in self._drain_pending:
                self._drain_pending.discard(node)
                self.drained.add(node)
            else:
                self.free[node] = True
        self._set_busy(self._busy - len(job.assigned_nodes), job.kind, -len(job.assigned_nodes))
        job.end = now
        job.state = state
        del self.running[job.id]
        self.finished.append(job)
        self._dirty = True
        if job.on_end is not None:
            job.on_end(job, state.value)
        self.request_cycle()

    def drain(self, node: int) -> None:
        if node in self.drained:
            return
        if self.free[node]:
            self.free[node] = False
            self.drained.add(node)
        else:
            self._drain_pending.add(node)

    # -- windows ---------------------------------------------------------
    def query_backfill_windows(self) -> list[BackfillWindow]:
        """Holes a transparent job can use now without delaying the head.

        Assumes a scheduling cycle has just run, so the first queued job (if
        any) is blocked.  Sorted by node count, largest first.
        """
        now = self.engine.clock
        n_free = int(self.free.sum())
        if n_free == 0:
            return []
        queue = self.ordered_queue()
        if not queue:
            return [BackfillWindow(n_free, now, None)]
        if not self.backfill:
            return []
        res = self.compute_reservation(queue[0])
        if res is None:
            return []
        outside = int((self.free & ~self._mask(res.nodes)).sum())
        windows = []
        if outside < n_free and res.start > now:
            windows.append(BackfillWindow(n_free, now, res.start - now))
        if outside > 0:
            windows.append(BackfillWindow(outside, now, None))
        windows.sort(key=lambda w: (-w.node_count, -(w.duration if w.duration is not None else math.inf)))
        return windows

    def _mask(self, ids: Iterable[int]) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[list(ids)] = True
        return m

    # -- accounting ------------------------------------------------------
    def _account(self) -> None:
        now = self.engine.clock
        dt = now - self._last_t
        if dt:
            self.busy_node_ms += self._busy * dt
            for k, b in self._busy_kind.items():
                self.kind_node_ms[k] += b * dt
            self._last_t = now

    def _set_busy(self, busy: int, kind: JobKind, delta: int) -> None:
        now = self.engine.clock
        self._busy_kind[kind] += delta
        self._busy = busy
        if self._step_t[-1] == now:
            self._step_busy[-1] = busy
        else:
            prev_t, prev_b = self._step_t[-1], self._step_busy[-1]
            self._step_cum.append(self._step_cum[-1] + prev_b * (now - prev_t))
            self._step_t.append(now)
            self._step_busy.append(busy)

    def _busy_integral(self, t: int) -> int:
        """Busy node-ms accumulated over [0, t] from the step function."""
        k = bisect.bisect_right(self._step_t, t) - 1
        return self._step_cum[k] + self._step_busy[k] * (t - self._step_t[k])

    def busy_node_count(self) -> int:
        return self._busy

    def idle_node_count(self) -> int:
        return int(self.free.sum())

    def utilization(self, start: int = 0, end: Optional[int] = None) -> float:
        """Busy core-seconds over total core-seconds in ``[start, end]``."""
        end = self.engine.clock if end is None else end
        if end <= start:
            raise EmptyWindow(f"empty window [{start}, {end}]")
        if end > self.engine.clock:
            raise EmptyWindow(f"window end {end} is beyond the clock {self.engine.clock}")
        busy = self._busy_integral(end) - self._busy_integral(start)
        return busy / (self.size * (end - start))

    def interval_node_ms(self, start: int = 0, end: Optional[int] = None) -> int:
        """Busy node-ms in ``[start, end]`` summed over per-node busy intervals."""
        end = self.engine.clock if end is None else end
        total = 0
        for node, ivs in enumerate(self.node_intervals):
            spans = list(ivs)
            if self._busy_since[node] is not None:
                spans.append((self._busy_since[node], self.engine.clock))
            for a, b in spans:
                lo, hi = max(a, start), min(b, end)
                if hi > lo:
                    total += hi - lo
        return total

    def core_hours(self, kind: JobKind) -> float:
        self._account()
        return self.kind_node_ms[kind] * self.cores_per_node / (3600 * MS_PER_S)

    def queued_node_demand(self, kind: Optional[JobKind] = JobKind.HPC) -> int:
        return sum(j.nodes_requested for j in self.queue if kind is None or j.kind is kind)

    def check_invariants(self) -> None:
        busy = sum(1 for j in self.node_job if j is not None)
        idle = int(self.free.sum())
        if busy + idle + len(self.drained) != self.size:
            raise InvariantViolation("node states do not sum to cluster size")
        seen: set[int] = set()
        for job in self.running.values():
            nodes = set(job.assigned_nodes)
            if nodes & seen:
                raise InvariantViolation(f"job {job.id} overlaps another running job")
            seen |= nodes
            if len(nodes) != job.nodes_requested:
                raise InvariantViolation(f"job {job.id} holds {len(nodes)} of {job.nodes_requested} nodes")
            if self.engine.clock > job.walltime_end:
                raise InvariantViolation(f"job {job.id} is past its walltime")
