"""HTC side of the simulation: task pool, OSG job envelope, glidein pilots
with matchmaking, and the backfill broker that packs payloads into wrapper
jobs.  Preempted tasks resume from their last checkpoint.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .cluster import BackfillWindow, BatchJob, Cluster, JobKind, JobState, Placement
from .core import MS_PER_H, Engine, EventKind, hours, minutes, seconds
from .dataplane import CacheFull, CredentialExpired, DataPlane
from .packing import pack_count_first


class DuplicateCompletion(AssertionError):
    pass


class EmptyPlan(ValueError):
    pass


class Violation(str, enum.Enum):
    MEM_LIMIT = "MEM_LIMIT"
    WALLTIME_LIMIT = "WALLTIME_LIMIT"
    IO_LIMIT = "IO_LIMIT"
    CORES_LIMIT = "CORES_LIMIT"


@dataclass(frozen=True)
class OsgPolicy:
    """Envelope for opportunistic grid jobs.  Memory must stay strictly below
    ``max_memory_gb``; the other limits are inclusive."""

    max_memory_gb: float = 2.0
    max_runtime_h: float = 12.0
    max_io_gb: float = 10.0
    max_cores: int = 1


class TaskState(str, enum.Enum):
    PENDING = "pending"
    STAGING = "staging"
    RUNNING = "running"
    STAGE_OUT = "stage_out"
    COMPLETED = "completed"
    PREEMPTED = "preempted"


@dataclass(eq=False)
class Task:
    id: int
    est_runtime: int
    actual_runtime: int
    memory_gb: float = 1.0
    input_gb: float = 0.0
    output_gb: float = 0.0
    cores: int = 1
    priority: int = 0
    arrival: int = 0
    dataset: Optional[str] = None
    state: TaskState = TaskState.PENDING
    attempts: int = 0
    completed_work: int = 0
    executed: int = 0
    preemptions: int = 0
    wasted: list = field(default_factory=list)
    first_dispatch: Optional[int] = None
    completed_at: Optional[int] = None
    _run_start: Optional[int] = field(default=None, repr=False)
    _complete_ev: object = field(default=None, repr=False)
    _transfer: object = field(default=None, repr=False)
    _waiter: object = field(default=None, repr=False)
    _host: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.dataset is None:
            self.dataset = f"in-{self.id}"

    @property
    def remaining_runtime(self) -> int:
        return self.actual_runtime - self.completed_work


def validate(task: Task, policy: OsgPolicy = OsgPolicy()) -> list[Violation]:
    """Every OSG limit the task breaks; an empty list means it is acceptable."""
    out = []
    if task.memory_gb >= policy.max_memory_gb:
        out.append(Violation.MEM_LIMIT)
    if task.est_runtime > policy.max_runtime_h * MS_PER_H:
        out.append(Violation.WALLTIME_LIMIT)
    if task.input_gb + task.output_gb > policy.max_io_gb:
        out.append(Violation.IO_LIMIT)
    if task.cores > policy.max_cores:
        out.append(Violation.CORES_LIMIT)
    return out


def checkpoint_floor(progress: int, interval: Optional[int]) -> int:
    """Work retained after a kill: progress rounded down to a checkpoint.

    ``interval`` 0 keeps everything; ``None`` means no checkpoints.
    """
    if interval is None:
        return 0
    if interval == 0:
        return progress
    return progress // interval * interval


class TaskPool:
    """Pending tasks ordered by (priority desc, arrival, id)."""

    def __init__(self):
        self._keys: list[tuple] = []
        self._tasks: dict[tuple, Task] = {}
        self._cores = 0

    @staticmethod
    def key(task: Task) -> tuple:
        return (-task.priority, task.arrival, task.id)

    def add(self, task: Task) -> None:
        k = self.key(task)
        if k in self._tasks:
            raise ValueError(f"task {task.id} already pending")
        bisect.insort(self._keys, k)
        self._tasks[k] = task
        self._cores += task.cores
        task.state = TaskState.PENDING

    def remove(self, task: Task) -> None:
        k = self.key(task)
        i = bisect.bisect_left(self._keys, k)
        if i == len(self._keys) or self._keys[i] != k:
            raise KeyError(task.id)
        del self._keys[i]
        del self._tasks[k]
        self._cores -= task.cores

    def __len__(self) -> int:
        return len(self._keys)

    def __iter__(self):
        return (self._tasks[k] for k in list(self._keys))

    def first(self, pred: Callable[[Task], bool]) -> Optional[Task]:
        for k in self._keys:
            t = self._tasks[k]
            if pred(t):
                return t
        return None

    def pending_cores(self) -> int:
        return self._cores


@dataclass(eq=False)
class Pilot:
    id: int
    batch_job_id: int
    nodes: tuple
    slots: int
    registered_at: int
    expires_at: int
    startup_latency: int
    busy_slots: int = 0
    tasks: dict = field(default_factory=dict)

    def release(self, task: Task) -> None:
        self.busy_slots -= task.cores
        del self.tasks[task.id]


@dataclass
class WrapperPlan:
    window: BackfillWindow
    lanes: list
    nodes: int
    walltime: int
    cores_per_node: int
    capacity: int = 0
    slack: int = 0
    stage_ms: dict = field(default_factory=dict)  # task id -> stage-in estimate
    job: Optional[BatchJob] = None

    @property
    def tasks(self) -> list[Task]:
        return [t for lane in self.lanes for t in lane]

    def occupancy(self, lane: list[Task]) -> int:
        return sum(t.est_runtime + self.stage_ms.get(t.id, 0) for t in lane)

    def check(self) -> None:
        for lane in self.lanes:
            if self.occupancy(lane) > self.capacity:
                raise AssertionError("lane exceeds its capacity")
            if self.window.duration is not None and sum(t.est_runtime for t in lane) > self.window.duration:
                raise AssertionError("lane exceeds window duration")
        if len(self.lanes) > self.window.node_count * self.cores_per_node:
            raise AssertionError("more lanes than window cores")
        if self.nodes > self.window.node_count:
            raise AssertionError("plan needs more nodes than the window has")
        if self.walltime != max(self.occupancy(lane) for lane in self.lanes) + self.slack:
            raise AssertionError("walltime is not the longest lane plus slack")
        if self.window.duration is not None and self.walltime > self.window.duration:
            raise AssertionError("walltime exceeds the window")


def plan_wrapper(window: BackfillWindow, tasks: Sequence[Task], cores_per_node: int,
                 max_walltime: Optional[int] = None, stage_in_estimate: Optional[Callable[[float], int]] = None,
                 slack: int = 0) -> WrapperPlan:
    """Pack single-core ``tasks`` (in priority order) into the window's core lanes.

    A task occupies its lane for ``est_runtime`` plus its stage-in estimate.
    Lanes hold at most the window duration (or ``max_walltime`` if shorter
    or the window is unbounded) minus ``slack``; the wrapper walltime is the
    longest lane plus ``slack``.  Raises :class:`EmptyPlan` when nothing fits.
    """
    limit = window.duration
    if max_walltime is not None:
        limit = max_walltime if limit is None else min(limit, max_walltime)
    if limit is None:
        raise ValueError("unbounded window needs max_walltime")
    capacity = limit - slack
    candidates = [t for t in tasks if t.cores == 1]
    stage = {t.id: (stage_in_estimate(t.input_gb) if stage_in_estimate and t.input_gb > 0 else 0)
             for t in candidates}
    n_lanes = window.node_count * cores_per_node
    durations = [t.est_runtime + stage[t.id] for t in candidates]
    lanes_idx = pack_count_first(durations, n_lanes, capacity) if capacity > 0 else []
    if not lanes_idx:
        raise EmptyPlan(f"no task fits a {capacity} ms lane")
    lanes = [[candidates[i] for i in lane] for lane in lanes_idx]
    used = {t.id: stage[t.id] for lane in lanes for t in lane}
    nodes = math.ceil(len(lanes) / cores_per_node)
    plan = WrapperPlan(window, lanes, nodes, 0, cores_per_node, capacity, slack, used)
    plan.walltime = max(plan.occupancy(lane) for lane in lanes) + slack
    plan.check()
    return plan


class _Lane:
    """One core of a running wrapper, executing its tasks back to back."""

    def __init__(self, run: "_WrapperRun", tasks: list[Task]):
        self.run = run
        self.todo = list(tasks)
        self.current: Optional[Task] = None

    def release(self, task: Task) -> None:
        self.current = None


@dataclass(eq=False)
class _WrapperRun:
    plan: WrapperPlan
    job: BatchJob
    lanes: list = field(default_factory=list)


class Overlay:
    """HTC workload manager layered on a :class:`Cluster`."""

    def __init__(self, engine: Engine, cluster: Cluster, dataplane: DataPlane, mode: str = "glidein",
                 target_pilots: int = 1, pilot_nodes: int = 1, pilot_walltime: int = hours(12),
                 pilot_priority: int = -100, pilot_placement: str = "transparent",
                 checkpoint_interval: Optional[int] = minutes(30), osg_policy: Optional[OsgPolicy] = OsgPolicy(),
                 startup_latency: int = seconds(60), broker_period: int = seconds(60),
                 max_wrapper_walltime: int = hours(12), wrapper_priority: int = -100,
                 wrapper_slack: int = minutes(10)):
        if mode not in ("glidein", "backfill_broker"):
            raise ValueError(f"unknown overlay mode {mode!r}")
        self.engine = engine
        self.cluster = cluster
        self.data = dataplane
        self.mode = mode
        self.target_pilots = target_pilots
        self.pilot_nodes = pilot_nodes
        self.pilot_walltime = pilot_walltime
        self.pilot_priority = pilot_priority
        self.pilot_placement = Placement(pilot_placement)
        self.checkpoint_interval = checkpoint_interval
        self.osg_policy = osg_policy
        self.startup_latency = startup_latency
        self.broker_period = broker_period
        self.max_wrapper_walltime = max_wrapper_walltime
        self.wrapper_priority = wrapper_priority
        self.wrapper_slack = wrapper_slack

        self.pool = TaskPool()
        self._need: dict[int, int] = {}  # est_runtime + stage-in estimate
        self._min_need = math.inf
        self.tasks: dict[int, Task] = {}
        self.rejected: dict[int, list[Violation]] = {}
        self.pilot_jobs: dict[int, BatchJob] = {}
        self.pilots: dict[int, Pilot] = {}
        self.wrappers: dict[int, _WrapperRun] = {}
        self._register_ev: dict[int, object] = {}
        self._pilot_ids = 0
        self.completed = 0
        self.preemption_count = 0
        self.expected_tasks: Optional[int] = None
        self.on_drained: list[Callable[[], None]] = []
        self.dispatch_observers: list[Callable[[Task, object], None]] = []

    # -- pool --------------------------------------------------------------
    def add_task(self, task: Task) -> list[Violation]:
        """Queue ``task``; with an OSG policy, violators are rejected instead."""
        if task.id in self.tasks or task.id in self.rejected:
            raise ValueError(f"task id {task.id} reused")
        if self.osg_policy is not None:
            bad = validate(task, self.osg_policy)
            if bad:
                self.rejected[task.id] = bad
                return bad
        task.arrival = self.engine.clock
        self._need[task.id] = n = task.est_runtime + self.data.stage_in_estimate(task.input_gb)
        self._min_need = min(self._min_need, n)
        self.tasks[task.id] = task
        self.pool.add(task)
        return []

    @property
    def drained(self) -> bool:
        total = self.expected_tasks if self.expected_tasks is not None else len(self.tasks)
        return self.completed >= total and self.completed == len(self.tasks)

    # -- glideins ------------------------------------------------------------
    def submit_glidein(self, nodes: int, walltime: int, priority: Optional[int] = None) -> BatchJob:
        if not self.data.credential_valid():
            raise CredentialExpired(f"cannot submit glidein at {self.engine.clock} ms: credential expired")
        job = BatchJob(nodes, walltime, self.pilot_priority if priority is None else priority,
                       kind=JobKind.PILOT, placement=self.pilot_placement, preemptible=True,
                       on_start=self._pilot_started, on_end=self._pilot_ended)
        self.cluster.submit(job)
        self.pilot_jobs[job.id] = job
        return job

    def _pilot_started(self, job: BatchJob) -> None:
        if self.startup_latency >= job.walltime_req:
            return
        self._register_ev[job.id] = self.engine.after(
            self.startup_latency, EventKind.PILOT_REGISTER, lambda: self._register(job), job.id)

    def _register(self, job: BatchJob) -> None:
        self._register_ev.pop(job.id, None)
        self._pilot_ids += 1
        slots = len(job.assigned_nodes) * self.cluster.cores_per_node
        pilot = Pilot(self._pilot_ids, job.id, job.assigned_nodes, slots, self.engine.clock,
                      job.walltime_end, self.startup_latency)
        self.pilots[job.id] = pilot
        self._fill(pilot)

    def _pilot_ended(self, job: BatchJob, reason: str) -> None:
        ev = self._register_ev.pop(job.id, None)
        if ev is not None:
            ev.cancel()
        pilot = self.pilots.pop(job.id, None)
        self.pilot_jobs.pop(job.id, None)
        if pilot is not None:
            for task in list(pilot.tasks.values()):
                pilot.release(task)
                self._evict(task)

    def match(self, pilot: Pilot) -> Optional[Task]:
        """Highest-priority pending task that can finish before the pilot expires."""
        now = self.engine.clock
        left = pilot.expires_at - now
        free = pilot.slots - pilot.busy_slots
        if free <= 0 or left <= 0:
            return None
        if left < self._min_need:
            return None
        need = self._need
        task = self.pool.first(lambda t: t.cores <= free and need[t.id] <= left)
        if task is not None:
            self.pool.remove(task)
            task.state = TaskState.STAGING
        return task

    def _fill(self, pilot: Pilot) -> None:
        if self.pilots.get(pilot.batch_job_id) is not pilot:
            return
        while pilot.busy_slots < pilot.slots and self.data.credential_valid():
            task = self.match(pilot)
            if task is None:
                break
            pilot.busy_slots += task.cores
            pilot.tasks[task.id] = task
            if not self._dispatch(task, pilot):
                pilot.release(task)
                break
        if pilot.busy_slots == 0:
            # idle with nothing runnable: hand the nodes back
            job = self.pilot_jobs.get(pilot.batch_job_id)
            if job is not None and job.state is JobState.RUNNING:
                self.cluster.finish(job)

    # -- execution -----------------------------------------------------------
    def _dispatch(self, task: Task, host) -> bool:
        if self.osg_policy is not None:
            assert not validate(task, self.osg_policy), f"task {task.id} violates the OSG policy"
        task.state = TaskState.STAGING
        task.attempts += 1
        task._host = host
        if task.first_dispatch is None:
            task.first_dispatch = self.engine.clock
        self.engine.note(EventKind.TASK_DISPATCH, task.id, f"attempt={task.attempts}")
        for obs in self.dispatch_observers:
            obs(task, host)
        if task.input_gb <= 0:
            self._start_running(task)
            return True
        waiter = lambda tr, task=task: self._staged(task)  # noqa: E731
        self.data.pin(task.dataset)
        try:
            try:
                tr = self.data.begin_transfer(task.dataset, task.input_gb, "stage_in", waiter)
            except CacheFull:
                tr = self.data.begin_transfer(task.dataset, task.input_gb, "stage_in", waiter, use_cache=False)
        except CredentialExpired:
            self.data.unpin(task.dataset)
            task.attempts -= 1
            task._host = None
            self.pool.add(task)
            return False
        task._transfer, task._waiter = tr, waiter
        return True

    def _staged(self, task: Task) -> None:
        task._transfer = task._waiter = None
        self._start_running(task)

    def _start_running(self, task: Task) -> None:
        task.state = TaskState.RUNNING
        task._run_start = self.engine.clock
        task._complete_ev = self.engine.after(task.remaining_runtime, EventKind.TASK_COMPLETE,
                                              lambda: self._finished_running(task), task.id)

    def _finished_running(self, task: Task) -> None:
        host = task._host
        self.on_complete(task)
        host.release(task)
        self._host_freed(host)

    def _release_input(self, task: Task) -> None:
        if task.input_gb > 0:
            self.data.unpin(task.dataset)

    def on_complete(self, task: Task) -> None:
        """Compute finished: account the work and start the stage-out."""
        if task.state is not TaskState.RUNNING:
            raise DuplicateCompletion(f"task {task.id} completion in state {task.state.value}")
        elapsed = self.engine.clock - task._run_start
        task.executed += elapsed
        task.completed_work = task.actual_runtime
        task._complete_ev = None
        task.state = TaskState.STAGE_OUT
        self._release_input(task)
        if task.output_gb <= 0:
            self._completed(task)
            return
        self.data.begin_transfer(f"out-{task.id}", task.output_gb, "stage_out",
                                 lambda tr: self._completed(task), allow_paused=True)

    def _completed(self, task: Task) -> None:
        if task.state is TaskState.COMPLETED:
            raise DuplicateCompletion(f"task {task.id} completed twice")
        task.state = TaskState.COMPLETED
        task.completed_at = self.engine.clock
        task._host = None
        self.completed += 1
        self.engine.note(EventKind.TASK_COMPLETE, task.id,
                         f"done executed={task.executed} runtime={task.actual_runtime}")
        if self.drained:
            for cb in self.on_drained:
                cb()

    def _evict(self, task: Task) -> None:
        """Host gone: work that ends at this very instant still counts as done."""
        if task.state is TaskState.RUNNING and task._run_start + task.remaining_runtime == self.engine.clock:
            task._complete_ev.cancel()
            self.on_complete(task)
        else:
            self.on_preempt(task)

    def on_preempt(self, task: Task) -> None:
        """Host killed under ``task``: keep checkpointed work and requeue it."""
        now = self.engine.clock
        if task.state is TaskState.STAGING:
            if task._transfer is not None:
                self.data.detach(task._transfer, task._waiter)
                task._transfer = task._waiter = None
            self._release_input(task)
            task.wasted.append(0)
        elif task.state is TaskState.RUNNING:
            elapsed = now - task._run_start
            task.executed += elapsed
            progress = task.completed_work + elapsed
            kept = max(task.completed_work, checkpoint_floor(progress, self.checkpoint_interval))
            task.wasted.append(progress - kept)
            task.completed_work = kept
            task._complete_ev.cancel()
            task._complete_ev = None
            self._release_input(task)
        else:
            raise ValueError(f"cannot preempt task {task.id} in state {task.state.value}")
        task.preemptions += 1
        self.preemption_count += 1
        self.engine.note(EventKind.TASK_PREEMPT, task.id,
                         f"state={task.state.value} kept={task.completed_work} wasted={task.wasted[-1]}")
        task.state = TaskState.PREEMPTED
        task._host = None
        self.pool.add(task)

    def _host_freed(self, host) -> None:
        if isinstance(host, Pilot):
            self._fill(host)
        else:
            self._lane_next(host)

    # -- backfill broker -----------------------------------------------------
    def pack_backfill(self, window: BackfillWindow) -> WrapperPlan:
        """Pack pending tasks into ``window`` and submit the wrapper job."""
        plan = plan_wrapper(window, list(self.pool), self.cluster.cores_per_node, self.max_wrapper_walltime,
                            self.data.stage_in_estimate, self.wrapper_slack)
        for task in plan.tasks:
            self.pool.remove(task)
            task.state = TaskState.STAGING
        job = BatchJob(plan.nodes, plan.walltime, self.wrapper_priority, kind=JobKind.WRAPPER,
                       placement=Placement.TRANSPARENT, on_start=self._wrapper_started,
                       on_end=self._wrapper_ended)
        plan.job = job
        self.wrappers[job] = run = _WrapperRun(plan, job)
        run.lanes = [_Lane(run, lane) for lane in plan.lanes]
        self.cluster.submit(job)
        return plan

    def _wrapper_started(self, job: BatchJob) -> None:
        for lane in self.wrappers[job].lanes:
            self._lane_next(lane)

    def _lane_next(self, lane: _Lane) -> None:
        run = lane.run
        if run.job.state is not JobState.RUNNING:
            return
        while lane.todo and lane.current is None:
            task = lane.todo.pop(0)
            lane.current = task
            if not self._dispatch(task, lane):
                lane.current = None
                for t in lane.todo:
                    self.pool.add(t)
                lane.todo.clear()
        if all(l.current is None and not l.todo for l in run.lanes):
            self.cluster.finish(run.job)

    def _wrapper_ended(self, job: BatchJob, reason: str) -> None:
        run = self.wrappers.pop(job)
        for lane in run.lanes:
            if lane.current is not None:
                task, lane.current = lane.current, None
                self._evict(task)
            for t in lane.todo:
                self.pool.add(t)
            lane.todo.clear()

    def _withdraw(self, job: BatchJob) -> None:
        run = self.wrappers.pop(job)
        self.cluster.cancel(job)
        for lane in run.lanes:
            for t in lane.todo:
                self.pool.add(t)

    def broker_cycle(self) -> list[BatchJob]:
        """One broker pass; returns the batch jobs it submitted."""
        if not self.data.credential_valid() or len(self.pool) == 0:
            return []
        if self.mode == "glidein":
            alive = len(self.pilot_jobs)
            per_pilot = self.pilot_nodes * self.cluster.cores_per_node
            needed = math.ceil(self.pool.pending_cores() / per_pilot)
            n = min(self.target_pilots - alive, needed)
            return [self.submit_glidein(self.pilot_nodes, self.pilot_walltime) for _ in range(max(n, 0))]

        submitted = []
        if self.cluster._dirty:
            self.cluster.schedule_cycle()
        while len(self.pool):
            plan = None
            for window in self.cluster.query_backfill_windows():
                try:
                    plan = self.pack_backfill(window)
                except EmptyPlan:
                    continue
                break
            if plan is None:
                break
            job = plan.job
            self.cluster.schedule_cycle()
            if job.state is not JobState.RUNNING:
                self._withdraw(job)
                break
            submitted.append(job)
        return submitted

    def start(self) -> None:
        """Begin periodic broker cycles at the current clock."""
        def tick():
            self.broker_cycle()
            self.engine.after(self.broker_period, EventKind.BROKER_CYCLE, tick, "broker", self.mode)

        self.engine.after(0, EventKind.BROKER_CYCLE, tick, "broker", self.mode)

    # -- queries -------------------------------------------------------------
    def hosted_tasks(self) -> list[tuple[Task, object]]:
        """Every task currently held by a pilot slot or wrapper lane, with its host."""
        out = [(t, p) for p in self.pilots.values() for t in p.tasks.values()]
        out.extend((lane.current, lane) for run in self.wrappers.values() for lane in run.lanes
                   if lane.current is not None)
        return out

    def running_tasks(self) -> list[Task]:
        return [t for t, _ in self.hosted_tasks() if t.state is TaskState.RUNNING]

    def alive_pilots(self) -> int:
        return len(self.pilots)
