"""Build and run one scenario: engine, cluster, data plane, overlay, workloads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

from .cluster import Cluster, InvariantViolation, JobKind, JobState
from .core import MS_PER_H, Engine, EventKind, RngStreams, SimReport, hours, minutes, seconds
from .dataplane import Credential, DataHub, DataPlane, SharedFilesystem
from .overlay import Overlay, Pilot, TaskState
from .scenario import Scenario
from .workload import generate_tasks, install_background

# Order of the sampled series; metrics.csv rows follow it within a timestamp.
METRICS = (
    "utilization",
    "busy_nodes",
    "htc_nodes",
    "queued_node_demand",
    "queued_jobs",
    "running_pilots",
    "running_wrappers",
    "pending_tasks",
    "running_tasks",
    "completed_tasks",
    "active_transfers",
    "credential_valid",
    "preemptions",
)


@dataclass
class RunSummary:
    """Headline numbers of one run.  Times are hours, work is core-hours."""

    scenario: str
    scenario_hash: str
    seed: int
    duration: float
    utilization_mean: float
    htc_tasks_completed: int
    htc_tasks_total: int
    htc_tasks_rejected: int
    htc_core_hours: float
    hpc_core_hours: float
    capacity_core_hours: float
    mean_task_wait: float
    preemption_count: int
    tasks_preempted: int
    wasted_core_hours: float
    backlog_min_nodes: Optional[int]
    reservation_delays: int
    hub_transfers: int
    cache_hits: int
    events: int

    def to_dict(self) -> dict:
        return asdict(self)


class Simulation:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None, trace: bool = False):
        self.scenario = s = scenario
        self.seed = scenario.seed if seed is None else seed
        self.engine = Engine(trace=trace)
        self.rng = RngStreams(self.seed)
        self.end = hours(s.duration_h)
        self.warmup = hours(s.warmup_h)
        c = s.cluster
        self.cluster = Cluster(self.engine, c.nodes, c.cores_per_node, c.memory_gb, c.torus, c.placement,
                               c.compactness_limit, c.scheduler_period_s, c.backfill)
        d = s.data
        cred = Credential(0, d.credential.lifetime_days, d.credential.renewal_days, d.credential.auto_renew)
        self.data = DataPlane(self.engine, DataHub(d.dtn_count, d.per_dtn_gbps, d.stream_cap_gbps),
                              SharedFilesystem(d.fs_bw_gbps, d.cache_gb), cred)
        o = s.overlay
        self.overlay: Optional[Overlay] = None
        self.arrivals = []
        if o.enabled:
            interval = None if math.isinf(o.checkpoint_interval_min) else minutes(o.checkpoint_interval_min)
            self.overlay = Overlay(
                self.engine, self.cluster, self.data, mode=o.mode, target_pilots=o.target_pilots,
                pilot_nodes=o.pilot_nodes, pilot_walltime=hours(o.pilot_walltime_h),
                pilot_priority=o.pilot_priority, pilot_placement=o.pilot_placement,
                checkpoint_interval=interval, osg_policy=s.osg(), startup_latency=seconds(o.startup_latency_s),
                broker_period=seconds(o.broker_period_s), max_wrapper_walltime=hours(o.max_wrapper_walltime_h),
                wrapper_priority=o.wrapper_priority, wrapper_slack=minutes(o.wrapper_slack_min))
            self.arrivals = generate_tasks(s.htc, self.rng, s.osg())
            self.overlay.expected_tasks = len(self.arrivals)
        for name in METRICS:
            self.engine.register_metric(name)
        self.backlog_samples: list[tuple[int, int]] = []
        self._ran = False

    # -- setup -------------------------------------------------------------
    def _install(self) -> None:
        eng, ov = self.engine, self.overlay
        self.data.start_credential_clock()
        if ov is not None:
            if self.scenario.data.prepopulate_cache:
                sizes = {}
                for _, task in self.arrivals:
                    sizes.setdefault(task.dataset, task.input_gb)
                self.data.prepopulate(sizes)
            batches: dict[int, list] = {}
            for t, task in self.arrivals:
                batches.setdefault(t, []).append(task)
            for t, tasks in sorted(batches.items()):
                if t >= self.end:
                    break
                eng.at(t, EventKind.JOB_ARRIVAL, lambda tasks=tasks: self._arrive(tasks), "htc", f"tasks={len(tasks)}")
            if self.scenario.stop_when_drained:
                ov.on_drained.append(eng.stop)
        install_background(eng, self.cluster, self.scenario.hpc, self.rng, self.end)
        self.cluster.start_periodic()
        self.cluster.request_cycle()
        if ov is not None:
            ov.start()
        eng.at(0, EventKind.METRIC_SAMPLE, self._sample, "metrics")

    def _arrive(self, tasks) -> None:
        for task in tasks:
            self.overlay.add_task(task)

    def _sample(self) -> None:
        eng, cl, ov = self.engine, self.cluster, self.overlay
        self.check_invariants()
        busy = cl.busy_node_count()
        htc = sum(len(j.assigned_nodes) for j in cl.running.values() if j.kind is not JobKind.HPC)
        demand = cl.queued_node_demand(JobKind.HPC)
        self.backlog_samples.append((eng.clock, demand))
        eng.sample("utilization", busy / cl.size)
        eng.sample("busy_nodes", busy)
        eng.sample("htc_nodes", htc)
        eng.sample("queued_node_demand", demand)
        eng.sample("queued_jobs", len(cl.queue))
        eng.sample("running_pilots", ov.alive_pilots() if ov else 0)
        eng.sample("running_wrappers", sum(1 for j in cl.running.values() if j.kind is JobKind.WRAPPER))
        eng.sample("pending_tasks", len(ov.pool) if ov else 0)
        eng.sample("running_tasks", len(ov.running_tasks()) if ov else 0)
        eng.sample("completed_tasks", ov.completed if ov else 0)
        eng.sample("active_transfers", len(self.data.active()))
        eng.sample("credential_valid", self.data.credential_valid())
        eng.sample("preemptions", ov.preemption_count if ov else 0)
        nxt = eng.clock + seconds(self.scenario.sample_period_s)
        if nxt <= self.end:
            eng.at(nxt, EventKind.METRIC_SAMPLE, self._sample, "metrics")

    def check_invariants(self) -> None:
        self.cluster.check_invariants()
        ov = self.overlay
        if ov is None:
            return
        for job in ov.pilot_jobs.values():
            if job.state not in (JobState.QUEUED, JobState.RUNNING):
                raise InvariantViolation(f"pilot job {job.id} tracked in state {job.state.value}")
        now = self.engine.clock
        for task, host in ov.hosted_tasks():
            if task._host is not host:
                raise InvariantViolation(f"task {task.id} is held by a host it does not know")
            if task.completed_work > task.actual_runtime:
                raise InvariantViolation(f"task {task.id} retained more work than it needs")
            end = host.expires_at if isinstance(host, Pilot) else host.run.job.walltime_end
            if task.state is TaskState.RUNNING and end is not None and now > end:
                raise InvariantViolation(f"task {task.id} runs past its host's end")

    # -- run -----------------------------------------------------------------
    def run(self) -> SimReport:
        if self._ran:
            raise RuntimeError("a Simulation runs once")
        self._ran = True
        self._install()
        report = self.engine.run_until(self.end)
        self.check_invariants()
        return report

    def summary(self) -> RunSummary:
        s, cl, ov, eng = self.scenario, self.cluster, self.overlay, self.engine
        end = eng.clock
        start = self.warmup if self.warmup < end else 0
        util = cl.utilization(start, end) if end > start else 0.0
        tasks = list(ov.tasks.values()) if ov else []
        waits = [t.first_dispatch - t.arrival for t in tasks if t.first_dispatch is not None]
        after = [d for t, d in self.backlog_samples if t >= self.warmup]
        wasted_ms = sum(sum(t.wasted) * t.cores for t in tasks)
        capacity = cl.size * cl.cores_per_node * end / MS_PER_H
        return RunSummary(
            scenario=s.name,
            scenario_hash=s.digest(),
            seed=self.seed,
            duration=end / MS_PER_H,
            utilization_mean=util,
            htc_tasks_completed=ov.completed if ov else 0,
            htc_tasks_total=len(self.arrivals),
            htc_tasks_rejected=len(ov.rejected) if ov else 0,
            htc_core_hours=cl.core_hours(JobKind.PILOT) + cl.core_hours(JobKind.WRAPPER),
            hpc_core_hours=cl.core_hours(JobKind.HPC),
            capacity_core_hours=capacity,
            mean_task_wait=(sum(waits) / len(waits) / MS_PER_H) if waits else 0.0,
            preemption_count=ov.preemption_count if ov else 0,
            tasks_preempted=sum(1 for t in tasks if t.preemptions),
            wasted_core_hours=wasted_ms / MS_PER_H,
            backlog_min_nodes=min(after) if after else None,
            reservation_delays=cl.reservation_delays,
            hub_transfers=self.data.hub_transfers,
            cache_hits=self.data.cache_hits,
            events=eng.processed,
        )


def run_scenario(scenario: Scenario, seed: Optional[int] = None, trace: bool = False):
    """Run to completion; returns ``(simulation, report, summary)``."""
    sim = Simulation(scenario, seed, trace)
    report = sim.run()
    return sim, report, sim.summary()
