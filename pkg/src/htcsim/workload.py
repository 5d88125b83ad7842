"""Task and background-job generators.

Every draw comes from a named stream of :class:`~htcsim.core.RngStreams`,
so a (spec, seed) pair always yields the same stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cluster import BatchJob, Cluster, JobKind
from .core import MS_PER_H, Engine, EventKind, RngStreams, hours
from .overlay import OsgPolicy, Task


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class Dist:
    """``constant(value)``, ``uniform(lo, hi)`` or ``lognormal(mu, sigma)``
    (``mu``/``sigma`` of the underlying normal)."""

    kind: str
    a: float = 0.0
    b: float = 0.0

    @classmethod
    def constant(cls, value: float) -> "Dist":
        return cls("constant", value)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Dist":
        return cls("uniform", lo, hi)

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "Dist":
        return cls("lognormal", mu, sigma)

    def check(self) -> None:
        if self.kind == "constant":
            if self.a < 0:
                raise InvalidSpec(f"constant {self.a} is negative")
        elif self.kind == "uniform":
            if self.a > self.b:
                raise InvalidSpec(f"uniform lo {self.a} > hi {self.b}")
            if self.a < 0:
                raise InvalidSpec(f"uniform lo {self.a} is negative")
        elif self.kind == "lognormal":
            if self.b < 0:
                raise InvalidSpec(f"lognormal sigma {self.b} is negative")
        else:
            raise InvalidSpec(f"unknown distribution {self.kind!r}")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(size, float(self.a))
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size)
        return rng.lognormal(self.a, self.b, size)

    def mean(self) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return (self.a + self.b) / 2
        return math.exp(self.a + self.b ** 2 / 2)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"dist": "constant", "value": self.a}
        if self.kind == "uniform":
            return {"dist": "uniform", "lo": self.a, "hi": self.b}
        return {"dist": "lognormal", "mu": self.a, "sigma": self.b}

    @classmethod
    def from_value(cls, value) -> "Dist":
        if isinstance(value, Dist):
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return cls.constant(float(value))
        if not isinstance(value, dict):
            raise InvalidSpec(f"expected a number or distribution table, got {value!r}")
        kind = value.get("dist")
        try:
            if kind == "constant":
                d = cls.constant(float(value["value"]))
            elif kind == "uniform":
                d = cls.uniform(float(value["lo"]), float(value["hi"]))
            elif kind == "lognormal":
                d = cls.lognormal(float(value["mu"]), float(value["sigma"]))
            else:
                raise InvalidSpec(f"unknown distribution {kind!r}")
        except KeyError as exc:
            raise InvalidSpec(f"{kind} distribution is missing {exc.args[0]!r}") from None
        extra = set(value) - {"dist", "value", "lo", "hi", "mu", "sigma"}
        if extra:
            raise InvalidSpec(f"unknown distribution keys {sorted(extra)}")
        return d


@dataclass
class HtcSpec:
    n_tasks: int = 100
    runtime_h: Dist = field(default_factory=lambda: Dist.lognormal(math.log(4.0), 0.5))
    max_runtime_h: float = 12.0  # draws above are resampled
    est_error: float = 0.0  # estimate = actual * U(1 - e, 1 + e)
    input_gb: Dist = field(default_factory=lambda: Dist.constant(0.4))
    output_gb: Dist = field(default_factory=lambda: Dist.constant(0.05))
    memory_gb: float = 1.5
    priority: int = 0
    n_datasets: int = 0  # 0: a private input dataset per task
    arrival_per_h: float = 0.0  # 0: every task arrives at t=0

    def check(self, policy: Optional[OsgPolicy] = None) -> None:
        if self.n_tasks < 0:
            raise InvalidSpec("n_tasks must be nonnegative")
        for d in (self.runtime_h, self.input_gb, self.output_gb):
            d.check()
        if not 0 <= self.est_error < 1:
            raise InvalidSpec("est_error must be in [0, 1)")
        if self.max_runtime_h <= 0:
            raise InvalidSpec("max_runtime_h must be positive")
        if self.n_datasets < 0 or self.arrival_per_h < 0:
            raise InvalidSpec("n_datasets and arrival_per_h must be nonnegative")
        if policy is not None:
            if self.memory_gb >= policy.max_memory_gb:
                raise InvalidSpec(f"memory_gb {self.memory_gb} breaks the OSG limit of {policy.max_memory_gb}")
            if self.runtime_h.kind == "constant" and self.runtime_h.a > policy.max_runtime_h:
                raise InvalidSpec("constant runtime exceeds the OSG walltime limit")
            if self.input_gb.kind == "constant" and self.output_gb.kind == "constant" \
                    and self.input_gb.a + self.output_gb.a > policy.max_io_gb:
                raise InvalidSpec("constant IO exceeds the OSG limit")


@dataclass
class HpcBackgroundSpec:
    arrival_per_h: float = 0.0
    nodes_max_fraction: float = 0.125  # largest job as a share of the machine
    min_nodes: int = 1
    size_grid: str = "pow2"  # "pow2": powers of two only; "any": every integer in range
    size_exponent: float = 0.0  # P(size) proportional to size ** -size_exponent; 0 is uniform
    walltime_h: Dist = field(default_factory=lambda: Dist.uniform(1.0, 24.0))
    target_backlog_nodes: int = 0
    priority: int = 0
    overestimate_factor: float = 1.0  # runtime = walltime / factor

    def check(self) -> None:
        self.walltime_h.check()
        if self.arrival_per_h < 0 or self.target_backlog_nodes < 0:
            raise InvalidSpec("arrival_per_h and target_backlog_nodes must be nonnegative")
        if not 0 < self.nodes_max_fraction <= 1:
            raise InvalidSpec("nodes_max_fraction must be in (0, 1]")
        if self.min_nodes < 1:
            raise InvalidSpec("min_nodes must be at least 1")
        if self.overestimate_factor < 1:
            raise InvalidSpec("overestimate_factor must be >= 1")
        if self.size_grid not in ("pow2", "any"):
            raise InvalidSpec(f"size_grid must be 'pow2' or 'any', not {self.size_grid!r}")

    def sizes(self, cluster_nodes: int) -> list[int]:
        cap = max(1, int(self.nodes_max_fraction * cluster_nodes))
        if self.size_grid == "any":
            sizes = list(range(self.min_nodes, cap + 1))
        else:
            sizes = [2 ** k for k in range(cap.bit_length()) if self.min_nodes <= 2 ** k <= cap]
        return sizes or [min(self.min_nodes, cluster_nodes)]


def _bounded(dist: Dist, rng: np.random.Generator, n: int, ok) -> np.ndarray:
    """Draw ``n`` values, redrawing rejected ones until ``ok`` accepts all."""
    out = dist.draw(rng, n)
    bad = ~ok(out)
    for _ in range(10_000):
        if not bad.any():
            return out
        out[bad] = dist.draw(rng, int(bad.sum()))
        bad = ~ok(out)
    raise InvalidSpec(f"{dist} almost never satisfies its bounds")


def generate_tasks(spec: HtcSpec, rng: RngStreams, policy: Optional[OsgPolicy] = None,
                   first_id: int = 1) -> list[tuple[int, Task]]:
    """``(arrival_ms, Task)`` pairs in arrival order.

    Runtimes above ``max_runtime_h`` (and, with ``policy``, IO over the OSG
    limit) are resampled so every task is admissible.
    """
    spec.check(policy)
    n = spec.n_tasks
    if n == 0:
        return []
    cap_h = spec.max_runtime_h if policy is None else min(spec.max_runtime_h, policy.max_runtime_h)
    runtime = _bounded(spec.runtime_h, rng["htc.runtime"], n, lambda x: (x <= cap_h) & (x > 0))
    if spec.est_error > 0:
        f = rng["htc.estimate"].uniform(1 - spec.est_error, 1 + spec.est_error, n)
        est = np.minimum(runtime * f, cap_h)
    else:
        est = runtime
    io_cap = math.inf if policy is None else policy.max_io_gb
    if spec.n_datasets:
        ds_sizes = spec.input_gb.draw(rng["htc.input"], spec.n_datasets)
        ds_of = np.arange(n) % spec.n_datasets
        inputs = ds_sizes[ds_of]
        if (inputs > io_cap).any():
            raise InvalidSpec("a shared dataset alone exceeds the OSG IO limit")
        outputs = _bounded(spec.output_gb, rng["htc.output"], n, lambda x: inputs + x <= io_cap)
    else:
        ds_of = None
        pair = np.empty((n, 2))
        pair[:, 0] = spec.input_gb.draw(rng["htc.input"], n)
        pair[:, 1] = spec.output_gb.draw(rng["htc.output"], n)
        bad = pair.sum(axis=1) > io_cap
        for _ in range(10_000):
            if not bad.any():
                break
            k = int(bad.sum())
            pair[bad, 0] = spec.input_gb.draw(rng["htc.input"], k)
            pair[bad, 1] = spec.output_gb.draw(rng["htc.output"], k)
            bad = pair.sum(axis=1) > io_cap
        else:
            raise InvalidSpec("IO draws almost never satisfy the OSG limit")
        inputs, outputs = pair[:, 0], pair[:, 1]
    if spec.arrival_per_h > 0:
        gaps = rng["htc.arrival"].exponential(MS_PER_H / spec.arrival_per_h, n)
        arrivals = np.floor(np.cumsum(gaps)).astype(np.int64)
    else:
        arrivals = np.zeros(n, dtype=np.int64)

    out = []
    for i in range(n):
        tid = first_id + i
        actual = max(1, int(round(runtime[i] * MS_PER_H)))
        estimate = max(1, int(round(est[i] * MS_PER_H)))
        task = Task(tid, estimate, actual, memory_gb=spec.memory_gb, input_gb=float(inputs[i]),
                    output_gb=float(outputs[i]), priority=spec.priority,
                    dataset=None if ds_of is None else f"ds-{int(ds_of[i])}")
        out.append((int(arrivals[i]), task))
    return out


def draw_hpc_job(spec: HpcBackgroundSpec, rng: RngStreams, cluster_nodes: int, stream: str = "hpc") -> BatchJob:
    sizes = spec.sizes(cluster_nodes)
    if spec.size_exponent:
        w = np.array(sizes, dtype=float) ** -spec.size_exponent
        nodes = sizes[int(rng[f"{stream}.nodes"].choice(len(sizes), p=w / w.sum()))]
    else:
        nodes = sizes[int(rng[f"{stream}.nodes"].integers(len(sizes)))]
    wall_h = float(_bounded(spec.walltime_h, rng[f"{stream}.walltime"], 1, lambda x: x > 0)[0])
    walltime = max(1, hours(wall_h))
    runtime = max(1, int(walltime / spec.overestimate_factor))
    return BatchJob(nodes, walltime, spec.priority, kind=JobKind.HPC, runtime=runtime)


def generate_hpc(spec: HpcBackgroundSpec, rng: RngStreams, cluster_nodes: int,
                 until: int) -> list[tuple[int, BatchJob]]:
    """Poisson job arrivals in ``[0, until)``."""
    spec.check()
    if spec.arrival_per_h <= 0:
        return []
    out = []
    t = 0.0
    gaps = rng["hpc.arrival"]
    while True:
        t += gaps.exponential(MS_PER_H / spec.arrival_per_h)
        if t >= until:
            return out
        out.append((int(t), draw_hpc_job(spec, rng, cluster_nodes)))


def maintain_backlog(cluster: Cluster, spec: HpcBackgroundSpec, rng: RngStreams) -> list[BatchJob]:
    """Submit background jobs until queued HPC node demand reaches the target."""
    injected = []
    while cluster.queued_node_demand(JobKind.HPC) < spec.target_backlog_nodes:
        job = draw_hpc_job(spec, rng, cluster.size, stream="backlog")
        cluster.submit(job)
        injected.append(job)
    return injected


def install_background(engine: Engine, cluster: Cluster, spec: HpcBackgroundSpec, rng: RngStreams,
                       until: int) -> None:
    """Schedule Poisson arrivals and hook backlog upkeep after every cycle."""
    for t, job in generate_hpc(spec, rng, cluster.size, until):
        engine.at(t, EventKind.JOB_ARRIVAL, lambda job=job: cluster.submit(job), "hpc")
    if spec.target_backlog_nodes > 0:
        cluster.post_cycle_hooks.append(lambda: maintain_backlog(cluster, spec, rng))
        maintain_backlog(cluster, spec, rng)
