"""Discrete-event simulation of high-throughput workloads on HPC clusters."""

__version__ = "0.1.0"

from .cluster import BatchJob, BackfillWindow, Cluster, JobKind, Placement  # noqa: E402
from .core import Engine, EventKind, RngStreams, days, hours, minutes, seconds  # noqa: E402
from .dataplane import Credential, DataHub, DataPlane, SharedFilesystem  # noqa: E402
from .overlay import OsgPolicy, Overlay, Task, plan_wrapper, validate  # noqa: E402
from .scenario import Scenario, ScenarioError, UnknownPreset, load, preset  # noqa: E402
from .simulation import RunSummary, Simulation, run_scenario  # noqa: E402
from .workload import Dist, HpcBackgroundSpec, HtcSpec, InvalidSpec, generate_tasks, maintain_backlog  # noqa: E402
