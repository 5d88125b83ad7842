"""Walk through one backfill window being packed into a wrapper job.

A 4-node machine runs a 2-node job for 10 h and holds a 4-node job at the
head of the queue, so 2 nodes are free for exactly 10 h.  Five tasks of
6, 6, 6, 4 and 4 h fill three of the window's lanes.
"""

from htcsim.cluster import BatchJob, Cluster
from htcsim.core import Engine, hours
from htcsim.dataplane import Credential, DataHub, DataPlane, SharedFilesystem
from htcsim.overlay import Overlay, Task


def main() -> None:
    eng = Engine()
    cl = Cluster(eng, 4, cores_per_node=4)
    dp = DataPlane(eng, DataHub(12, 10.0, 10.0), SharedFilesystem(100.0, 0.0), Credential())
    ov = Overlay(eng, cl, dp, mode="backfill_broker", wrapper_slack=0, startup_latency=0)
    cl.submit(BatchJob(2, hours(10), runtime=hours(10)))
    eng.run_until(0)
    head = cl.submit(BatchJob(4, hours(10), runtime=hours(10)))
    eng.run_until(0)
    print("windows:", cl.query_backfill_windows())
    for i, h in enumerate([6, 6, 6, 4, 4]):
        ov.add_task(Task(i + 1, hours(h), hours(h)))
    (wrapper,) = ov.broker_cycle()
    print(f"wrapper job {wrapper.id}: {wrapper.nodes_requested} node, walltime {wrapper.walltime_req / hours(1):g} h")
    eng.run_until(hours(30))
    print(f"head job started at {head.start / hours(1):g} h (its reserved start); tasks completed: {ov.completed}")


if __name__ == "__main__":
    main()
