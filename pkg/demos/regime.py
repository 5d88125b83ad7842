"""Torus machine with a deep HPC backlog, with and without glidein pilots.

Compact placement leaves nodes idle that no queued job can use; short
low-priority pilots soak them up without delaying any reserved job.

    python3 demos/regime.py [scale]
"""

import sys
from pathlib import Path

from htcsim.scenario import load
from htcsim.simulation import run_scenario

ROOT = Path(__file__).resolve().parent.parent


def main(scale: float = 0.01) -> None:
    path = ROOT / "scenarios" / "atlas_bw.toml"
    for label, overrides in (("HPC only", ["overlay.enabled=false"]), ("with pilots", [])):
        scenario = load(path, overrides, scale=scale)
        _, _, s = run_scenario(scenario, seed=0)
        print(f"{label:12s} nodes={scenario.cluster.nodes:5d} utilization={s.utilization_mean:.3f} "
              f"tasks={s.htc_tasks_completed:6d} backlog_min={s.backlog_min_nodes} "
              f"reservation_delays={s.reservation_delays}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 0.01)
