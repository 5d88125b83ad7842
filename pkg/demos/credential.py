"""Thirty days of glideins with and without proxy renewal.

Without renewal the proxy lapses on day 11: the broker can no longer submit
pilots and transfers to the remote hub stall.  Weekly renewal keeps it valid.
"""

from pathlib import Path

from htcsim.core import MS_PER_H
from htcsim.scenario import load
from htcsim.simulation import run_scenario

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    for name in ("credential_lapse", "credential_weekly"):
        sim, _, s = run_scenario(load(ROOT / "scenarios" / f"{name}.toml"), seed=0)
        pauses = [[a / MS_PER_H / 24, None if b is None else b / MS_PER_H / 24] for a, b in sim.data.pause_intervals]
        print(f"{name:18s} tasks {s.htc_tasks_completed}/{s.htc_tasks_total}, "
              f"remote pauses (days): {pauses or 'none'}")


if __name__ == "__main__":
    main()
