"""Windowed walk latency while a fresh process populates past DRAM.

Prints the mean walk cost before and after the first page-table page lands
on NVMM and writes the series to CSV.
"""

import argparse
import csv
from pathlib import Path

from tierpt.config import load_config
from tierpt.workloads import run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/startup.yaml")
    ap.add_argument("--pwc", action="store_true", help="keep the page-walk cache on")
    ap.add_argument("--out", default="out/startup_walk.csv")
    args = ap.parse_args()

    cfg = load_config(args.config)
    cfg.mmu.pwc_enabled = args.pwc
    rep = run_scenario(cfg.scenario, cfg, cfg.seed)
    spill = next((e for e in rep.events if e["kind"] == "pt_spill"), None)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start_cycle", "mean_walk_cycles", "tlb_miss_count", "after_spill"])
        for start, mean, n in rep.walk_series:
            w.writerow([start, f"{mean:.3f}", n, spill is not None and start >= spill["clock"]])

    if spill is None:
        print("page tables never left DRAM")
        return
    series = rep.walk_series
    pre = [(m, n) for (s, m, n), nxt in zip(series, series[1:]) if nxt[0] <= spill["clock"]]
    post = [(m, n) for s, m, n in series if s >= spill["clock"]]
    mean = lambda pts: sum(m * n for m, n in pts) / max(1, sum(n for _, n in pts))
    print(f"first {spill['level']} page on node {spill['node']} at cycle {spill['clock']}")
    print(f"mean walk before {mean(pre):.1f}, after {mean(post):.1f}")


if __name__ == "__main__":
    main()
