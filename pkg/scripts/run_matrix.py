"""Policy x PTE-migration matrix on the multi-tenant config.

    python scripts/run_matrix.py --config configs/multi_tenant.yaml --jobs 6
"""

import argparse
import csv
import sys
from pathlib import Path

from tierpt.cli import MATRIX_COLUMNS, run_matrix
from tierpt.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/multi_tenant.yaml")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="out/matrix.csv")
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    rows = run_matrix(cfg, args.jobs)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MATRIX_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"{'policy':<12}{'mig':<6}{'total':>8}{'walk':>8}{'stall':>8}")
    for r in rows:
        if r["oom_killed"]:
            print(f"{r['pt_policy']:<12}{str(r['pte_migration']):<6}{'OOM-killed':>24}")
        else:
            print(f"{r['pt_policy']:<12}{str(r['pte_migration']):<6}"
                  f"{r['total_norm']:8.3f}{r['walk_norm']:8.3f}{r['stall_norm']:8.3f}")
    print(f"wrote {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
