"""Page-table size per level for a range of footprints."""

import argparse

from tierpt.config import parse_size
from tierpt.pagetable import PageSizeMode, pt_size_estimate
from tierpt.topology import PageKind


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("sizes", nargs="*", default=["1GiB", "64GiB", "1TiB", "2TiB"])
    ap.add_argument("--thp", action="store_true")
    args = ap.parse_args()
    mode = PageSizeMode.THP_2M if args.thp else PageSizeMode.BASE_4K

    print(f"{'footprint':>10}{'L1-L3 MiB':>12}{'L4 MiB':>12}{'upper %':>10}")
    for raw in args.sizes:
        est = pt_size_estimate(parse_size(raw), mode)
        upper = sum(est[k]["bytes"] for k in (PageKind.L1, PageKind.L2, PageKind.L3))
        leaf = est[PageKind.L4]["bytes"]
        print(f"{raw:>10}{upper / 2**20:12.2f}{leaf / 2**20:12.1f}{100 * upper / (upper + leaf):10.3f}")


if __name__ == "__main__":
    main()
