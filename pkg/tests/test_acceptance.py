"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in the terminal summary. ``python tests/test_acceptance.py`` runs them without
pytest.
"""

import copy
import random
import sys
import time
from pathlib import Path

import pytest


from tierpt.config import RunConfig, SimConfig, load_config
from tierpt.engine import Engine
from tierpt.mmu import MmuConfig
from tierpt.pagetable import PageSizeMode, pt_size_estimate
from tierpt.topology import MIB, PAGE_SIZE, PageKind, PtPolicy, Tier, free_page
from tierpt.workloads import (
    AccessPhase,
    ScenarioConfig,
    ScenarioKind,
    WorkloadSpec,
    build_scenario,
    run_scenario,
)

from conftest import exhaust, four_nodes

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
GIB = 1 << 30
TIB = 1 << 40
RESULTS: list[str] = []


def record(num: int, title: str, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    in_time = elapsed < limit
    line = (f"{'PASS' if ok and in_time else 'FAIL'} [{num:2d}] {title}: {detail} "
            f"({elapsed:.1f}s, limit {limit:.0f}s)")
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def multi_tenant_small(policy=PtPolicy.BIND_HIGH) -> RunConfig:
    cfg = RunConfig()
    cfg.topology = four_nodes(16, 64)
    cfg.policy.pt_policy = policy
    cfg.policy.autonuma.epoch_cycles = 200_000
    cfg.policy.pte_migration.retry_skipped = True
    cfg.scenario = ScenarioConfig(
        kind=ScenarioKind.MULTI_TENANT, filler_bytes=32 * MIB,
        workload=WorkloadSpec(footprint_bytes=32 * MIB, access=AccessPhase(op_count=20_000)))
    return cfg


def pre_post(series, clock):
    """Windows wholly before ``clock`` and windows starting at or after it."""
    pre = [(m, n) for (s, m, n), nxt in zip(series, series[1:]) if nxt[0] <= clock]
    post = [(m, n) for s, m, n in series if s >= clock]
    return pre, post


def weighted(points):
    misses = sum(n for _, n in points)
    return sum(m * n for m, n in points) / misses if misses else 0.0


# 1 -------------------------------------------------------------------------


def test_01_size_arithmetic():
    t0 = time.perf_counter()
    one = pt_size_estimate(TIB)
    l4_gib = one[PageKind.L4]["bytes"] / GIB
    # the reference "1 TB (1.9 GB)" compared in the same unit as the estimate
    rel = abs(l4_gib - 1.9) / 1.9
    decimal = pt_size_estimate(10**12)[PageKind.L4]["bytes"] / 1e9
    two = pt_size_estimate(2 * TIB)
    upper = sum(two[k]["bytes"] for k in (PageKind.L1, PageKind.L2, PageKind.L3))
    ratio = upper / sum(v["bytes"] for v in two.values())
    ok = one[PageKind.L4]["bytes"] == 2 * GIB and rel <= 0.10 and ratio < 0.002
    record(1, "size arithmetic", ok,
           f"L4(1TiB)={l4_gib:.3f}GiB ({rel:.1%} from 1.9; 1e12 B -> {decimal:.2f}GB), "
           f"upper(2TiB)={upper / MIB:.2f}MiB = {ratio:.4%} of PT", time.perf_counter() - t0, 1)


# 2 -------------------------------------------------------------------------


def test_02_interleave_spill():
    t0 = time.perf_counter()
    cfg = RunConfig()
    cfg.topology = four_nodes(256, 1024)
    cfg.policy.pt_policy = PtPolicy.FOLLOW_DATA
    cfg.scenario = ScenarioConfig(kind=ScenarioKind.INTERLEAVED, workload=WorkloadSpec(
        footprint_bytes=10_000 * 2 * MIB, populate_stride=2 * MIB, access=None))
    eng = build_scenario(cfg.scenario, cfg, seed=0)
    rep = eng.run()
    rows = rep.distribution("final")
    l4 = sum(r["pages"] for r in rows if r["level"] == "L4")
    share = rep.tier_share("final", None, "nvmm")
    dram_free = min(eng.topology.node(n).free_pages - eng.topology.node(n).low_watermark
                    for n in eng.topology.dram_nodes())
    ok = l4 >= 10_000 and abs(share - 0.5) <= 0.02 and dram_free > 0
    record(2, "interleave spill", ok,
           f"{l4} L4 pages, PT share on NVMM {share:.2%}, min DRAM pages above low watermark {dram_free}",
           time.perf_counter() - t0, 30)


# 3 -------------------------------------------------------------------------


def _spilled(policy, pwc):
    cfg = RunConfig()
    cfg.topology = four_nodes(32, 512)
    cfg.mmu = MmuConfig(pwc_enabled=pwc)
    cfg.policy.pt_policy = policy
    cfg.scenario = ScenarioConfig(kind=ScenarioKind.FULL_SYSTEM, workload=WorkloadSpec(
        footprint_bytes=4 * GIB, populate_stride=64 * 1024,
        access=AccessPhase(distribution="uniform", op_count=30_000)))
    return run_scenario(cfg.scenario, cfg, seed=5)


@pytest.mark.slow
def test_03_bind_high_walk_bound():
    t0 = time.perf_counter()
    bound = 3 * 100 + 300
    bh_off = _spilled(PtPolicy.BIND_HIGH, pwc=False)
    bh_on = _spilled(PtPolicy.BIND_HIGH, pwc=True)
    fd = _spilled(PtPolicy.FOLLOW_DATA, pwc=False)
    over = fd.walks_over(bound)
    worst = max(bh_off.max_walk_cycles, bh_on.max_walk_cycles)
    ok = worst <= bound and over >= 0.01
    record(3, "BindHigh walk bound", ok,
           f"BindHigh max walk {worst} <= {bound}; FollowData walks over bound {over:.1%} "
           f"(max {fd.max_walk_cycles})", time.perf_counter() - t0, 60)


# 4 -------------------------------------------------------------------------


def test_04_spill_inflection():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "startup.yaml")
    cfg.mmu.pwc_enabled = False
    rep = run_scenario(cfg.scenario, cfg, cfg.seed)
    spill = next(e["clock"] for e in rep.events if e["kind"] == "pt_spill")
    pre, post = pre_post(rep.walk_series, spill)
    before, after = weighted(pre), weighted(post)
    ok = bool(pre and post) and after >= 1.5 * before
    record(4, "spill inflection", ok,
           f"mean walk {before:.1f} before PT spill, {after:.1f} after ({after / before:.3f}x)",
           time.perf_counter() - t0, 60)


# 5 -------------------------------------------------------------------------


def test_05_bind_all_pathology():
    t0 = time.perf_counter()
    runs = {}
    for policy in (PtPolicy.BIND_ALL, PtPolicy.BIND_HIGH):
        cfg = multi_tenant_small(policy)
        cfg.scenario.filler_bytes = 30 * MIB
        runs[policy] = run_scenario(cfg.scenario, cfg, seed=7)
    kills = runs[PtPolicy.BIND_ALL].oom_kills()
    nvmm_free = kills[0]["nvmm_free_pages"] if kills else 0
    bh_kills = runs[PtPolicy.BIND_HIGH].oom_kills()
    ok = bool(kills) and nvmm_free > 0 and not bh_kills
    record(5, "BindAll pathology", ok,
           f"BindAll OOM kills {[(k['name'], k['level']) for k in kills]} with {nvmm_free} NVMM pages free; "
           f"BindHigh kills {len(bh_kills)}", time.perf_counter() - t0, 60)


# 6 -------------------------------------------------------------------------


def test_06_migration_counters():
    t0 = time.perf_counter()
    cfg = SimConfig()
    cfg.topology = four_nodes(16, 64)
    eng = Engine(cfg, 0)
    proc = eng.create_process("bench", 0)
    held = exhaust(eng.topology, 0) + exhaust(eng.topology, 1)
    base = 0x7F00_0000_0000
    vas = [base + i * PAGE_SIZE for i in range(512)]
    for va in vas:
        proc.pt.map(va)
    for f in held:
        free_page(eng.topology, f)
    on_nvmm = proc.pt.leaf_for(base)[0].node in eng.topology.nvmm_nodes()
    outs = eng.migrator.move_pages(proc.pid, vas, 0)
    s = eng.stats
    ok = (on_nvmm and all(o.result.value == "success" for o in outs)
          and s.l4_success == 1 and s.l4_already_in_destination == 511)
    record(6, "migration counters", ok,
           f"l4_success={s.l4_success}, l4_already_in_destination={s.l4_already_in_destination}",
           time.perf_counter() - t0, 5)


# 7 -------------------------------------------------------------------------


def residency_violations(eng) -> int:
    bad = 0
    for pt in eng.tables.values():
        if not pt.alive or pt.mode is not PageSizeMode.BASE_4K:
            continue
        for page in pt.iter_pages():
            if page.level == PageKind.L4 and page.dram_child_count > 0:
                bad += eng.topology.tier_of_node(page.node) is not Tier.DRAM
    return bad


@pytest.mark.slow
def test_07_l4_residency():
    t0 = time.perf_counter()
    violations = 0
    success = 0
    for seed in range(100):
        policy = PtPolicy.BIND_HIGH if seed % 2 else PtPolicy.FOLLOW_DATA
        cfg = multi_tenant_small(policy)
        eng = build_scenario(cfg.scenario, cfg, seed)
        eng.run()
        violations += residency_violations(eng)
        success += eng.stats.l4_success
        for pt in eng.tables.values():
            if pt.alive:
                pt.check_invariants()
    ok = violations == 0 and success > 0
    record(7, "L4 residency", ok, f"100 seeds, {violations} violations, {success} L4 migrations",
           time.perf_counter() - t0, 300)


# 8 -------------------------------------------------------------------------


def consistency_schedule(seed: int) -> tuple[int, int, int]:
    """One seeded interleaving of faulting threads, page movers and leaf migrations.

    Returns (divergences, stale reads, leaf migrations).
    """
    rng = random.Random(seed)
    cfg = SimConfig()
    cfg.topology = four_nodes(4, 8)
    cfg.mmu = MmuConfig(tlb_entries=8, pwc_entries=4)
    cfg.policy.autonuma.enabled = False
    eng = Engine(cfg, seed)
    proc = eng.create_process("p", 0)
    pt = proc.pt
    base = 0x7F00_0000_0000
    regions = rng.randint(2, 6)
    vas = [base + r * 512 * PAGE_SIZE + i * PAGE_SIZE for r in range(regions) for i in range(6)]
    start_on_nvmm = rng.random() < 0.5
    held = exhaust(eng.topology, 0) + exhaust(eng.topology, 1) if start_on_nvmm else []
    for va in rng.sample(vas, len(vas) // 2):
        pt.map(va)
    for f in held:
        free_page(eng.topology, f)

    divergences = 0

    def check(p, va, out):
        nonlocal divergences
        if eng.topology.payload.get(out.data_pfn) != (p.pid, va - va % PAGE_SIZE):
            divergences += 1

    eng.on_access = check
    for t in range(2):
        recs = [(rng.random() < 0.5, rng.choice(vas) + rng.randrange(PAGE_SIZE)) for _ in range(12)]
        eng.spawn(f"cpu{t}", eng.access_stream(proc, t, recs))

    dram, nvmm = eng.topology.dram_nodes(), eng.topology.nvmm_nodes()

    def mover(k):
        r = random.Random(seed * 31 + k)
        for _ in range(3):
            batch = r.sample(vas, 3)
            dest = r.choice(dram if r.random() < 0.6 else nvmm)
            yield from eng.migrator.move_pages_steps(proc.pid, batch, dest)

    def leaf_mover():
        r = random.Random(seed * 17)
        for _ in range(3):
            pfn = pt.translate(r.choice(vas))
            if pfn is not None:
                dest = pfn >> 40
                yield from eng.migrator.migrate_l4_steps(pfn, dest)
            yield None

    eng.spawn("mover0", mover(0))
    eng.spawn("mover1", mover(1))
    eng.spawn("leaf", leaf_mover())
    eng.run()
    # final sweep: every mapped page still carries its own payload
    for va in vas:
        pfn = pt.translate(va)
        if pfn is not None and eng.topology.payload.get(pfn) != (proc.pid, va):
            divergences += 1
    pt.check_invariants()
    eng.topology.check_conservation()
    assert not eng.locks.held and not eng.migrator.isolated
    assert len(pt.pages) <= 1 + 1 + 1 + 64
    return divergences, eng.stale_reads, eng.stats.l4_success


@pytest.mark.slow
def test_08_consistency_under_interleaving():
    t0 = time.perf_counter()
    div = stale = leaf = 0
    for seed in range(10_000):
        d, s, l4 = consistency_schedule(seed)
        div += d
        stale += s
        leaf += l4
    ok = div == 0 and stale == 0 and leaf > 0
    record(8, "consistency under interleaving", ok,
           f"10000 schedules, {div} divergences, {stale} stale reads, {leaf} L4 migrations",
           time.perf_counter() - t0, 300)


# 9 -------------------------------------------------------------------------


@pytest.mark.slow
def test_09_directional_benefit():
    t0 = time.perf_counter()
    base = load_config(CONFIGS / "multi_tenant.yaml")
    cells = {}
    for name, policy, mig in (("FollowData", PtPolicy.FOLLOW_DATA, False),
                              ("BHi", PtPolicy.BIND_HIGH, False),
                              ("BHi+Mig", PtPolicy.BIND_HIGH, True)):
        cfg = copy.deepcopy(base)
        cfg.policy.pt_policy = policy
        cfg.policy.pte_migration.enabled = mig
        rep = run_scenario(cfg.scenario, cfg, cfg.seed)
        cells[name] = next(p for p in rep.per_process.values() if p["name"] == "bench")
    fd, bhi, best = cells["FollowData"], cells["BHi"], cells["BHi+Mig"]
    reduction = 1 - best["walk_cycles"] / bhi["walk_cycles"]
    ok = (best["walk_cycles"] < fd["walk_cycles"] and best["total_cycles"] < fd["total_cycles"]
          and reduction >= 0.10)
    record(9, "directional benefit", ok,
           f"BHi+Mig vs FollowData walk {best['walk_cycles'] / fd['walk_cycles']:.3f}x, "
           f"total {best['total_cycles'] / fd['total_cycles']:.3f}x; Mig walk reduction {reduction:.1%}",
           time.perf_counter() - t0, 300)


# 10 ------------------------------------------------------------------------


def test_10_thp():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "thp.yaml")
    cfg.topology = four_nodes(128, 512)
    cfg.mmu.pwc_enabled = False
    cfg.policy.pte_migration.enabled = True
    # demotion keeps huge pages moving so a leaf migration would have had a chance
    cfg.policy.demotion.enabled = True
    rep = run_scenario(cfg.scenario, cfg, cfg.seed)
    depths = set(rep.walk_depth_hist)
    l4 = {k: v for k, v in rep.migration.items() if k.startswith("l4_")}
    ok = depths == {3} and all(v == 0 for v in l4.values()) and rep.migration["data_migrations"] > 0
    record(10, "THP behaviour", ok,
           f"walk depths {sorted(depths)}, {rep.migration['data_migrations']} huge-page migrations, "
           f"l4 counters sum {sum(l4.values())}", time.perf_counter() - t0, 30)


# 11 ------------------------------------------------------------------------


def test_11_determinism(tmp_path):
    t0 = time.perf_counter()
    blobs = []
    for i in range(2):
        cfg = multi_tenant_small()
        rep = run_scenario(cfg.scenario, cfg, seed=21)
        rep.write(tmp_path / str(i))
        blobs.append((tmp_path / str(i) / "summary.json").read_bytes())
    ok = blobs[0] == blobs[1]
    record(11, "determinism", ok, f"summary.json {len(blobs[0])} bytes, identical={ok}",
           time.perf_counter() - t0, 60)


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_")):
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
