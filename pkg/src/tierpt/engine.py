"""Seeded interleaving engine: simulated CPUs, faults, reclaim, OOM and cycle accounting.

Every agent is a generator. The scheduler picks a runnable agent uniformly at
random, advances it by one step, and parks it if it yields a :class:`Wait`
on a key that is still blocked. One step is one memory access, one fault, or
one migration sub-step.
"""

from __future__ import annotations

import csv
import json
import math
import random
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import OutOfMemory, SimulationError, StaleFrameRead
from .migration import (
    HotnessTracker,
    LockTable,
    MigrationStats,
    Migrator,
    Wait,
    autonuma_tick,
    demotion_target,
    demotion_victims,
)
from .mmu import Mmu, PageFault, mpki
from .pagetable import PageSizeMode, PageTable, PtPage, ReverseMap, pt_distribution
from .topology import PAGE_SIZE, DataPolicy, PageKind, PtPolicy, Tier, build_topology


@dataclass
class CycleAccounting:
    instructions: int = 0
    total_cycles: int = 0
    walk_cycles: int = 0
    stall_cycles: int = 0
    tlb_misses: int = 0
    accesses: int = 0
    faults: int = 0
    alloc_latency_sum: int = 0
    wait_cycles: int = 0
    migration_cycles: int = 0

    def merge(self, other: CycleAccounting) -> None:
        for k, v in asdict(other).items():
            setattr(self, k, getattr(self, k) + v)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["mpki"] = mpki(self.tlb_misses, self.instructions) if self.instructions else 0.0
        return d


@dataclass
class Cpu:
    id: int
    node: int
    mmu: Mmu
    acct: CycleAccounting = field(default_factory=CycleAccounting)


@dataclass
class Process:
    pid: int
    name: str
    pt: PageTable
    home_cpu: int
    acct: CycleAccounting = field(default_factory=CycleAccounting)
    alive: bool = True
    killed: bool = False


class SimEvent:
    def __init__(self, name: str):
        self.name = name
        self.is_set = False

    def __repr__(self):
        return f"SimEvent({self.name!r}, set={self.is_set})"


class OomKilled(Exception):
    def __init__(self, proc: Process, kind: PageKind):
        self.proc = proc
        self.kind = kind
        super().__init__(f"OOM kill of {proc.name} allocating {kind.name}")


class _Agent:
    __slots__ = ("name", "gen", "daemon")

    def __init__(self, name, gen, daemon):
        self.name = name
        self.gen = gen
        self.daemon = daemon


class Scheduler:
    """Uniform random choice among runnable agents; same seed, same schedule."""

    def __init__(self, seed: int, is_blocked):
        self.rng = random.Random(seed)
        self.is_blocked = is_blocked
        self.runnable: list[_Agent] = []
        self.waiting: dict[object, list[_Agent]] = {}
        self.steps = 0

    def add(self, name: str, gen, daemon: bool = False) -> None:
        self.runnable.append(_Agent(name, gen, daemon))

    def wake(self, key) -> None:
        agents = self.waiting.pop(key, None)
        if agents:
            self.runnable.extend(agents)

    def blocked_agents(self) -> list[str]:
        return [a.name for lst in self.waiting.values() for a in lst]

    def run(self) -> None:
        runnable = self.runnable
        rng = self.rng
        while runnable:
            i = rng.randrange(len(runnable)) if len(runnable) > 1 else 0
            agent = runnable[i]
            self.steps += 1
            try:
                req = next(agent.gen)
            except StopIteration:
                runnable.pop(i)
                continue
            if req is not None and self.is_blocked(req.key):
                runnable.pop(i)
                self.waiting.setdefault(req.key, []).append(agent)
        stuck = [a.name for lst in self.waiting.values() for a in lst if not a.daemon]
        if stuck:
            raise SimulationError(f"deadlock: agents {stuck} blocked with nothing runnable")


_DAEMON = "autonuma-daemon"


@dataclass
class Report:
    seed: int
    config: dict
    accounting: dict
    per_process: dict
    per_cpu: list
    migration: dict
    walk_series: list
    walk_cost_hist: dict
    walk_depth_hist: dict
    pt_distribution: list
    events: list
    violations: dict
    steps: int = 0

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "accounting": self.accounting,
            "per_process": self.per_process,
            "per_cpu": self.per_cpu,
            "migration": self.migration,
            "walk_cost_hist": {str(k): v for k, v in sorted(self.walk_cost_hist.items())},
            "walk_depth_hist": {str(k): v for k, v in sorted(self.walk_depth_hist.items())},
            "events": self.events,
            "pt_snapshots": self.pt_distribution,
            "violations": self.violations,
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    @property
    def max_walk_cycles(self) -> int:
        return max(self.walk_cost_hist, default=0)

    def walks_over(self, bound: int) -> float:
        total = sum(self.walk_cost_hist.values())
        over = sum(n for c, n in self.walk_cost_hist.items() if c > bound)
        return over / total if total else 0.0

    def oom_kills(self) -> list[dict]:
        return [e for e in self.events if e["kind"] == "oom_kill"]

    def distribution(self, label: str, pid: int | None = None) -> list[dict]:
        return [r for r in self.pt_distribution if r["label"] == label and (pid is None or r["pid"] == pid)]

    def tier_share(self, label: str, pid: int | None, tier: str, level: str | None = None) -> float:
        rows = [r for r in self.distribution(label, pid) if level is None or r["level"] == level]
        total = sum(r["pages"] for r in rows)
        on = sum(r["pages"] for r in rows if r["tier"] == tier)
        return on / total if total else 0.0

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(self.to_json() + "\n")
        with open(out / "walk_latency.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window_start_cycle", "mean_walk_cycles", "tlb_miss_count"])
            for start, mean, misses in self.walk_series:
                w.writerow([start, f"{mean:.6f}", misses])
        with open(out / "pt_distribution.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "node", "pages", "bytes"])
            final = Counter()
            for r in self.distribution("final"):
                final[r["level"], r["node"]] += r["pages"]
            for (level, node), pages in sorted(final.items()):
                w.writerow([level, node, pages, pages * PAGE_SIZE])
        with open(out / "migrations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["counter", "value"])
            for k, v in self.migration.items():
                w.writerow([k, v])


class Engine:
    def __init__(self, config=None, seed: int = 0):
        if config is None:
            from .config import SimConfig
            config = SimConfig()
        self.config = config
        self.seed = seed
        self.topology = build_topology(config.topology)
        self.rmap = ReverseMap()
        self.tables: dict[int, PageTable] = {}
        self.processes: dict[int, Process] = {}
        self.cpus: list[Cpu] = []
        self._make_cpus()
        self.cpu_nodes = {c.id: c.node for c in self.cpus}

        pol = config.policy
        self.stall_fraction = config.mmu.stall_fraction
        self.cpi = config.engine.cpi_base
        self.window = max(1, config.engine.walk_window)
        self.scheduler = Scheduler(seed, self._is_blocked)
        self.locks = LockTable(on_release=self.scheduler.wake)
        self.stats = MigrationStats()
        self.tracker = HotnessTracker.from_config(pol.autonuma)
        self.migrator = Migrator(
            self.topology, self.rmap, self.tables, self.locks, self.stats,
            pte_migration=pol.pte_migration.enabled,
            flush_all=self.flush_all_mmus,
            invalidate=self._invalidate,
            charge=self._charge_migration,
            retry_skipped=pol.pte_migration.retry_skipped,
        )
        self.autonuma = pol.autonuma.enabled
        self.next_epoch = pol.autonuma.epoch_cycles
        self.daemon_queue: deque = deque()
        self._daemon_started = False
        self._workers = 0

        self.clock = 0
        self.events: list[dict] = []
        self.snapshots: list[dict] = []
        self.walk_series: list[tuple[int, float, int]] = []
        self.walk_cost_hist: Counter = Counter()
        self.walk_depth_hist: Counter = Counter()
        self._win_accesses = 0
        self._win_start = 0
        self._win_walk = 0
        self._win_misses = 0
        self.stale_reads = 0
        self.divergences = 0
        self.pt_spilled = False
        self.on_access = None
        self._next_pid = 1

    # -- setup ----------------------------------------------------------

    def _make_cpus(self) -> None:
        mmu_cfg = self.config.mmu
        cid = 0
        for node in self.topology.nodes:
            for _ in range(node.local_cpu_count):
                self.cpus.append(Cpu(cid, node.id, Mmu(mmu_cfg)))
                cid += 1
        if not self.cpus:
            # configs that omit cpus get one per DRAM node
            for nid in self.topology.dram_nodes() or [self.topology.nodes[0].id]:
                self.cpus.append(Cpu(cid, nid, Mmu(mmu_cfg)))
                cid += 1

    def _is_blocked(self, key) -> bool:
        if isinstance(key, PtPage):
            return self.locks.is_locked(key)
        if isinstance(key, SimEvent):
            return not key.is_set
        if key == _DAEMON:
            return not self.daemon_queue and self._workers > 0
        return False

    def set_event(self, ev: SimEvent) -> None:
        ev.is_set = True
        self.scheduler.wake(ev)

    def event(self, kind: str, **detail) -> None:
        self.events.append({"clock": self.clock, "kind": kind, **detail})

    def create_process(self, name: str, cpu: int, data_policy: DataPolicy | None = None,
                       pt_policy: PtPolicy | None = None, mode: PageSizeMode | None = None) -> Process | None:
        """New process homed on ``cpu``; returns None if its root PT page cannot be placed."""
        pol = self.config.policy
        data_policy = data_policy or pol.data_policy
        pt_policy = pt_policy or pol.pt_policy
        if mode is None:
            mode = PageSizeMode.THP_2M if pol.thp else PageSizeMode.BASE_4K
        pid = self._next_pid
        self._next_pid += 1
        node = self.cpus[cpu].node
        try:
            pt = PageTable(pid, self.topology, self.rmap, data_policy, pt_policy, node, mode)
        except OutOfMemory as exc:
            if not self._reclaim_for(pt_policy, exc.kind):
                self._oom_event(pid, name, exc.kind)
                return None
            try:
                pt = PageTable(pid, self.topology, self.rmap, data_policy, pt_policy, node, mode)
            except OutOfMemory as exc2:
                self._oom_event(pid, name, exc2.kind)
                return None
        self.tables[pid] = pt
        proc = Process(pid, name, pt, cpu)
        self.processes[pid] = proc
        self.event("process_start", pid=pid, name=name)
        return proc

    def spawn(self, name: str, gen, daemon: bool = False) -> None:
        if not daemon:
            self._workers += 1
            gen = self._tracked(gen)
        self.scheduler.add(name, gen, daemon)

    def _tracked(self, gen):
        try:
            return (yield from gen)
        finally:
            self._workers -= 1
            if self._workers == 0:
                self.scheduler.wake(_DAEMON)

    # -- MMU plumbing ---------------------------------------------------

    def flush_all_mmus(self) -> None:
        for c in self.cpus:
            c.mmu.flush_all()

    def _invalidate(self, pid: int, va: int) -> None:
        for c in self.cpus:
            c.mmu.invalidate(pid, va)

    def _charge_migration(self, pid: int, cycles: int) -> None:
        proc = self.processes.get(pid)
        if proc is None:
            return
        cpu = self.cpus[proc.home_cpu]
        for acct in (proc.acct, cpu.acct):
            acct.migration_cycles += cycles
            acct.stall_cycles += cycles
            acct.total_cycles += cycles
        self.clock += cycles

    # -- faults, reclaim, OOM --------------------------------------------

    def _reclaim_for(self, pt_policy: PtPolicy, kind: PageKind) -> bool:
        """Direct reclaim for a DRAM-bound PT allocation; True if worth retrying."""
        pol = self.config.policy
        if not (kind.is_pt and pt_policy is PtPolicy.BIND_HIGH and kind is not PageKind.L4):
            return False
        if not pol.reclaim.enabled:
            return False
        moved = self.migrator.demote(self.tracker, pol.reclaim.batch)
        self.event("reclaim", level=kind.name, demoted=moved)
        return moved > 0

    def fault(self, proc: Process, cpu: Cpu, va: int):
        """Resolve a fault on ``va``; returns a lock page to wait on, or None when mapped."""
        pt = proc.pt
        for page in pt.path(va)[2:]:
            if self.locks.is_locked(page):
                return page
        try:
            out = pt.map(va)
        except OutOfMemory as exc:
            if not self._reclaim_for(pt.pt_policy, exc.kind):
                raise OomKilled(proc, exc.kind) from None
            try:
                out = pt.map(va)
            except OutOfMemory as exc2:
                raise OomKilled(proc, exc2.kind) from None
        for acct in (proc.acct, cpu.acct):
            acct.faults += 1
            acct.alloc_latency_sum += out.alloc_latency
        for acct in (proc.acct, cpu.acct):
            acct.stall_cycles += out.alloc_latency
            acct.total_cycles += out.alloc_latency
        self.clock += out.alloc_latency
        if not self.pt_spilled:
            for level, node in out.new_pt_pages:
                if self.topology.tier_of_node(node) is Tier.NVMM:
                    self.pt_spilled = True
                    self.event("pt_spill", pid=proc.pid, level=level.name, node=node)
                    break
        return None

    def _oom_event(self, pid: int, name: str, kind: PageKind) -> None:
        topo = self.topology
        self.event("oom_kill", pid=pid, name=name, level=kind.name,
                   nvmm_free_pages=sum(topo.node(n).free_pages for n in topo.nvmm_nodes()))

    def kill(self, proc: Process, kind: PageKind):
        """OOM-kill ``proc``; a generator that tears it down once no migration touches it."""
        if proc.killed:
            return
        proc.killed = True
        proc.alive = False
        self._oom_event(proc.pid, proc.name, kind)
        self.snapshot("oom_kill", proc)
        yield from self.exit_process(proc, reason="oom_kill")

    def exit_process(self, proc: Process, reason: str = "exit"):
        proc.alive = False
        pt = proc.pt
        while True:
            busy = any(getattr(k, "owner", None) == proc.pid for k in self.locks.held)
            busy = busy or any((self.rmap.get(f) or (None,))[0] == proc.pid for f in self.migrator.isolated)
            if not busy:
                break
            yield None
        if pt.alive:
            pt.teardown()
        for c in self.cpus:
            for tlb in (c.mmu.tlb_4k, c.mmu.tlb_2m):
                for key in [k for k in tlb.entries if k[0] == proc.pid]:
                    del tlb.entries[key]
            for key in [k for k in c.mmu.pwc.entries if k[0] == proc.pid]:
                del c.mmu.pwc.entries[key]
        self.event("process_exit", pid=proc.pid, name=proc.name, reason=reason)

    # -- the access path --------------------------------------------------

    def access_stream(self, proc: Process, cpu_id: int, records, compute_gap: int = 0):
        """Run ``records`` of (write, va) on ``cpu_id``; returns False if the process died."""
        cpu = self.cpus[cpu_id]
        mmu = cpu.mmu
        topo = self.topology
        allocated = topo.allocated
        pt = proc.pt
        instr = 1 + compute_gap
        base = instr * self.cpi
        sf = self.stall_fraction
        tracker = self.tracker
        track = self.autonuma
        for write, va in records:
            while True:
                if not proc.alive:
                    return False
                try:
                    out = mmu.access(pt, topo, va, write)
                except PageFault:
                    try:
                        key = self.fault(proc, cpu, va)
                    except OomKilled as exc:
                        yield from self.kill(proc, exc.kind)
                        return False
                    if key is not None:
                        t0 = self.clock
                        yield Wait(key)
                        waited = self.clock - t0
                        for acct in (proc.acct, cpu.acct):
                            acct.wait_cycles += waited
                            acct.stall_cycles += waited
                            acct.total_cycles += waited
                    continue
                except StaleFrameRead:
                    self.stale_reads += 1
                    mmu.flush_all()
                    continue
                break
            pfn = out.data_pfn
            if pfn not in allocated:
                self.stale_reads += 1
            if self.on_access is not None:
                self.on_access(proc, va, out)
            walk = out.walk_cycles
            stall_walk = walk if sf == 1.0 else math.ceil(walk * sf)
            stall = stall_walk + out.data_cycles
            for acct in (proc.acct, cpu.acct):
                acct.instructions += instr
                acct.accesses += 1
                acct.walk_cycles += walk
                acct.stall_cycles += stall
                acct.total_cycles += base + stall
            if not out.tlb_hit:
                proc.acct.tlb_misses += 1
                cpu.acct.tlb_misses += 1
                self.walk_cost_hist[walk] += 1
                self.walk_depth_hist[out.depth] += 1
                self._win_walk += walk
                self._win_misses += 1
            self.clock += base + stall
            self._win_accesses += 1
            if self._win_accesses >= self.window:
                self.sample_walk_latency()
            if track:
                tracker.record_access(pfn, cpu_id)
                if self.clock >= self.next_epoch:
                    self._epoch()
            yield None
        return True

    def sample_walk_latency(self) -> None:
        """Close the current window; windows without TLB misses leave no point."""
        if self._win_misses:
            self.walk_series.append((self._win_start, self._win_walk / self._win_misses, self._win_misses))
        self._win_start = self.clock
        self._win_accesses = self._win_walk = self._win_misses = 0

    # -- AutoNUMA analog ---------------------------------------------------

    def _epoch(self) -> None:
        epoch = self.config.policy.autonuma.epoch_cycles
        hints = autonuma_tick(self.tracker, self.topology, self.rmap, self.cpu_nodes)
        if self.config.policy.demotion.enabled:
            for nid in self.topology.dram_nodes():
                node = self.topology.node(nid)
                deficit = node.low_watermark - node.free_pages
                if deficit > 0:
                    n = min(deficit, self.tracker.promotion_budget)
                    for pfn in demotion_victims(self.tracker, self.topology, self.rmap, n, [nid]):
                        hints.append((pfn, demotion_target(self.topology, nid)[0]))
        self.tracker.rollover()
        while self.next_epoch <= self.clock:
            self.next_epoch += epoch
        if hints:
            self.daemon_queue.extend(hints)
            self._ensure_daemon()
            self.scheduler.wake(_DAEMON)

    def _ensure_daemon(self) -> None:
        if not self._daemon_started:
            self._daemon_started = True
            self.spawn("kautonuma", self._daemon(), daemon=True)

    def _daemon(self):
        queue = self.daemon_queue
        while True:
            if not queue:
                if self._workers == 0:
                    return
                yield Wait(_DAEMON)
                continue
            pfn, dest = queue.popleft()
            yield from self.migrator.migrate_data_steps(pfn, dest, blocking=True)

    # -- reporting ---------------------------------------------------------

    def snapshot(self, label: str, proc: Process) -> None:
        for (level, node), v in pt_distribution(proc.pt).items():
            self.snapshots.append({
                "label": label, "pid": proc.pid, "level": level.name, "node": node,
                "tier": self.topology.tier_of_node(node).value, "pages": v["pages"], "bytes": v["bytes"],
            })

    def global_accounting(self) -> CycleAccounting:
        total = CycleAccounting()
        for c in self.cpus:
            total.merge(c.acct)
        return total

    def run(self) -> Report:
        self.scheduler.run()
        if self._win_accesses:
            self.sample_walk_latency()
        if self.migrator.retry_skipped:
            self.migrator.retry_pending()
        for proc in self.processes.values():
            if proc.alive:
                self.snapshot("final", proc)
        return self.report()

    def report(self) -> Report:
        from .config import to_dict

        return Report(
            seed=self.seed,
            config=to_dict(self.config),
            accounting=self.global_accounting().as_dict(),
            per_process={str(p.pid): {"name": p.name, "killed": p.killed, **p.acct.as_dict()}
                         for p in self.processes.values()},
            per_cpu=[{"cpu": c.id, "node": c.node, **c.acct.as_dict()} for c in self.cpus],
            migration=self.stats.as_dict(),
            walk_series=list(self.walk_series),
            walk_cost_hist=dict(self.walk_cost_hist),
            walk_depth_hist=dict(self.walk_depth_hist),
            pt_distribution=list(self.snapshots),
            events=list(self.events),
            violations={"stale_reads": self.stale_reads, "divergences": self.divergences},
            steps=self.scheduler.steps,
        )


def run(config, workloads, seed: int = 0) -> Report:
    """Run each (name, records, compute_gap) stream as its own process and thread."""
    engine = Engine(config, seed)
    for i, (name, records, gap) in enumerate(workloads):
        cpu = i % len(engine.cpus)
        proc = engine.create_process(name, cpu)
        if proc is not None:
            engine.spawn(name, engine.access_stream(proc, cpu, records, gap))
    return engine.run()
