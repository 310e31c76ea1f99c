"""Data-page migration, epoch-based hot-page promotion and leaf page-table migration.

Migrations are written as generators so an interleaving scheduler can suspend
them between sub-steps. A generator yields ``None`` at a step boundary or a
:class:`Wait` when it cannot proceed until a key is released; its return value
is the outcome. :func:`drive` runs one to completion without a scheduler.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable

from .errors import OutOfMemory, SimulationError, UnknownFrame
from .pagetable import PageSizeMode, PageTable, PtPage, ReverseMap, decompose
from .topology import (
    NODE_SHIFT,
    PageKind,
    Tier,
    Topology,
    alloc_page,
    free_page,
)


class L4Outcome(enum.Enum):
    SUCCESS = "success"
    ALREADY_IN_DESTINATION = "already_in_destination"
    SAME_TIER_SKIP = "same_tier_skip"
    DRAM_GUARD_SKIP = "dram_guard_skip"
    TRYLOCK_SKIP = "trylock_skip"
    NO_MEM_SKIP = "no_mem_skip"


class MigrateResult(enum.Enum):
    SUCCESS = "success"
    NOT_MAPPED = "not_mapped"
    OUT_OF_MEMORY = "out_of_memory"
    SOURCE_LOCKED = "source_locked"
    BUSY = "busy"


@dataclass
class MigrateOutcome:
    result: MigrateResult
    new_pfn: int | None = None
    l4: L4Outcome | None = None


@dataclass
class MigrationStats:
    data_migrations: int = 0
    promotions: int = 0
    demotions: int = 0
    data_failures: int = 0
    l4_success: int = 0
    l4_already_in_destination: int = 0
    l4_same_tier_skip: int = 0
    l4_dram_guard_skip: int = 0
    l4_trylock_skip: int = 0
    # allocation failures on the destination, also counted in l4_trylock_skip
    l4_nomem_skip: int = 0
    l4_retried: int = 0
    copy_cycles: int = 0

    def record(self, outcome: L4Outcome) -> None:
        if outcome is L4Outcome.SUCCESS:
            self.l4_success += 1
        elif outcome is L4Outcome.ALREADY_IN_DESTINATION:
            self.l4_already_in_destination += 1
        elif outcome is L4Outcome.SAME_TIER_SKIP:
            self.l4_same_tier_skip += 1
        elif outcome is L4Outcome.DRAM_GUARD_SKIP:
            self.l4_dram_guard_skip += 1
        else:
            self.l4_trylock_skip += 1
            if outcome is L4Outcome.NO_MEM_SKIP:
                self.l4_nomem_skip += 1

    @property
    def l4_invocations(self) -> int:
        return (self.l4_success + self.l4_already_in_destination + self.l4_same_tier_skip
                + self.l4_dram_guard_skip + self.l4_trylock_skip)

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass
class AutoNumaConfig:
    enabled: bool = True
    epoch_cycles: int = 1_000_000
    hot_threshold: int = 4
    promotion_budget: int = 256


@dataclass
class HotnessTracker:
    epoch_length: int = 1_000_000
    hot_threshold: int = 4
    promotion_budget: int = 256
    counts: dict = field(default_factory=lambda: defaultdict(int))
    accessors: dict = field(default_factory=lambda: defaultdict(int))
    epoch: int = 0

    @classmethod
    def from_config(cls, cfg: AutoNumaConfig) -> HotnessTracker:
        return cls(cfg.epoch_cycles, cfg.hot_threshold, cfg.promotion_budget)

    def record_access(self, pfn: int, cpu: int = 0) -> None:
        self.counts[pfn] += 1
        self.accessors[pfn, cpu] += 1

    def count(self, pfn: int) -> int:
        return self.counts.get(pfn, 0)

    def rollover(self) -> None:
        self.counts.clear()
        self.accessors.clear()
        self.epoch += 1


def record_access(tracker: HotnessTracker, data_pfn: int, cpu: int = 0) -> None:
    tracker.record_access(data_pfn, cpu)


def _headroom(topology: Topology, nid: int) -> int:
    node = topology.by_id[nid]
    return node.free_pages - node.low_watermark


def autonuma_tick(tracker: HotnessTracker, topology: Topology, rmap: ReverseMap,
                  cpu_nodes: dict[int, int] | None = None) -> list[tuple[int, int]]:
    """Promotion hints (data frame, DRAM node) for the epoch that just ended.

    A node only receives as many hints as it has pages above its low watermark,
    which keeps the band between low and min free for page-table pages.
    """
    cpu_nodes = cpu_nodes or {}
    dram = topology.dram_nodes()
    headroom = {n: _headroom(topology, n) for n in dram}
    if not any(h > 0 for h in headroom.values()):
        return []
    hot = [(n, pfn) for pfn, n in tracker.counts.items()
           if n >= tracker.hot_threshold and pfn in rmap and topology.tier_of(pfn) is Tier.NVMM]
    hot.sort(key=lambda t: (-t[0], t[1]))
    if not hot:
        return []
    best_cpu = {}
    wanted = {pfn for _, pfn in hot}
    for (pfn, cpu), n in tracker.accessors.items():
        if pfn in wanted:
            cur = best_cpu.get(pfn)
            if cur is None or n > cur[0] or (n == cur[0] and cpu < cur[1]):
                best_cpu[pfn] = (n, cpu)
    hints = []
    for _, pfn in hot:
        if len(hints) >= tracker.promotion_budget:
            break
        size = topology.allocated.get(pfn, 1)
        src = pfn >> NODE_SHIFT
        acc = best_cpu.get(pfn)
        preferred = cpu_nodes.get(acc[1]) if acc else None
        order = sorted(dram, key=lambda n: (n != preferred, topology.dist(src, n), n))
        for nid in order:
            if headroom[nid] >= size:
                headroom[nid] -= size
                hints.append((pfn, nid))
                break
    return hints


def demotion_victims(tracker: HotnessTracker, topology: Topology, rmap: ReverseMap,
                     count: int, nodes: list[int] | None = None) -> list[int]:
    """Coldest mapped data frames on DRAM (lowest epoch count, ties by frame number)."""
    nodes = set(nodes if nodes is not None else topology.dram_nodes())
    cands = [pfn for pfn, _ in rmap.items() if (pfn >> NODE_SHIFT) in nodes]
    cands.sort(key=lambda pfn: (tracker.count(pfn), pfn))
    return cands[:count]


def demotion_target(topology: Topology, src: int) -> list[int]:
    return sorted(topology.nvmm_nodes(), key=lambda n: (topology.dist(src, n), n))


@dataclass(frozen=True)
class Wait:
    key: object


class LockTable:
    """Exclusive try-locks keyed by PT page; release notifies waiters."""

    def __init__(self, on_release: Callable[[object], None] | None = None):
        self.held: dict[object, object] = {}
        self.on_release = on_release

    def try_acquire(self, key, holder) -> bool:
        if key in self.held:
            return False
        self.held[key] = holder
        return True

    def release(self, key, holder) -> None:
        if self.held.get(key) is not holder:
            raise SimulationError(f"{holder!r} releasing a lock it does not hold")
        del self.held[key]
        if self.on_release is not None:
            self.on_release(key)

    def is_locked(self, key) -> bool:
        return key in self.held


def drive(gen):
    """Run a step generator to completion; a Wait is a protocol error here."""
    try:
        while True:
            step = next(gen)
            if step is not None:
                raise SimulationError(f"synchronous migration cannot block on {step.key!r}")
    except StopIteration as stop:
        return stop.value


class Migrator:
    def __init__(self, topology: Topology, rmap: ReverseMap, tables: dict[int, PageTable],
                 locks: LockTable | None = None, stats: MigrationStats | None = None,
                 pte_migration: bool = True,
                 flush_all: Callable[[], None] | None = None,
                 invalidate: Callable[[int, int], None] | None = None,
                 charge: Callable[[int, int], None] | None = None,
                 retry_skipped: bool = False):
        self.topology = topology
        self.rmap = rmap
        self.tables = tables
        self.locks = locks if locks is not None else LockTable()
        self.stats = stats if stats is not None else MigrationStats()
        self.pte_migration = pte_migration
        self.flush_all = flush_all or (lambda: None)
        self.invalidate = invalidate or (lambda pid, va: None)
        self.charge = charge or (lambda pid, cycles: None)
        self.retry_skipped = retry_skipped
        self.isolated: set[int] = set()
        self.pending_retry: list[tuple[int, int]] = []
        self.l4_migrated_hook: Callable[[PtPage, PtPage], None] | None = None

    # -- helpers --------------------------------------------------------

    def _copy_cost(self, src: int, dst: int, units: int = 1) -> int:
        s = self.topology.by_id[src]
        d = self.topology.by_id[dst]
        return units * (s.read_latency + d.write_latency)

    def _table_of(self, pfn: int) -> tuple[PageTable, int] | None:
        entry = self.rmap.get(pfn)
        if entry is None:
            return None
        pid, va = entry
        pt = self.tables.get(pid)
        if pt is None or not pt.alive:
            return None
        return pt, va

    # -- data pages -----------------------------------------------------

    def migrate_data_steps(self, data_pfn: int, dest: int, blocking: bool = True):
        found = self._table_of(data_pfn)
        if found is None:
            self.stats.data_failures += 1
            return MigrateOutcome(MigrateResult.NOT_MAPPED)
        if data_pfn in self.isolated:
            self.stats.data_failures += 1
            return MigrateOutcome(MigrateResult.BUSY)
        self.isolated.add(data_pfn)
        yield None

        topo = self.topology
        npages = topo.allocated.get(data_pfn, 1)
        try:
            new = alloc_page(topo, [dest], PageKind.DATA, npages)
        except OutOfMemory:
            self.isolated.discard(data_pfn)
            self.stats.data_failures += 1
            return MigrateOutcome(MigrateResult.OUT_OF_MEMORY)
        yield None

        while True:
            found = self._table_of(data_pfn)
            if found is None:
                free_page(topo, new.pfn)
                self.isolated.discard(data_pfn)
                self.stats.data_failures += 1
                return MigrateOutcome(MigrateResult.NOT_MAPPED)
            pt, va = found
            leaf, _ = pt.leaf_for(va)
            if not self.locks.is_locked(leaf):
                break
            if not blocking:
                free_page(topo, new.pfn)
                self.isolated.discard(data_pfn)
                self.stats.data_failures += 1
                return MigrateOutcome(MigrateResult.SOURCE_LOCKED)
            yield Wait(leaf)

        # copy and switch the leaf entry under its lock; one atomic step
        src = data_pfn >> NODE_SHIFT
        slot = decompose(va)[pt.leaf_level - 1]
        assert leaf.entries[slot] == data_pfn
        topo.payload[new.pfn] = topo.payload.get(data_pfn)
        leaf.entries[slot] = new.pfn
        if pt.mode is PageSizeMode.BASE_4K:
            leaf.dram_child_count += ((topo.tier_of_node(dest) is Tier.DRAM)
                                      - (topo.tier_of_node(src) is Tier.DRAM))
        self.rmap.remove(data_pfn)
        self.rmap.add(new.pfn, pt.pid, va)
        self.invalidate(pt.pid, va)
        cost = self._copy_cost(src, dest, npages)
        self.stats.copy_cycles += cost
        self.charge(pt.pid, cost)
        yield None

        free_page(topo, data_pfn)
        self.isolated.discard(data_pfn)
        self.stats.data_migrations += 1
        src_tier, dst_tier = topo.tier_of_node(src), topo.tier_of_node(dest)
        if src_tier is Tier.NVMM and dst_tier is Tier.DRAM:
            self.stats.promotions += 1
        elif src_tier is Tier.DRAM and dst_tier is Tier.NVMM:
            self.stats.demotions += 1
        l4 = None
        if self.pte_migration and pt.mode is PageSizeMode.BASE_4K:
            yield None
            l4 = yield from self.migrate_l4_steps(new.pfn, dest)
        return MigrateOutcome(MigrateResult.SUCCESS, new.pfn, l4)

    def migrate_data(self, data_pfn: int, dest: int) -> MigrateOutcome:
        return drive(self.migrate_data_steps(data_pfn, dest, blocking=False))

    # -- leaf page-table pages ------------------------------------------

    def _check(self, data_pfn: int, dest: int):
        """Skip conditions evaluated before locking; returns an outcome or (pt, l4, l3)."""
        found = self._table_of(data_pfn)
        if found is None:
            return L4Outcome.TRYLOCK_SKIP
        pt = found[0]
        try:
            l4, l3 = pt.get_pt_entries(data_pfn)
        except UnknownFrame:
            return L4Outcome.TRYLOCK_SKIP
        topo = self.topology
        if l4.node == dest:
            return L4Outcome.ALREADY_IN_DESTINATION
        if topo.tier_of_node(l4.node) is topo.tier_of_node(dest):
            return L4Outcome.SAME_TIER_SKIP
        if topo.tier_of_node(dest) is Tier.NVMM and l4.dram_child_count > 0:
            return L4Outcome.DRAM_GUARD_SKIP
        return pt, l4, l3

    def _finish(self, outcome: L4Outcome, data_pfn: int, dest: int) -> L4Outcome:
        self.stats.record(outcome)
        if self.retry_skipped and outcome in (L4Outcome.TRYLOCK_SKIP, L4Outcome.NO_MEM_SKIP):
            self.pending_retry.append((data_pfn, dest))
        return outcome

    def migrate_l4_steps(self, data_pfn_new: int, dest: int):
        checked = self._check(data_pfn_new, dest)
        if isinstance(checked, L4Outcome):
            return self._finish(checked, data_pfn_new, dest)
        yield None

        token = object()
        locks = self.locks
        checked = self._check(data_pfn_new, dest)
        if isinstance(checked, L4Outcome):
            return self._finish(checked, data_pfn_new, dest)
        pt, l4, l3 = checked
        if not locks.try_acquire(l3, token):
            return self._finish(L4Outcome.TRYLOCK_SKIP, data_pfn_new, dest)
        if not locks.try_acquire(l4, token):
            locks.release(l3, token)
            return self._finish(L4Outcome.TRYLOCK_SKIP, data_pfn_new, dest)
        yield None

        topo = self.topology
        try:
            new = alloc_page(topo, [dest], PageKind.L4)
        except OutOfMemory:
            locks.release(l4, token)
            locks.release(l3, token)
            return self._finish(L4Outcome.NO_MEM_SKIP, data_pfn_new, dest)
        yield None

        # sync point: flush, copy, and repoint L3 with no suspension in between
        self.flush_all()
        moved = PtPage(new.pfn, PageKind.L4, new.node, l4.owner)
        moved.entries = dict(l4.entries)
        moved.dram_child_count = l4.dram_child_count
        pt.pages[new.pfn] = moved
        slot = next(i for i, c in l3.entries.items() if c == l4.pfn)
        l3.entries[slot] = new.pfn
        cost = self._copy_cost(l4.node, new.node)
        self.stats.copy_cycles += cost
        self.charge(pt.pid, cost)
        if self.l4_migrated_hook is not None:
            self.l4_migrated_hook(l4, moved)
        yield None

        del pt.pages[l4.pfn]
        free_page(topo, l4.pfn)
        yield None

        locks.release(l4, token)
        locks.release(l3, token)
        return self._finish(L4Outcome.SUCCESS, data_pfn_new, dest)

    def migrate_l4(self, data_pfn_new: int, dest: int) -> L4Outcome:
        return drive(self.migrate_l4_steps(data_pfn_new, dest))

    def retry_pending(self) -> int:
        """Re-run skipped leaf migrations whose trigger page is still placed on ``dest``."""
        pending, self.pending_retry = self.pending_retry, []
        done = 0
        for pfn, dest in pending:
            if pfn in self.rmap and pfn >> NODE_SHIFT == dest:
                self.stats.l4_retried += 1
                self.migrate_l4(pfn, dest)
                done += 1
        return done

    # -- batches --------------------------------------------------------

    def move_pages_steps(self, pid: int, vas: list[int], dest: int, blocking: bool = True):
        pt = self.tables[pid]
        results = []
        for va in vas:
            pfn = pt.translate(va) if pt.alive else None
            if pfn is None:
                results.append(MigrateOutcome(MigrateResult.NOT_MAPPED))
                continue
            out = yield from self.migrate_data_steps(pfn, dest, blocking)
            results.append(out)
        return results

    def move_pages(self, pid: int, vas: list[int], dest: int) -> list[MigrateOutcome]:
        return drive(self.move_pages_steps(pid, vas, dest, blocking=False))

    def demote(self, tracker: HotnessTracker, count: int, nodes: list[int] | None = None) -> int:
        """Synchronously demote up to ``count`` cold DRAM pages; returns pages moved."""
        moved = 0
        for pfn in demotion_victims(tracker, self.topology, self.rmap, count, nodes):
            src = pfn >> NODE_SHIFT
            for dest in demotion_target(self.topology, src):
                out = self.migrate_data(pfn, dest)
                if out.result is MigrateResult.SUCCESS:
                    moved += 1
                    break
                if out.result is not MigrateResult.OUT_OF_MEMORY:
                    break
        return moved

