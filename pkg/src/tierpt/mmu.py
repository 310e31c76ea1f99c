"""TLB, page-walk cache and the tier-dependent walk cost model."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .errors import NotMapped, SimError
from .pagetable import PageSizeMode, PageTable, va_prefix
from .topology import NODE_SHIFT, PageKind, Topology


class PageFault(SimError):
    def __init__(self, va: int):
        self.va = va
        super().__init__(f"page fault at {va:#x}")


@dataclass
class MmuConfig:
    tlb_entries: int = 1536
    tlb_entries_2m: int = 1536
    pwc_entries: int = 64
    pwc_enabled: bool = True
    stall_fraction: float = 1.0


class Tlb:
    """Fully associative LRU cache of (pid, virtual page) -> data frame."""

    def __init__(self, capacity: int, page_shift: int = 12):
        self.capacity = capacity
        self.page_shift = page_shift
        self.entries: OrderedDict = OrderedDict()

    def lookup(self, pid: int, va: int):
        key = (pid, va >> self.page_shift)
        pfn = self.entries.get(key)
        if pfn is not None:
            self.entries.move_to_end(key)
        return pfn

    def fill(self, pid: int, va: int, pfn: int) -> None:
        key = (pid, va >> self.page_shift)
        self.entries[key] = pfn
        self.entries.move_to_end(key)
        if len(self.entries) > self.capacity:
            self.entries.popitem(last=False)

    def invalidate(self, pid: int, va: int) -> None:
        self.entries.pop((pid, va >> self.page_shift), None)

    def flush(self) -> None:
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


class Pwc:
    """LRU cache of upper-level entries: (pid, level, va prefix) -> child PT frame.

    Only L1-L3 entries that point at another PT page are cached, never leaves.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: OrderedDict = OrderedDict()

    def lookup(self, key):
        child = self.entries.get(key)
        if child is not None:
            self.entries.move_to_end(key)
        return child

    def fill(self, key, child: int) -> None:
        self.entries[key] = child
        self.entries.move_to_end(key)
        if len(self.entries) > self.capacity:
            self.entries.popitem(last=False)

    def flush(self) -> None:
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


@dataclass(slots=True)
class AccessOutcome:
    tlb_hit: bool
    data_pfn: int
    walk_levels: list
    walk_cycles: int
    data_cycles: int
    total_cycles: int
    depth: int = 0


class Mmu:
    def __init__(self, config: MmuConfig | None = None):
        config = config or MmuConfig()
        self.config = config
        self.tlb_4k = Tlb(config.tlb_entries, 12)
        self.tlb_2m = Tlb(config.tlb_entries_2m, 21)
        self.pwc = Pwc(config.pwc_entries)
        self.pwc_enabled = config.pwc_enabled and config.pwc_entries > 0

    def tlb_for(self, pt: PageTable) -> Tlb:
        return self.tlb_2m if pt.mode is PageSizeMode.THP_2M else self.tlb_4k

    def flush_all(self) -> None:
        self.tlb_4k.flush()
        self.tlb_2m.flush()
        self.pwc.flush()

    def invalidate(self, pid: int, va: int) -> None:
        self.tlb_4k.invalidate(pid, va)
        self.tlb_2m.invalidate(pid, va)

    def access(self, pt: PageTable, topology: Topology, va: int, write: bool = False) -> AccessOutcome:
        nodes = topology.by_id
        tlb = self.tlb_for(pt)
        pfn = tlb.lookup(pt.pid, va)
        if pfn is not None:
            node = nodes[pfn >> NODE_SHIFT]
            data = node.write_latency if write else node.read_latency
            return AccessOutcome(True, pfn, [], 0, data, data)

        start = None
        pid = pt.pid
        if self.pwc_enabled:
            # deepest cached non-leaf entry lets the walk skip every level above it
            for level in (PageKind.L3, PageKind.L2, PageKind.L1):
                if level >= pt.leaf_level:
                    continue
                child = self.pwc.lookup((pid, level, va_prefix(va, level)))
                if child is not None:
                    start = (PageKind(level + 1), child)
                    break
        try:
            result = pt.walk(va, start)
        except NotMapped:
            raise PageFault(va) from None

        walk_levels = []
        walk_cycles = 0
        for level, node_id in result.touched:
            cost = nodes[node_id].read_latency
            walk_levels.append((level, node_id, cost))
            walk_cycles += cost
        if self.pwc_enabled:
            frames = result.frames
            for i, (level, _) in enumerate(result.touched):
                if level < pt.leaf_level:
                    self.pwc.fill((pid, level, va_prefix(va, level)), frames[i + 1])
        pfn = result.pa[0]
        tlb.fill(pid, va, pfn)
        node = nodes[pfn >> NODE_SHIFT]
        data = node.write_latency if write else node.read_latency
        return AccessOutcome(False, pfn, walk_levels, walk_cycles, data, walk_cycles + data, len(walk_levels))


def access(mmu: Mmu, pt: PageTable, topology: Topology, va: int, write: bool = False) -> AccessOutcome:
    return mmu.access(pt, topology, va, write)


def flush_all(mmu: Mmu) -> None:
    mmu.flush_all()


def mpki(tlb_misses: int, instructions: int) -> float:
    if instructions <= 0:
        raise ValueError("instructions must be positive")
    return 1000.0 * tlb_misses / instructions
