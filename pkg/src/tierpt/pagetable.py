"""Per-process 4-level radix page table with on-demand level allocation."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import AlreadyMapped, NonCanonical, NotMapped, StaleFrameRead, UnknownFrame
from .topology import (
    HUGE_PAGES,
    NODE_SHIFT,
    PAGE_SIZE,
    DataPolicy,
    PageKind,
    PtPolicy,
    Tier,
    Topology,
    alloc_page,
    free_page,
    select_node,
)

ENTRIES = 512
VA_BITS = 48
HUGE_SIZE = PAGE_SIZE * HUGE_PAGES
LEVELS = (PageKind.L1, PageKind.L2, PageKind.L3, PageKind.L4)
_SHIFTS = {PageKind.L1: 39, PageKind.L2: 30, PageKind.L3: 21, PageKind.L4: 12}


class PageSizeMode(enum.Enum):
    BASE_4K = "4k"
    THP_2M = "2m"


def decompose(va: int) -> tuple[int, int, int, int, int]:
    if not 0 <= va < (1 << VA_BITS):
        raise NonCanonical(f"{va:#x} is outside the 48-bit address space")
    return ((va >> 39) & 511, (va >> 30) & 511, (va >> 21) & 511, (va >> 12) & 511, va & 4095)


def compose(i1: int, i2: int, i3: int, i4: int, offset: int = 0) -> int:
    return (((i1 * ENTRIES + i2) * ENTRIES + i3) * ENTRIES + i4) * PAGE_SIZE + offset


def va_prefix(va: int, level: PageKind) -> int:
    """Bits of ``va`` that select the entry read at ``level`` (root index for L1)."""
    return va >> _SHIFTS[level]


class PtPage:
    __slots__ = ("pfn", "level", "node", "owner", "entries", "dram_child_count")

    def __init__(self, pfn: int, level: PageKind, node: int, owner: int):
        self.pfn = pfn
        self.level = level
        self.node = node
        self.owner = owner
        self.entries: dict[int, int] = {}
        self.dram_child_count = 0

    @property
    def present_count(self) -> int:
        return len(self.entries)

    def __repr__(self):
        return f"PtPage({self.level.name}, pfn={self.pfn:#x}, node={self.node}, present={len(self.entries)})"


class ReverseMap:
    """Data frame -> (pid, page-aligned va)."""

    def __init__(self):
        self._map: dict[int, tuple[int, int]] = {}

    def add(self, pfn: int, pid: int, va: int) -> None:
        if pfn in self._map:
            raise AlreadyMapped(f"frame {pfn:#x} already mapped by {self._map[pfn]}")
        self._map[pfn] = (pid, va)

    def remove(self, pfn: int) -> tuple[int, int]:
        try:
            return self._map.pop(pfn)
        except KeyError:
            raise UnknownFrame(f"frame {pfn:#x} is not mapped") from None

    def lookup(self, pfn: int) -> tuple[int, int]:
        try:
            return self._map[pfn]
        except KeyError:
            raise UnknownFrame(f"frame {pfn:#x} is not mapped") from None

    def get(self, pfn: int):
        return self._map.get(pfn)

    def items(self):
        return self._map.items()

    def __contains__(self, pfn: int) -> bool:
        return pfn in self._map

    def __len__(self) -> int:
        return len(self._map)


@dataclass
class WalkResult:
    pa: tuple[int, int]
    touched: list[tuple[PageKind, int]]
    frames: list[int] = field(default_factory=list)


@dataclass
class MapOutcome:
    data_pfn: int
    data_node: int
    new_pt_pages: list[tuple[PageKind, int]]
    alloc_latency: int
    slow_allocs: int = 0


class PageTable:
    def __init__(self, pid: int, topology: Topology, rmap: ReverseMap,
                 data_policy: DataPolicy = DataPolicy.FIRST_TOUCH,
                 pt_policy: PtPolicy = PtPolicy.FOLLOW_DATA,
                 local_node: int = 0,
                 mode: PageSizeMode = PageSizeMode.BASE_4K):
        self.pid = pid
        self.topology = topology
        self.rmap = rmap
        self.data_policy = data_policy
        self.pt_policy = pt_policy
        self.local_node = local_node
        self.mode = mode
        self.pages: dict[int, PtPage] = {}
        self.alive = True
        self.root, _ = self._new_pt_page(PageKind.L1)

    @property
    def leaf_level(self) -> PageKind:
        return PageKind.L3 if self.mode is PageSizeMode.THP_2M else PageKind.L4

    @property
    def data_page_size(self) -> int:
        return HUGE_SIZE if self.mode is PageSizeMode.THP_2M else PAGE_SIZE

    def page_base(self, va: int) -> int:
        return va - (va % self.data_page_size)

    def _alloc(self, kind: PageKind, npages: int = 1):
        candidates = select_node(self.topology, kind, self.data_policy, self.pt_policy, self.local_node)
        return alloc_page(self.topology, candidates, kind, npages)

    def _new_pt_page(self, level: PageKind):
        out = self._alloc(level)
        page = PtPage(out.pfn, level, out.node, self.pid)
        self.pages[out.pfn] = page
        return page, out

    # -- structure ------------------------------------------------------

    def path(self, va: int) -> list[PtPage]:
        """Existing PT pages from the root towards the leaf for ``va``."""
        idx = decompose(va)
        pages = [self.root]
        page = self.root
        for depth in range(self.leaf_level - 1):
            child = page.entries.get(idx[depth])
            if child is None:
                break
            page = self.pages[child]
            pages.append(page)
        return pages

    def map(self, va: int, payload=None) -> MapOutcome:
        idx = decompose(va)
        leaf = self.leaf_level
        new_pages = []
        latency = 0
        slow = 0
        page = self.root
        for depth in range(leaf - 1):
            child = page.entries.get(idx[depth])
            if child is None:
                nxt, out = self._new_pt_page(PageKind(depth + 2))
                latency += out.latency
                slow += out.path.value == "slow"
                page.entries[idx[depth]] = nxt.pfn
                new_pages.append((nxt.level, nxt.node))
                page = nxt
            else:
                page = self.pages[child]
        slot = idx[leaf - 1]
        if slot in page.entries:
            raise AlreadyMapped(f"va {va:#x} is already mapped")
        huge = self.mode is PageSizeMode.THP_2M
        out = self._alloc(PageKind.DATA, HUGE_PAGES if huge else 1)
        latency += out.latency
        slow += out.path.value == "slow"
        page.entries[slot] = out.pfn
        if not huge and self.topology.tier_of_node(out.node) is Tier.DRAM:
            page.dram_child_count += 1
        base = self.page_base(va)
        self.rmap.add(out.pfn, self.pid, base)
        self.topology.payload[out.pfn] = payload if payload is not None else (self.pid, base)
        return MapOutcome(out.pfn, out.node, new_pages, latency, slow)

    def unmap(self, va: int) -> int:
        pages = self.path(va)
        idx = decompose(va)
        slot = idx[self.leaf_level - 1]
        if len(pages) != self.leaf_level or slot not in pages[-1].entries:
            raise NotMapped(f"va {va:#x} is not mapped")
        leaf = pages[-1]
        pfn = leaf.entries.pop(slot)
        if self.mode is PageSizeMode.BASE_4K and self.topology.tier_of(pfn) is Tier.DRAM:
            leaf.dram_child_count -= 1
        self.rmap.remove(pfn)
        free_page(self.topology, pfn)
        return pfn

    def walk(self, va: int, start: tuple[PageKind, int] | None = None) -> WalkResult:
        """Software walk from the root, or from ``start`` = (level, frame) when a
        walk cache already supplied the upper levels."""
        idx = decompose(va)
        if start is None:
            level, pfn = PageKind.L1, self.root.pfn
        else:
            level, pfn = start
        touched = []
        frames = []
        leaf = self.leaf_level
        pages = self.pages
        while True:
            page = pages.get(pfn)
            if page is None:
                raise StaleFrameRead(f"walk read freed PT frame {pfn:#x}")
            touched.append((level, page.node))
            frames.append(pfn)
            child = page.entries.get(idx[level - 1])
            if child is None:
                raise NotMapped(f"va {va:#x} is not mapped")
            if level == leaf:
                offset = va % self.data_page_size
                return WalkResult((child, offset), touched, frames)
            level = PageKind(level + 1)
            pfn = child

    def translate(self, va: int) -> int | None:
        try:
            return self.walk(va).pa[0]
        except NotMapped:
            return None

    def leaf_for(self, va: int) -> tuple[PtPage, PtPage | None]:
        """(leaf PT page holding the entry for ``va``, its parent)."""
        pages = self.path(va)
        if len(pages) != self.leaf_level:
            raise NotMapped(f"va {va:#x} is not mapped")
        return pages[-1], pages[-2] if len(pages) > 1 else None

    def get_pt_entries(self, data_pfn: int) -> tuple[PtPage, PtPage]:
        """(L4, L3) pages that map ``data_pfn``."""
        pid, va = self.rmap.lookup(data_pfn)
        if pid != self.pid or self.mode is not PageSizeMode.BASE_4K:
            raise UnknownFrame(f"frame {data_pfn:#x} is not a 4 KiB page of process {self.pid}")
        pages = self.path(va)
        l4, l3 = pages[3], pages[2]
        if l4.entries.get(decompose(va)[3]) != data_pfn:
            raise UnknownFrame(f"frame {data_pfn:#x} not found under its reverse mapping")
        return l4, l3

    def iter_pages(self):
        return self.pages.values()

    def teardown(self) -> int:
        """Free every data and PT frame; returns the number of frames released."""
        freed = 0
        for page in list(self.pages.values()):
            if page.level == self.leaf_level:
                for pfn in page.entries.values():
                    self.rmap.remove(pfn)
                    free_page(self.topology, pfn)
                    freed += 1
            page.entries.clear()
            free_page(self.topology, page.pfn)
            freed += 1
        self.pages.clear()
        self.alive = False
        return freed

    # -- checks ---------------------------------------------------------

    def check_invariants(self) -> None:
        """Tree well-formedness and counter consistency; raises AssertionError."""
        seen = set()
        leaf = self.leaf_level
        reachable = 0

        def visit(page: PtPage, depth: int):
            nonlocal reachable
            reachable += 1
            assert page.level == depth, f"{page} found at depth {depth}"
            assert self.topology.is_allocated(page.pfn)
            assert page.node == page.pfn >> NODE_SHIFT
            for child in page.entries.values():
                assert child not in seen, f"frame {child:#x} appears twice"
                seen.add(child)
                if depth == leaf:
                    assert self.topology.is_allocated(child)
                    assert self.rmap.get(child) is not None and self.rmap.get(child)[0] == self.pid
                else:
                    visit(self.pages[child], depth + 1)
            if depth == PageKind.L4:
                dram = sum(1 for c in page.entries.values() if self.topology.tier_of(c) is Tier.DRAM)
                assert dram == page.dram_child_count, f"{page}: dram_child_count {page.dram_child_count} != {dram}"

        visit(self.root, 1)
        assert reachable == len(self.pages), "unreachable PT pages"


def pt_distribution(pt: PageTable) -> dict[tuple[PageKind, int], dict[str, int]]:
    counts = Counter((p.level, p.node) for p in pt.iter_pages())
    return {key: {"pages": n, "bytes": n * PAGE_SIZE} for key, n in sorted(counts.items())}


def pt_size_estimate(footprint_bytes: int, mode: PageSizeMode = PageSizeMode.BASE_4K) -> dict[PageKind, dict[str, int]]:
    """Page-table pages and bytes per level for a contiguous, fully populated footprint."""
    data_pages = math.ceil(footprint_bytes / PAGE_SIZE)
    l4 = math.ceil(data_pages / ENTRIES)
    l3 = math.ceil(l4 / ENTRIES)
    if mode is PageSizeMode.THP_2M:
        # 2 MiB leaves live in L3 entries; same L3 count, no L4 pages
        l4 = 0
    l2 = math.ceil(l3 / ENTRIES)
    counts = {PageKind.L1: 1, PageKind.L2: l2, PageKind.L3: l3, PageKind.L4: l4}
    return {lvl: {"pages": n, "bytes": n * PAGE_SIZE} for lvl, n in counts.items()}
