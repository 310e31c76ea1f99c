"""NUMA nodes across a DRAM and an NVMM tier, frame allocation and placement policy.

Frames are abstract numbers with the owning node id in the high bits, so
``node_of`` never needs a lookup table beyond the allocated set.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import ConfigError, DoubleFree, OutOfMemory, UnknownFrame

PAGE_SIZE = 4096
HUGE_PAGES = 512
NODE_SHIFT = 40
_INDEX_MASK = (1 << NODE_SHIFT) - 1
MIB = 1 << 20


class Tier(enum.Enum):
    DRAM = "dram"
    NVMM = "nvmm"


class DataPolicy(enum.Enum):
    FIRST_TOUCH = "first_touch"
    INTERLEAVE = "interleave"


class PtPolicy(enum.Enum):
    FOLLOW_DATA = "follow_data"
    BIND_ALL = "bind_all"
    BIND_HIGH = "bind_high"


class PageKind(enum.IntEnum):
    """Either a data page or the page-table level a frame will hold."""

    DATA = 0
    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4

    @property
    def is_pt(self) -> bool:
        return self is not PageKind.DATA


class AllocPath(enum.Enum):
    FAST = "fast"
    SLOW = "slow"


@dataclass
class NumaNode:
    id: int
    tier: Tier
    capacity_pages: int
    free_pages: int
    read_latency: int
    write_latency: int
    low_watermark: int
    min_watermark: int
    local_cpu_count: int = 0

    def __post_init__(self):
        if self.capacity_pages <= 0:
            raise ConfigError(f"node {self.id}: capacity must be positive")
        if not 0 <= self.free_pages <= self.capacity_pages:
            raise ConfigError(f"node {self.id}: free pages out of range")
        if not self.min_watermark < self.low_watermark < self.capacity_pages:
            raise ConfigError(f"node {self.id}: need min_watermark < low_watermark < capacity")
        if self.tier is Tier.NVMM and self.local_cpu_count:
            raise ConfigError(f"node {self.id}: NVMM nodes have no CPUs")

    @property
    def allocated_pages(self) -> int:
        return self.capacity_pages - self.free_pages


@dataclass
class NodeConfig:
    id: int
    tier: Tier
    capacity_mib: float
    read_latency: int | None = None
    write_latency: int | None = None
    cpus: int = 0


def default_nodes(dram_mib: float = 256, nvmm_mib: float = 1024, sockets: int = 2, cpus: int = 1) -> list[NodeConfig]:
    """Two DRAM nodes followed by two CPU-less NVMM nodes, one of each per socket."""
    dram = [NodeConfig(i, Tier.DRAM, dram_mib, cpus=cpus) for i in range(sockets)]
    nvmm = [NodeConfig(sockets + i, Tier.NVMM, nvmm_mib) for i in range(sockets)]
    return dram + nvmm


@dataclass
class TopologyConfig:
    nodes: list[NodeConfig] = field(default_factory=default_nodes)
    dram_read: int = 100
    nvmm_read: int = 300
    dram_write: int | None = None
    nvmm_write: int | None = None
    low_watermark_pct: float = 2.0
    min_watermark_pct: float = 0.5
    fast_path_latency: int = 500
    slow_path_latency: int = 50_000
    distance: list[list[int]] | None = None


@dataclass
class AllocOutcome:
    pfn: int
    node: int
    path: AllocPath
    latency: int


def make_pfn(node: int, index: int) -> int:
    return (node << NODE_SHIFT) | index


def pfn_node(pfn: int) -> int:
    return pfn >> NODE_SHIFT


class Topology:
    def __init__(self, nodes: list[NumaNode], distance: list[list[int]],
                 fast_path_latency: int = 500, slow_path_latency: int = 50_000):
        self.nodes = nodes
        self.by_id = {n.id: n for n in nodes}
        self.distance = distance
        self.interleave_cursor = 0
        self.fast_path_latency = fast_path_latency
        self.slow_path_latency = slow_path_latency
        self._pos = {n.id: i for i, n in enumerate(nodes)}
        self._next_index = {n.id: 0 for n in nodes}
        self._recycled: dict[int, list[int]] = {n.id: [] for n in nodes}
        # pfn -> number of 4 KiB pages backing it (1, or 512 for a huge frame)
        self.allocated: dict[int, int] = {}
        # frame payloads; only data frames carry one and copies move it
        self.payload: dict[int, object] = {}

    def node(self, node_id: int) -> NumaNode:
        return self.by_id[node_id]

    def tier_of_node(self, node_id: int) -> Tier:
        return self.by_id[node_id].tier

    def tier_of(self, pfn: int) -> Tier:
        return self.by_id[pfn >> NODE_SHIFT].tier

    def dist(self, a: int, b: int) -> int:
        return self.distance[self._pos[a]][self._pos[b]]

    def dram_nodes(self) -> list[int]:
        return [n.id for n in self.nodes if n.tier is Tier.DRAM]

    def nvmm_nodes(self) -> list[int]:
        return [n.id for n in self.nodes if n.tier is Tier.NVMM]

    def is_allocated(self, pfn: int) -> bool:
        return pfn in self.allocated

    def fallback_order(self, local_node: int) -> list[int]:
        """Local node, then same-tier peers by distance, then the other tier by distance."""
        local_tier = self.by_id[local_node].tier
        peers = [n.id for n in self.nodes if n.id != local_node]
        peers.sort(key=lambda nid: (self.by_id[nid].tier is not local_tier, self.dist(local_node, nid), nid))
        return [local_node] + peers

    def check_conservation(self) -> None:
        used = {n.id: 0 for n in self.nodes}
        for pfn, size in self.allocated.items():
            used[pfn >> NODE_SHIFT] += size
        for n in self.nodes:
            assert used[n.id] + n.free_pages == n.capacity_pages, f"node {n.id} leaks pages"


def _default_distance(nodes: list[NumaNode]) -> list[list[int]]:
    # socket k holds the k-th node of each tier
    rank = {}
    for tier in Tier:
        for k, n in enumerate(x for x in nodes if x.tier is tier):
            rank[n.id] = k
    return [[0 if a is b else (1 if rank[a.id] == rank[b.id] else 2) for b in nodes] for a in nodes]


def build_topology(config: TopologyConfig) -> Topology:
    if not config.nodes:
        raise ConfigError("topology needs at least one node")
    ids = [n.id for n in config.nodes]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate node ids in {ids}")
    nodes = []
    for nc in config.nodes:
        tier = Tier(nc.tier)
        capacity = int(nc.capacity_mib * MIB) // PAGE_SIZE
        if capacity <= 0:
            raise ConfigError(f"node {nc.id}: capacity must be positive")
        if tier is Tier.DRAM:
            read = nc.read_latency if nc.read_latency is not None else config.dram_read
            write = nc.write_latency if nc.write_latency is not None else (config.dram_write or read)
        else:
            read = nc.read_latency if nc.read_latency is not None else config.nvmm_read
            write = nc.write_latency if nc.write_latency is not None else (config.nvmm_write or read)
        low = max(2, round(capacity * config.low_watermark_pct / 100))
        low_min = max(1, round(capacity * config.min_watermark_pct / 100))
        low_min = min(low_min, low - 1)
        nodes.append(NumaNode(nc.id, tier, capacity, capacity, read, write, low, low_min, nc.cpus))
    if config.distance is not None:
        distance = [list(row) for row in config.distance]
        n = len(nodes)
        if len(distance) != n or any(len(r) != n for r in distance):
            raise ConfigError("distance matrix shape does not match node count")
        for i in range(n):
            if distance[i][i] != 0:
                raise ConfigError("distance matrix needs a zero diagonal")
            for j in range(n):
                if distance[i][j] != distance[j][i]:
                    raise ConfigError("distance matrix must be symmetric")
    else:
        distance = _default_distance(nodes)
    return Topology(nodes, distance, config.fast_path_latency, config.slow_path_latency)


def select_node(topology: Topology, kind: PageKind, data_policy: DataPolicy,
                pt_policy: PtPolicy, local_node: int) -> list[int]:
    """Ordered candidate nodes for one allocation of ``kind``."""
    if local_node not in topology.by_id:
        raise UnknownFrame(f"no node {local_node}")
    bound = kind.is_pt and (
        pt_policy is PtPolicy.BIND_ALL
        or (pt_policy is PtPolicy.BIND_HIGH and kind is not PageKind.L4)
    )
    if bound:
        # a bound level ignores the interleave rotation and prefers the local DRAM node
        return [n for n in topology.fallback_order(local_node) if topology.tier_of_node(n) is Tier.DRAM]
    if data_policy is DataPolicy.INTERLEAVE:
        ids = [n.id for n in topology.nodes]
        c = topology.interleave_cursor % len(ids)
        topology.interleave_cursor = (c + 1) % len(ids)
        return ids[c:] + ids[:c]
    return topology.fallback_order(local_node)


def _pick(topology: Topology, candidates: list[int], npages: int) -> int | None:
    nodes = topology.by_id
    for nid in candidates:
        node = nodes[nid]
        if node.free_pages - npages >= node.min_watermark:
            return nid
    return None


def alloc_page(topology: Topology, candidates: list[int], kind: PageKind, npages: int = 1) -> AllocOutcome:
    nid = _pick(topology, candidates, npages)
    if nid is None:
        raise OutOfMemory(kind, candidates)
    node = topology.by_id[nid]
    slow = node.free_pages < node.low_watermark
    recycled = topology._recycled[nid]
    if recycled:
        index = recycled.pop()
    else:
        index = topology._next_index[nid]
        topology._next_index[nid] = index + 1
    pfn = make_pfn(nid, index)
    node.free_pages -= npages
    topology.allocated[pfn] = npages
    if slow:
        return AllocOutcome(pfn, nid, AllocPath.SLOW, topology.slow_path_latency)
    return AllocOutcome(pfn, nid, AllocPath.FAST, topology.fast_path_latency)


def free_page(topology: Topology, pfn: int) -> None:
    npages = topology.allocated.pop(pfn, None)
    if npages is None:
        raise DoubleFree(f"frame {pfn:#x} is not allocated")
    nid = pfn >> NODE_SHIFT
    topology.by_id[nid].free_pages += npages
    topology._recycled[nid].append(pfn & _INDEX_MASK)
    topology.payload.pop(pfn, None)


def node_of(topology: Topology, pfn: int) -> int:
    if pfn not in topology.allocated:
        raise UnknownFrame(f"frame {pfn:#x} is not allocated")
    return pfn >> NODE_SHIFT
