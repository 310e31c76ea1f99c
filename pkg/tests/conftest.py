import sys

import pytest

from tierpt.config import SimConfig
from tierpt.migration import Migrator
from tierpt.pagetable import PageTable, ReverseMap
from tierpt.topology import NodeConfig, Tier, TopologyConfig, build_topology


def four_nodes(dram_mib=8, nvmm_mib=32, **kw) -> TopologyConfig:
    nodes = [
        NodeConfig(0, Tier.DRAM, dram_mib, cpus=1),
        NodeConfig(1, Tier.DRAM, dram_mib, cpus=1),
        NodeConfig(2, Tier.NVMM, nvmm_mib),
        NodeConfig(3, Tier.NVMM, nvmm_mib),
    ]
    return TopologyConfig(nodes=nodes, **kw)


def small_sim(dram_mib=8, nvmm_mib=32, **topo_kw) -> SimConfig:
    cfg = SimConfig()
    cfg.topology = four_nodes(dram_mib, nvmm_mib, **topo_kw)
    return cfg


@pytest.fixture
def topo():
    return build_topology(four_nodes())


@pytest.fixture
def world(topo):
    """Topology, reverse map, table registry and a synchronous migrator."""
    rmap = ReverseMap()
    tables = {}
    mig = Migrator(topo, rmap, tables)

    def table(pid=1, **kw):
        pt = PageTable(pid, topo, rmap, **kw)
        tables[pid] = pt
        return pt

    return topo, rmap, tables, mig, table


def exhaust(topo, node_id, leave=None):
    """Allocate data frames on ``node_id`` until it sits at its min watermark (or ``leave`` free)."""
    from tierpt.topology import PageKind, alloc_page

    node = topo.node(node_id)
    stop = node.min_watermark if leave is None else leave
    pfns = []
    while node.free_pages > stop:
        pfns.append(alloc_page(topo, [node_id], PageKind.DATA).pfn)
    return pfns


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s[6:9]):
            terminalreporter.write_line(line)
