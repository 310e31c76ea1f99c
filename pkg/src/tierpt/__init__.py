"""Address-translation simulator for tiered DRAM + NVMM NUMA machines."""

from .config import RunConfig, SimConfig, load_config
from .engine import Engine, Report, run
from .migration import L4Outcome, MigrationStats, Migrator
from .mmu import Mmu, MmuConfig, mpki
from .pagetable import PageSizeMode, PageTable, ReverseMap, decompose, pt_distribution, pt_size_estimate
from .topology import DataPolicy, PageKind, PtPolicy, Tier, Topology, TopologyConfig, build_topology
from .workloads import AccessPhase, ScenarioConfig, ScenarioKind, WorkloadSpec, generate, run_scenario

__all__ = [
    "AccessPhase", "DataPolicy", "Engine", "L4Outcome", "MigrationStats", "Migrator", "Mmu",
    "MmuConfig", "PageKind", "PageSizeMode", "PageTable", "PtPolicy", "Report", "ReverseMap",
    "RunConfig", "ScenarioConfig", "ScenarioKind", "SimConfig", "Tier", "Topology", "TopologyConfig",
    "WorkloadSpec", "build_topology", "decompose", "generate", "load_config", "mpki",
    "pt_distribution", "pt_size_estimate", "run", "run_scenario",
]
