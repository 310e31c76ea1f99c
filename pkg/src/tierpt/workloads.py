"""Synthetic access streams, the evaluation scenarios, and a text trace format."""

from __future__ import annotations

import copy
import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, TraceIoError
from .topology import MIB, PAGE_SIZE, DataPolicy, PtPolicy

BASE_VA = 0x7F00_0000_0000
_BATCH = 1 << 16


@dataclass
class AccessPhase:
    distribution: str = "zipfian"
    theta: float = 0.99
    read_ratio: float = 1.0
    op_count: int = 100_000
    compute_gap: int = 0
    # spread hot ranks over the footprint instead of packing them at its start
    scramble: bool = True


@dataclass
class WorkloadSpec:
    footprint_bytes: int = 512 * MIB
    populate: bool = True
    # one touch per stride; 2 MiB touches every leaf table exactly once
    populate_stride: int = PAGE_SIZE
    access: AccessPhase | None = field(default_factory=AccessPhase)
    base_va: int = BASE_VA
    address_space_bytes: int = 1 << 46

    def validate(self) -> None:
        if self.footprint_bytes <= 0:
            raise ConfigError("footprint_bytes must be positive")
        if self.footprint_bytes > self.address_space_bytes:
            raise ConfigError("footprint exceeds the address-space budget")
        if self.base_va + self.footprint_bytes > 1 << 48:
            raise ConfigError("footprint runs past the 48-bit address space")
        if self.populate_stride <= 0 or self.populate_stride % PAGE_SIZE:
            raise ConfigError("populate_stride must be a positive multiple of 4096")
        a = self.access
        if a is not None:
            if a.distribution not in ("zipfian", "uniform"):
                raise ConfigError(f"unknown distribution {a.distribution!r}")
            if a.distribution == "zipfian" and not 0 < a.theta < 1:
                raise ConfigError("zipfian theta must lie in (0, 1)")
            if not 0 <= a.read_ratio <= 1:
                raise ConfigError("read_ratio must lie in [0, 1]")
            if a.op_count < 0 or a.compute_gap < 0:
                raise ConfigError("op_count and compute_gap must be non-negative")

    @property
    def items(self) -> int:
        return -(-self.footprint_bytes // self.populate_stride)


class ScenarioKind(enum.Enum):
    FULL_SYSTEM = "full_system"
    MULTI_TENANT = "multi_tenant"
    INTERLEAVED = "interleaved"
    STARTUP = "startup"
    THP = "thp"
    TRACE = "trace"


@dataclass
class ScenarioConfig:
    kind: ScenarioKind = ScenarioKind.FULL_SYSTEM
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    threads: int = 1
    filler_bytes: int = 512 * MIB
    # filler accesses after the benchmark is populated; None means 25% of op_count
    filler_dwell: int | None = None
    trace_path: str | None = None


# -- samplers ----------------------------------------------------------------


class ZipfSampler:
    """Exact Zipf(theta) over ranks 0..n-1 by inverse CDF (no rejection loop)."""

    def __init__(self, n: int, theta: float, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        weights = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), theta)
        self.pmf = weights / weights.sum()
        self.cdf = np.cumsum(self.pmf)
        self.cdf[-1] = 1.0

    def draw(self, size: int) -> np.ndarray:
        u = self.rng.random(size)
        return np.searchsorted(self.cdf, u, side="right")


def populate_stream(spec: WorkloadSpec):
    """Ascending first-touch writes, one per stride; independent of any seed."""
    base = spec.base_va
    for off in range(0, spec.footprint_bytes, spec.populate_stride):
        yield True, base + off


def access_stream(spec: WorkloadSpec, seed: int, op_count: int | None = None):
    a = spec.access
    if a is None:
        return
    n = spec.items
    total = a.op_count if op_count is None else op_count
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n) if a.scramble else None
    sampler = ZipfSampler(n, a.theta, rng) if a.distribution == "zipfian" else None
    base, stride = spec.base_va, spec.populate_stride
    left = total
    while left > 0:
        size = min(_BATCH, left)
        left -= size
        ranks = sampler.draw(size) if sampler is not None else rng.integers(0, n, size)
        items = perm[ranks] if perm is not None else ranks
        writes = rng.random(size) >= a.read_ratio
        for item, w in zip(items.tolist(), writes.tolist()):
            yield w, base + item * stride


def generate(spec: WorkloadSpec, seed: int = 0):
    """Lazy (write, va) stream: populate pass, then the access phase."""
    spec.validate()
    parts = []
    if spec.populate:
        parts.append(populate_stream(spec))
    parts.append(access_stream(spec, seed))
    return itertools.chain.from_iterable(parts)


# -- trace files -------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    op: str
    va: int
    cpu: int

    @property
    def write(self) -> bool:
        return self.op == "W"


def write_trace(path, records) -> int:
    try:
        with open(path, "w") as fh:
            n = 0
            for r in records:
                fh.write(f"{r.op} {r.va:#x} {r.cpu}\n")
                n += 1
    except OSError as exc:
        raise TraceIoError(str(exc)) from exc
    return n


def read_trace(path):
    try:
        fh = open(path)
    except OSError as exc:
        raise TraceIoError(str(exc)) from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("R", "W"):
                raise ParseError(lineno, f"expected 'R|W <hex va> <cpu>', got {line.strip()!r}")
            try:
                va = int(parts[1], 16)
                cpu = int(parts[2])
            except ValueError:
                raise ParseError(lineno, f"bad number in {line.strip()!r}") from None
            if va < 0 or cpu < 0:
                raise ParseError(lineno, "negative value")
            yield TraceRecord(parts[0], va, cpu)


def trace_io(path, stream=None):
    """Write ``stream`` to ``path`` when given, otherwise read ``path`` back."""
    if stream is not None:
        return write_trace(path, stream)
    return list(read_trace(path))


# -- scenarios ---------------------------------------------------------------


def _scenario_config(scenario: ScenarioConfig, config):
    cfg = copy.deepcopy(config)
    pol = cfg.policy
    kind = scenario.kind
    if kind is ScenarioKind.INTERLEAVED:
        pol.data_policy = DataPolicy.INTERLEAVE
        pol.autonuma.enabled = False
    elif kind is ScenarioKind.STARTUP:
        pol.autonuma.enabled = False
    elif kind is ScenarioKind.THP:
        pol.thp = True
    return cfg


def run_scenario(scenario: ScenarioConfig, config, seed: int = 0):
    """Run one scenario to quiescence and return its Report."""
    return build_scenario(scenario, config, seed).run()


def build_scenario(scenario: ScenarioConfig, config, seed: int = 0):
    """An Engine with the scenario's processes and agents spawned but not yet run."""
    from .engine import Engine, SimEvent
    from .migration import Wait

    cfg = _scenario_config(scenario, config)
    engine = Engine(cfg, seed)
    spec = copy.deepcopy(scenario.workload)
    if scenario.kind is ScenarioKind.STARTUP:
        spec.access = None
        spec.populate = True
    if scenario.kind is not ScenarioKind.TRACE:
        spec.validate()
    ncpu = len(engine.cpus)
    gap = spec.access.compute_gap if spec.access else 0

    if scenario.kind is ScenarioKind.TRACE:
        if not scenario.trace_path:
            raise ConfigError("trace scenario needs trace_path")
        per_cpu: dict[int, list] = {}
        for r in read_trace(scenario.trace_path):
            per_cpu.setdefault(r.cpu % ncpu, []).append((r.write, r.va))
        proc = engine.create_process("trace", min(per_cpu, default=0))
        if proc is not None:
            for cpu, recs in sorted(per_cpu.items()):
                engine.spawn(f"trace-cpu{cpu}", engine.access_stream(proc, cpu, recs, 0))
        return engine

    if scenario.kind is ScenarioKind.MULTI_TENANT:
        _multi_tenant(engine, scenario, spec, seed, gap, SimEvent, Wait)
        return engine

    threads = max(1, scenario.threads)
    ready = SimEvent("populated")
    proc = engine.create_process("bench", 0)
    if proc is None:
        return engine

    def lead():
        ok = True
        if spec.populate:
            ok = yield from engine.access_stream(proc, 0, populate_stream(spec))
        engine.snapshot("initial", proc)
        engine.set_event(ready)
        if ok and spec.access is not None:
            share = spec.access.op_count // threads + (spec.access.op_count % threads)
            yield from engine.access_stream(proc, 0, access_stream(spec, seed, share), gap)

    def follower(t):
        yield Wait(ready)
        share = spec.access.op_count // threads
        yield from engine.access_stream(proc, t % ncpu, access_stream(spec, seed + t, share), gap)

    engine.spawn("bench-t0", lead())
    if spec.access is not None:
        for t in range(1, threads):
            engine.spawn(f"bench-t{t}", follower(t))
    return engine


def _multi_tenant(engine, scenario, spec, seed, gap, SimEvent, Wait):
    """Filler occupies DRAM, the benchmark lands on NVMM, then the filler exits."""
    filler_ready = SimEvent("filler-populated")
    bench_ready = SimEvent("bench-populated")
    ncpu = len(engine.cpus)
    bench_cpu = ncpu - 1
    ops = spec.access.op_count if spec.access else 0
    dwell = scenario.filler_dwell if scenario.filler_dwell is not None else ops // 4
    filler_spec = WorkloadSpec(
        footprint_bytes=scenario.filler_bytes,
        access=AccessPhase(distribution="uniform", op_count=dwell, compute_gap=gap),
    )

    def filler():
        proc = engine.create_process("filler", 0, DataPolicy.FIRST_TOUCH, PtPolicy.FOLLOW_DATA)
        ok = proc is not None
        if ok:
            ok = yield from engine.access_stream(proc, 0, populate_stream(filler_spec))
        engine.set_event(filler_ready)
        if not ok:
            return
        yield Wait(bench_ready)
        ok = yield from engine.access_stream(proc, 0, access_stream(filler_spec, seed + 7919), gap)
        if ok:
            yield from engine.exit_process(proc)

    def bench():
        yield Wait(filler_ready)
        proc = engine.create_process("bench", bench_cpu)
        if proc is None:
            engine.set_event(bench_ready)
            return
        ok = True
        if spec.populate:
            ok = yield from engine.access_stream(proc, bench_cpu, populate_stream(spec))
        engine.snapshot("initial", proc)
        engine.set_event(bench_ready)
        if ok and spec.access is not None:
            yield from engine.access_stream(proc, bench_cpu, access_stream(spec, seed), gap)

    engine.spawn("filler", filler())
    engine.spawn("bench", bench())


def scenario_from(kind, workload: WorkloadSpec | None = None, **kw) -> ScenarioConfig:
    return ScenarioConfig(kind=ScenarioKind(kind), workload=workload or WorkloadSpec(), **kw)
