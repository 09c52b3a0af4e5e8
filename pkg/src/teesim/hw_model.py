"""Physical machine model: cores, address map, per-core TLBs, shared L2.

The cache is owner-tagged rather than timed: each line remembers which
context filled it, which is all the direct-cache-attack oracle needs. The
TLB caches successful stage-2 translations per core with FIFO eviction.
"""

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

from . import stage2
from .errors import AlignmentError, ConfigError
from .units import BLOCK_2M, GB, KB, MB, PAGE_4K, align_down, is_aligned, overlaps

ROS_CTX = 0


class CoreClass(str, Enum):
    BIG = "big"
    LITTLE = "little"


class CoreState(str, Enum):
    RUNNING_ROS = "running_ros"
    RUNNING_SANDBOX = "running_sandbox"
    BUSY_WAIT = "busy_wait"
    OFF = "off"


class DevKind(str, Enum):
    GPU = "gpu"
    WIFI = "wifi"
    BLUETOOTH = "bluetooth"
    OTHER = "other"


@dataclass(frozen=True)
class PeripheralDesc:
    dev_id: str
    kind: DevKind
    mmio_range: Tuple[int, int]
    dma_capable: bool = False
    independent: bool = True
    always_busy_in_ros: bool = False


@dataclass(frozen=True)
class MachineConfig:
    ram_bytes: int
    io_window: Tuple[int, int]
    cores: Tuple[Tuple[int, CoreClass], ...]
    peripherals: Tuple[PeripheralDesc, ...] = ()
    cache_line_bytes: int = 64
    tlb_capacity: int = 512
    cache_capacity_lines: Optional[int] = None

    def validate(self) -> None:
        if len(self.cores) < 2:
            raise ConfigError("at least 2 cores required (ROS keeps one)")
        ids = [cid for cid, _ in self.cores]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError("core ids must be unique and dense from 0")
        io_start, io_end = self.io_window
        if io_start >= io_end:
            raise ConfigError("empty io_window")
        if io_start < self.ram_bytes:
            raise ConfigError("io_window overlaps RAM frames")
        for p in self.peripherals:
            lo, hi = p.mmio_range
            if not (is_aligned(lo, PAGE_4K) and is_aligned(hi, PAGE_4K) and lo < hi):
                raise ConfigError(f"{p.dev_id}: MMIO range must be 4KB-aligned")
            if lo < io_start or hi > io_end:
                raise ConfigError(f"{p.dev_id}: MMIO range outside io_window")
        for i, a in enumerate(self.peripherals):
            for b in self.peripherals[i + 1 :]:
                if overlaps(a.mmio_range, b.mmio_range):
                    raise ConfigError(f"{a.dev_id}/{b.dev_id}: MMIO ranges overlap")
        if self.cache_line_bytes <= 0 or self.tlb_capacity <= 0:
            raise ConfigError("cache_line_bytes and tlb_capacity must be positive")

    def peripheral(self, dev_id: str) -> PeripheralDesc:
        for p in self.peripherals:
            if p.dev_id == dev_id:
                return p
        raise ConfigError(f"unknown peripheral {dev_id!r}")


def default_config() -> MachineConfig:
    """The 8-core big.LITTLE platform: 4GB address space, RAM below 3.5GB,
    peripheral IO window above it."""
    io_base = 3584 * MB
    return MachineConfig(
        ram_bytes=3584 * MB,
        io_window=(io_base, 4 * GB),
        cores=tuple(
            (i, CoreClass.LITTLE if i < 4 else CoreClass.BIG) for i in range(8)
        ),
        peripherals=(
            PeripheralDesc(
                "gpu", DevKind.GPU, (io_base, io_base + 64 * KB),
                dma_capable=True, independent=True, always_busy_in_ros=True,
            ),
            PeripheralDesc(
                "wifi", DevKind.WIFI, (io_base + 64 * KB, io_base + 128 * KB),
                dma_capable=True,
            ),
            PeripheralDesc(
                "bluetooth", DevKind.BLUETOOTH,
                (io_base + 128 * KB, io_base + 192 * KB),
            ),
            # Shares a bus driver, so it can never be switched out of ROS.
            PeripheralDesc(
                "usb", DevKind.OTHER, (io_base + 192 * KB, io_base + 256 * KB),
                independent=False,
            ),
        ),
    )


def small_config() -> MachineConfig:
    """Desk-scale config for exhaustive exploration: 3 cores, 16 RAM frames
    of 2MB, one switchable peripheral."""
    ram = 16 * BLOCK_2M
    return MachineConfig(
        ram_bytes=ram,
        io_window=(ram, ram + MB),
        cores=((0, CoreClass.LITTLE), (1, CoreClass.BIG), (2, CoreClass.BIG)),
        peripherals=(
            PeripheralDesc("wifi", DevKind.WIFI, (ram, ram + 16 * KB),
                           dma_capable=True),
        ),
    )


@dataclass
class Core:
    core_id: int
    core_class: CoreClass
    state: CoreState = CoreState.RUNNING_ROS
    active_ctx: Optional[int] = ROS_CTX


class Machine:
    """Single-owner mutable machine state; operations never interleave."""

    def __init__(self, config: MachineConfig):
        config.validate()
        self.config = config
        self.cores: Dict[int, Core] = {
            cid: Core(cid, cls) for cid, cls in config.cores
        }
        self.table_sets: Dict[int, stage2.Stage2TableSet] = {}
        # Per-core FIFO TLB: (ctx, block_base, gran) -> attr, insertion-ordered.
        self.tlbs: Dict[int, OrderedDict] = {cid: OrderedDict() for cid in self.cores}
        # Shared physically indexed L2: line base -> filling context.
        self.cache: "OrderedDict[int, int]" = OrderedDict()
        ros = stage2.Stage2TableSet(ROS_CTX)
        ros.map_range((0, config.ram_bytes), stage2.Attr.NORMAL)
        ros.map_range(config.io_window, stage2.Attr.DEVICE)
        self.table_sets[ROS_CTX] = ros

    # -- address classification ------------------------------------------

    def classify(self, pa: int) -> str:
        if 0 <= pa < self.config.ram_bytes:
            return "ram"
        io_start, io_end = self.config.io_window
        if io_start <= pa < io_end:
            return "mmio"
        return "hole"

    # -- cache model ------------------------------------------------------

    def cache_fill(self, context_id: int, pa: int) -> None:
        line = align_down(pa, self.config.cache_line_bytes)
        if line in self.cache:
            del self.cache[line]
        self.cache[line] = context_id
        cap = self.config.cache_capacity_lines
        if cap is not None:
            while len(self.cache) > cap:
                self.cache.popitem(last=False)

    def cache_lookup(self, pa: int) -> Optional[int]:
        return self.cache.get(align_down(pa, self.config.cache_line_bytes))

    def cache_invalidate_range(self, rng: Tuple[int, int], keep_owner=None) -> int:
        start, end = rng
        victims = [
            line
            for line, owner in self.cache.items()
            if start <= line < end and owner != keep_owner
        ]
        for line in victims:
            del self.cache[line]
        return len(victims)

    def cache_invalidate_owner(self, context_id: int) -> int:
        victims = [l for l, owner in self.cache.items() if owner == context_id]
        for line in victims:
            del self.cache[line]
        return len(victims)

    # -- TLB model --------------------------------------------------------

    def tlb_insert(self, core_id: int, ctx: int, ipa: int, attr) -> None:
        gran = stage2.granularity_of(attr)
        tlb = self.tlbs[core_id]
        key = (ctx, align_down(ipa, gran), gran)
        if key in tlb:
            del tlb[key]
        tlb[key] = attr
        while len(tlb) > self.config.tlb_capacity:
            tlb.popitem(last=False)

    def tlb_lookup(self, core_id: int, ctx: int, ipa: int):
        tlb = self.tlbs[core_id]
        for gran in (BLOCK_2M, PAGE_4K):
            key = (ctx, align_down(ipa, gran), gran)
            if key in tlb:
                return stage2.TranslationResult(True, ipa, tlb[key])
        return None

    def tlb_flush_range(self, pa_range: Tuple[int, int]) -> int:
        start, end = pa_range
        if not (is_aligned(start, BLOCK_2M) and is_aligned(end, BLOCK_2M)):
            raise AlignmentError(
                f"flush range [{start:#x}, {end:#x}) not 2MB-aligned"
            )
        return self._tlb_flush_any((start, end))

    def _tlb_flush_any(self, pa_range: Tuple[int, int]) -> int:
        """Flush entries whose mapped block intersects pa_range (any
        alignment; used internally for 4KB device pages)."""
        start, end = pa_range
        removed = 0
        for tlb in self.tlbs.values():
            victims = [
                key for key in tlb if key[1] < end and key[1] + key[2] > start
            ]
            for key in victims:
                del tlb[key]
            removed += len(victims)
        return removed

    def tlb_flush_core(self, core_id: int) -> int:
        n = len(self.tlbs[core_id])
        self.tlbs[core_id].clear()
        return n

    # -- context plumbing -------------------------------------------------

    def create_table_set(self, ctx: int) -> stage2.Stage2TableSet:
        assert ctx not in self.table_sets
        ts = stage2.Stage2TableSet(ctx)
        self.table_sets[ctx] = ts
        return ts

    def destroy_table_set(self, ctx: int) -> None:
        del self.table_sets[ctx]
        for tlb in self.tlbs.values():
            for key in [k for k in tlb if k[0] == ctx]:
                del tlb[key]

    def translate(self, core_id: int, ipa: int) -> stage2.TranslationResult:
        return stage2.s2_translate(self, core_id, ipa)

    # -- exploration support ----------------------------------------------

    def clone(self) -> "Machine":
        other = Machine.__new__(Machine)
        other.config = self.config
        other.cores = {
            cid: Core(c.core_id, c.core_class, c.state, c.active_ctx)
            for cid, c in self.cores.items()
        }
        other.table_sets = {ctx: ts.clone() for ctx, ts in self.table_sets.items()}
        other.tlbs = {cid: OrderedDict(tlb) for cid, tlb in self.tlbs.items()}
        other.cache = OrderedDict(self.cache)
        return other

    def canonical(self) -> tuple:
        return (
            tuple(
                (c.core_id, c.core_class.value, c.state.value, c.active_ctx)
                for c in self.cores.values()
            ),
            tuple(ts.canonical() for _, ts in sorted(self.table_sets.items())),
            tuple(
                (cid, tuple(sorted(tlb))) for cid, tlb in sorted(self.tlbs.items())
            ),
            tuple(sorted(self.cache.items())),
        )


def build_machine(config: MachineConfig) -> Machine:
    return Machine(config)


def tlb_flush_range(machine: Machine, pa_range: Tuple[int, int]) -> int:
    return machine.tlb_flush_range(pa_range)


def cache_fill(machine: Machine, context_id: int, pa: int) -> None:
    machine.cache_fill(context_id, pa)
