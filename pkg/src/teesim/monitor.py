"""Trusted enforcement actor (the firmware-monitor analogue).

Owns the resource ledger and is the only component allowed to edit stage-2
table sets: it verifies resource legality, boots and tears down sandboxes,
transfers cores, switches peripherals, and sanitizes TLB/cache state on
every ownership change. Defense mutation flags exist solely so tests can
prove each check is load-bearing.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

from . import stage2
from .errors import (
    AlignmentError,
    BadState,
    DeviceBusy,
    IntegrityError,
    LastCoreError,
    NotOwner,
    QuotaExceeded,
    ResourceBusy,
    TooManySandboxes,
    VerdictError,
)
from .hw_model import ROS_CTX, CoreState, Machine
from .secure_world import EncryptedImage, KeyStore, digest64
from .units import BLOCK_2M, MB, is_aligned, overlaps

TZASC_REGIONS = 8
TZASC_REGIONS_PER_SANDBOX = 2
TZASC_REGIONS_SECURE_WORLD = 1


class Reason(str, Enum):
    OVERLAP = "Overlap"
    NOT_CONTIGUOUS = "NotContiguous"
    QUOTA_EXCEEDED = "QuotaExceeded"
    NOT_FREE = "NotFree"
    BAD_ALIGNMENT = "BadAlignment"


@dataclass(frozen=True)
class AdjustVerdict:
    approved: bool
    reason: Optional[Reason] = None

    @staticmethod
    def ok() -> "AdjustVerdict":
        return AdjustVerdict(True)

    @staticmethod
    def rejected(reason: Reason) -> "AdjustVerdict":
        return AdjustVerdict(False, reason)


@dataclass
class Defenses:
    verify: bool = True
    sanitize: bool = True
    legality_check: bool = True
    smmu: bool = True

    @staticmethod
    def with_mutations(flags) -> "Defenses":
        d = Defenses()
        for flag in flags:
            attr = {"no_verify": "verify", "no_sanitize": "sanitize",
                    "no_legality_check": "legality_check", "no_smmu": "smmu"}.get(flag)
            if attr is None:
                raise ValueError(f"unknown mutation flag {flag!r}")
            setattr(d, attr, False)
        return d


@dataclass(frozen=True)
class LaunchSpec:
    app_id: str
    image: EncryptedImage
    core_id: int
    region: Tuple[int, int]
    channel: Tuple[int, int]
    max_cores: int = 1
    max_memory: int = 512 * MB


@dataclass
class SandboxMeta:
    sandbox_id: int
    app_id: str
    base_bytes: int
    channel: Tuple[int, int]
    boot_core: int
    max_cores: int
    max_memory: int
    booted_digest: int
    attested: bool


class ResourceLedger:
    """Who owns what: cores, RAM intervals, devices, shared channels."""

    def __init__(self, machine: Machine):
        self.core_owner: Dict[int, int] = {cid: ROS_CTX for cid in machine.cores}
        # ctx -> sorted interval list; ROS owns everything not listed.
        self.ram: Dict[int, List[Tuple[int, int]]] = {}
        self.dev_owner: Dict[str, int] = {
            p.dev_id: ROS_CTX for p in machine.config.peripherals
        }
        self.shared_channels: Dict[int, Tuple[int, int]] = {}

    def cores_of(self, ctx: int) -> List[int]:
        return sorted(c for c, o in self.core_owner.items() if o == ctx)

    def sandbox_intervals(self, sb: int) -> List[Tuple[int, int]]:
        return list(self.ram.get(sb, []))

    def sandbox_span(self, sb: int) -> Tuple[int, int]:
        ivs = self.ram[sb]
        return (ivs[0][0], ivs[-1][1])

    def sandbox_size(self, sb: int) -> int:
        return sum(e - s for s, e in self.ram.get(sb, []))

    def add_ram(self, sb: int, region: Tuple[int, int]) -> None:
        ivs = self.ram.setdefault(sb, [])
        ivs.append(region)
        ivs.sort()
        merged: List[Tuple[int, int]] = []
        for s, e in ivs:
            if merged and merged[-1][1] == s:
                merged[-1] = (merged[-1][0], e)
            else:
                merged.append((s, e))
        self.ram[sb] = merged

    def remove_ram(self, sb: int, region: Tuple[int, int]) -> None:
        out = []
        s0, e0 = region
        for s, e in self.ram[sb]:
            if e <= s0 or s >= e0:
                out.append((s, e))
                continue
            if s < s0:
                out.append((s, s0))
            if e0 < e:
                out.append((e0, e))
        if out:
            self.ram[sb] = out
        else:
            self.ram.pop(sb, None)

    def ram_overlap_owner(self, region: Tuple[int, int], ignore: Optional[int] = None):
        for sb, ivs in self.ram.items():
            if sb == ignore:
                continue
            for iv in ivs:
                if overlaps(iv, region):
                    return sb
        for sb, ch in self.shared_channels.items():
            if overlaps(ch, region):
                return sb
        return None

    def owns_range(self, ctx: int, region: Tuple[int, int]) -> bool:
        """True iff ctx may touch every byte of region under the ledger
        (its own intervals and its shared channel; for ROS, anything not
        owned by a sandbox)."""
        if ctx == ROS_CTX:
            return self.ram_overlap_owner(region) is None
        allowed = list(self.ram.get(ctx, []))
        if ctx in self.shared_channels:
            allowed.append(self.shared_channels[ctx])
        start, end = region
        allowed.sort()
        pos = start
        for s, e in allowed:
            if s <= pos < e:
                pos = min(end, e)
                if pos >= end:
                    return True
        return pos >= end

    def clone(self) -> "ResourceLedger":
        other = ResourceLedger.__new__(ResourceLedger)
        other.core_owner = dict(self.core_owner)
        other.ram = {sb: list(ivs) for sb, ivs in self.ram.items()}
        other.dev_owner = dict(self.dev_owner)
        other.shared_channels = dict(self.shared_channels)
        return other

    def canonical(self) -> tuple:
        return (
            tuple(sorted(self.core_owner.items())),
            tuple((sb, tuple(ivs)) for sb, ivs in sorted(self.ram.items())),
            tuple(sorted(self.dev_owner.items())),
            tuple(sorted(self.shared_channels.items())),
        )


class Monitor:
    def __init__(self, machine: Machine, store: KeyStore, eng,
                 defenses: Optional[Defenses] = None, mode: str = "leap",
                 shared_pool_range: Optional[Tuple[int, int]] = None):
        self.machine = machine
        self.store = store
        self.engine = eng
        self.defenses = defenses or Defenses()
        self.mode = mode
        self.shared_pool_range = shared_pool_range
        self.ledger = ResourceLedger(machine)
        self.sandboxes: Dict[int, SandboxMeta] = {}
        self.driver_states = None  # wired by the world; (ctx, dev) -> state
        self._next_sandbox = 1
        self._approvals = set()

    # -- helpers ----------------------------------------------------------

    def _trace(self, op: str, args=None, verdict="ok", reason=None):
        return self.engine.trace("monitor", op, args, verdict, reason)

    def active_sandboxes(self) -> List[int]:
        return sorted(self.sandboxes)

    def _require_sandbox(self, sb: int) -> SandboxMeta:
        try:
            return self.sandboxes[sb]
        except KeyError:
            raise BadState(f"no sandbox {sb}") from None

    # -- launch -----------------------------------------------------------

    def lock_and_launch(self, spec: LaunchSpec) -> Tuple[int, int]:
        """Lock resources, verify the image, build tables and boot.

        Returns (sandbox_id, boot_cost_ns); raises with all resources back
        under ROS on any failure.
        """
        machine = self.machine
        if len(self.sandboxes) >= len(machine.cores) - 1:
            self._trace("lock_and_launch", {"app": spec.app_id},
                        "rejected", "TooManySandboxes")
            raise TooManySandboxes("core budget exhausted")
        if self.mode == "tzasc":
            need = TZASC_REGIONS_PER_SANDBOX * (len(self.sandboxes) + 1) \
                + TZASC_REGIONS_SECURE_WORLD
            if need > TZASC_REGIONS:
                self._trace("lock_and_launch", {"app": spec.app_id},
                            "rejected", "TzascRegions")
                raise TooManySandboxes("protected-region budget exhausted")
        core = machine.cores.get(spec.core_id)
        if core is None or spec.core_id == 0:
            raise ResourceBusy(f"core {spec.core_id} not assignable")
        if self.defenses.legality_check:
            if self.ledger.core_owner[spec.core_id] != ROS_CTX:
                self._trace("lock_and_launch", {"core": spec.core_id},
                            "rejected", "CoreOccupied")
                raise ResourceBusy(f"core {spec.core_id} occupied")
            owner = self.ledger.ram_overlap_owner(spec.region)
            if owner is not None:
                self._trace("lock_and_launch", {"region": list(spec.region)},
                            "rejected", "RegionOccupied")
                raise ResourceBusy("region overlaps a live sandbox")
        region = spec.region
        if not (is_aligned(region[0], BLOCK_2M) and is_aligned(region[1], BLOCK_2M)):
            raise AlignmentError("sandbox region must be 2MB-aligned")
        if region[1] - region[0] > spec.max_memory:
            raise QuotaExceeded("base region exceeds memory limit")

        ros_set = machine.table_sets[ROS_CTX]
        # Image region leaves ROS before verification runs.
        ros_set.unmap_range(region)
        try:
            if self.defenses.verify:
                plaintext = self.store.verify_and_decrypt(spec.image)
                attested = True
            else:
                plaintext = self.store.decrypt_unchecked(spec.image)
                attested = False
        except IntegrityError:
            ros_set.map_range(region, stage2.Attr.NORMAL)
            self._trace("verify_image", {"app": spec.app_id},
                        "rejected", "IntegrityError")
            raise
        self._trace("verify_image", {"app": spec.app_id},
                    "ok" if attested else "skipped")

        sb = self._next_sandbox
        self._next_sandbox += 1
        tables = machine.create_table_set(sb)
        tables.map_range(region, stage2.Attr.NORMAL)
        channel = spec.channel
        ros_set.unmap_range(channel)
        ros_set.map_range(channel, stage2.Attr.SHARED)
        tables.map_range(channel, stage2.Attr.SHARED)
        self.sanitize(region, new_owner=sb)

        machine.tlb_flush_core(spec.core_id)
        core.state = CoreState.RUNNING_SANDBOX
        core.active_ctx = sb
        self.ledger.core_owner[spec.core_id] = sb
        self.ledger.add_ram(sb, region)
        self.ledger.shared_channels[sb] = channel
        self.sandboxes[sb] = SandboxMeta(
            sandbox_id=sb,
            app_id=spec.app_id,
            base_bytes=region[1] - region[0],
            channel=channel,
            boot_core=spec.core_id,
            max_cores=spec.max_cores,
            max_memory=spec.max_memory,
            booted_digest=digest64(plaintext),
            attested=attested,
        )
        boot_ns = self.engine.charge(f"sb{sb}", "boot", self.engine.costs.boot_ns)
        self._trace("lock_and_launch",
                    {"sandbox": sb, "core": spec.core_id,
                     "region": list(region)})
        return sb, boot_ns

    # -- memory adjustment --------------------------------------------------

    def verify_region_legality(self, sb: int, region: Tuple[int, int],
                               op: str) -> AdjustVerdict:
        assert op in ("attach", "detach")
        meta = self._require_sandbox(sb)
        verdict = (
            AdjustVerdict.ok()
            if not self.defenses.legality_check
            else self._check_legality(sb, meta, region, op)
        )
        if verdict.approved:
            self._approvals.add((sb, region, op))
        self._trace(
            "verify_region", {"sandbox": sb, "region": list(region), "op": op},
            "approved" if verdict.approved else "rejected",
            None if verdict.approved else verdict.reason.value,
        )
        return verdict

    def _check_legality(self, sb: int, meta: SandboxMeta,
                        region: Tuple[int, int], op: str) -> AdjustVerdict:
        start, end = region
        if not (is_aligned(start, BLOCK_2M) and is_aligned(end, BLOCK_2M)) \
                or start >= end:
            return AdjustVerdict.rejected(Reason.BAD_ALIGNMENT)
        if op == "attach":
            if self.ledger.ram_overlap_owner(region) is not None:
                return AdjustVerdict.rejected(Reason.OVERLAP)
            if end > self.machine.config.ram_bytes or (
                self.shared_pool_range and overlaps(region, self.shared_pool_range)
            ):
                return AdjustVerdict.rejected(Reason.NOT_FREE)
            span = self.ledger.sandbox_span(sb)
            if start != span[1] and end != span[0]:
                return AdjustVerdict.rejected(Reason.NOT_CONTIGUOUS)
            if self.ledger.sandbox_size(sb) + (end - start) > meta.max_memory:
                return AdjustVerdict.rejected(Reason.QUOTA_EXCEEDED)
        else:
            ivs = self.ledger.sandbox_intervals(sb)
            if not any(s <= start and end <= e for s, e in ivs):
                return AdjustVerdict.rejected(Reason.NOT_FREE)
            span = (ivs[0][0], ivs[-1][1])
            if start != span[0] and end != span[1]:
                return AdjustVerdict.rejected(Reason.NOT_CONTIGUOUS)
            if self.ledger.sandbox_size(sb) - (end - start) < meta.base_bytes:
                return AdjustVerdict.rejected(Reason.QUOTA_EXCEEDED)
        return AdjustVerdict.ok()

    def attach_memory(self, sb: int, region: Tuple[int, int]) -> int:
        self._consume_approval(sb, region, "attach")
        ros_set = self.machine.table_sets[ROS_CTX]
        if self.defenses.legality_check:
            ros_set.unmap_range(region)
        else:
            self._unmap_where_mapped(ros_set, region)
        self.sanitize(region, new_owner=sb)
        self.machine.table_sets[sb].map_range(region, stage2.Attr.NORMAL)
        self.ledger.add_ram(sb, region)
        self._trace("attach_memory", {"sandbox": sb, "region": list(region)})
        return self.engine.charge(
            f"sb{sb}", "mem_inc", self.engine.costs.mem_adjust_inc_ns
        )

    def detach_memory(self, sb: int, region: Tuple[int, int]) -> int:
        self._consume_approval(sb, region, "detach")
        self.machine.table_sets[sb].unmap_range(region)
        self.sanitize(region, new_owner=ROS_CTX)
        self.machine.table_sets[ROS_CTX].map_range(region, stage2.Attr.NORMAL)
        self.ledger.remove_ram(sb, region)
        self._trace("detach_memory", {"sandbox": sb, "region": list(region)})
        return self.engine.charge(
            f"sb{sb}", "mem_dec", self.engine.costs.mem_adjust_dec_ns
        )

    def _consume_approval(self, sb: int, region, op: str) -> None:
        key = (sb, region, op)
        if key not in self._approvals:
            raise VerdictError(f"{op} without an approved verdict")
        self._approvals.discard(key)

    @staticmethod
    def _unmap_where_mapped(tables: stage2.Stage2TableSet, region) -> None:
        pieces = [
            (max(s, region[0]), min(e, region[1]))
            for s, e, _ in tables.runs()
            if overlaps((s, e), region)
        ]
        for piece in pieces:
            tables.unmap_range(piece)

    # -- sanitization -------------------------------------------------------

    def sanitize(self, region: Tuple[int, int], new_owner: int) -> Tuple[int, int]:
        """Flush stale translations and foreign cache lines over a region
        before it changes hands."""
        if not self.defenses.sanitize:
            self._trace("sanitize", {"region": list(region)}, "skipped",
                        "no_sanitize")
            return (0, 0)
        if not (is_aligned(region[0], BLOCK_2M) and is_aligned(region[1], BLOCK_2M)):
            raise AlignmentError("sanitize region must be 2MB-aligned")
        flushed = self.machine.tlb_flush_range(region)
        invalidated = self.machine.cache_invalidate_range(region, keep_owner=new_owner)
        self._trace("sanitize", {"region": list(region), "tlb": flushed,
                                 "cache": invalidated})
        return flushed, invalidated

    # -- core transfer ------------------------------------------------------

    def transfer_core(self, core_id: int, from_ctx: int, to_ctx: int,
                      optimized: bool = True, charge: bool = True,
                      allow_last: bool = False) -> int:
        machine = self.machine
        core = machine.cores.get(core_id)
        if core is None:
            raise NotOwner(f"no core {core_id}")
        if from_ctx == to_ctx or (from_ctx != ROS_CTX and to_ctx != ROS_CTX):
            raise ResourceBusy("cores move only between ROS and one sandbox")
        if to_ctx != ROS_CTX and core_id == 0:
            raise ResourceBusy("core 0 is pinned to ROS")
        if self.defenses.legality_check:
            if self.ledger.core_owner[core_id] != from_ctx:
                self._trace("transfer_core", {"core": core_id},
                            "rejected", "NotOwner")
                raise NotOwner(f"core {core_id} not owned by ctx {from_ctx}")
        if to_ctx != ROS_CTX:
            meta = self._require_sandbox(to_ctx)
            if len(self.ledger.cores_of(to_ctx)) + 1 > meta.max_cores:
                self._trace("transfer_core", {"core": core_id},
                            "rejected", "QuotaExceeded")
                raise QuotaExceeded(f"sandbox {to_ctx} core quota reached")
        if not allow_last:
            owned = self.ledger.cores_of(from_ctx)
            if len(owned) <= 1:
                raise LastCoreError(f"ctx {from_ctx} would lose its last core")
            if from_ctx != ROS_CTX and core_id == self.sandboxes[from_ctx].boot_core:
                raise LastCoreError("booting core is never adjusted")

        # Departing context's lines are cleaned; the core passes through a
        # busy-wait (optimized) or off (full hotplug) state inside this op.
        machine.cache_invalidate_owner(from_ctx)
        machine.tlb_flush_core(core_id)
        core.state = CoreState.BUSY_WAIT if optimized else CoreState.OFF
        core.active_ctx = None
        core.state = (
            CoreState.RUNNING_ROS if to_ctx == ROS_CTX else CoreState.RUNNING_SANDBOX
        )
        core.active_ctx = to_ctx
        self.ledger.core_owner[core_id] = to_ctx
        direction = "inc" if from_ctx == ROS_CTX else "dec"
        self._trace("transfer_core",
                    {"core": core_id, "from": from_ctx, "to": to_ctx,
                     "optimized": optimized})
        if not charge:
            return 0
        cost = self.engine.costs.core_adjust(core.core_class.value, direction,
                                             optimized)
        actor = f"sb{to_ctx if to_ctx != ROS_CTX else from_ctx}"
        return self.engine.charge(
            actor, f"core_{direction}_{core.core_class.value}_"
                   f"{'opt' if optimized else 'noopt'}", cost
        )

    # -- peripherals ----------------------------------------------------------

    def switch_peripheral(self, dev_id: str, from_ctx: int, to_ctx: int,
                          charge: bool = True, require_release: bool = True) -> int:
        machine = self.machine
        desc = machine.config.peripheral(dev_id)
        if self.ledger.dev_owner[dev_id] != from_ctx:
            self._trace("switch_peripheral", {"dev": dev_id}, "rejected",
                        "NotOwner")
            raise NotOwner(f"{dev_id} not owned by ctx {from_ctx}")
        if require_release and self.driver_states is not None:
            state = self.driver_states.get((from_ctx, dev_id), "loaded")
            if state == "loaded":
                self._trace("switch_peripheral", {"dev": dev_id}, "rejected",
                            "DeviceBusy")
                raise DeviceBusy(f"{dev_id} driver still active in ctx {from_ctx}")
        rng = desc.mmio_range
        machine.table_sets[from_ctx].unmap_range(rng)
        machine._tlb_flush_any(rng)
        machine.table_sets[to_ctx].map_range(rng, stage2.Attr.DEVICE)
        self.ledger.dev_owner[dev_id] = to_ctx
        self._trace("switch_peripheral",
                    {"dev": dev_id, "from": from_ctx, "to": to_ctx})
        if not charge:
            return 0
        kind = desc.kind.value
        from_side = "ros" if from_ctx == ROS_CTX else "sandbox"
        to_side = "ros" if to_ctx == ROS_CTX else "sandbox"
        actor = f"sb{to_ctx if to_ctx != ROS_CTX else from_ctx}"
        total = self.engine.charge(
            actor, f"periph_unmap_{kind}_{from_side}",
            self.engine.costs.periph(kind, "unmap", from_side),
        )
        total += self.engine.charge(
            actor, f"periph_map_{kind}_{to_side}",
            self.engine.costs.periph(kind, "map", to_side),
        )
        return total

    # -- SMMU (DMA access control) ---------------------------------------------

    def smmu_check(self, dev_id: str, initiator_ctx: int,
                   target: Tuple[int, int]) -> bool:
        desc = self.machine.config.peripheral(dev_id)
        assert desc.dma_capable, "only DMA-capable devices reach the SMMU"
        if not self.defenses.smmu:
            self._trace("smmu_check", {"dev": dev_id, "target": list(target)},
                        "skipped", "no_smmu")
            return True
        allowed = self.ledger.owns_range(initiator_ctx, target)
        self._trace("smmu_check",
                    {"dev": dev_id, "ctx": initiator_ctx, "target": list(target)},
                    "ok" if allowed else "blocked",
                    None if allowed else "foreign target range")
        return allowed

    # -- teardown ---------------------------------------------------------------

    def teardown(self, sb: int, state_of=None, charge: bool = True) -> Tuple[int, List[str]]:
        """Release everything a sandbox holds; returns (cost_ns, devices that
        went back to ROS)."""
        meta = self._require_sandbox(sb)
        if state_of is not None and state_of(sb) != "terminating":
            raise BadState(f"sandbox {sb} not in terminating state")
        machine = self.machine
        returned_devs = [d for d, o in self.ledger.dev_owner.items() if o == sb]
        for dev in returned_devs:
            self.switch_peripheral(dev, sb, ROS_CTX, charge=False,
                                   require_release=False)
        for core_id in self.ledger.cores_of(sb):
            self.transfer_core(core_id, sb, ROS_CTX, optimized=True,
                               charge=False, allow_last=True)
        ros_set = machine.table_sets[ROS_CTX]
        for region in self.ledger.sandbox_intervals(sb):
            self.sanitize(region, new_owner=ROS_CTX)
            ros_set.map_range(region, stage2.Attr.NORMAL)
            self.ledger.remove_ram(sb, region)
        channel = self.ledger.shared_channels.pop(sb)
        ros_set.unmap_range(channel)
        self.sanitize(channel, new_owner=ROS_CTX)
        ros_set.map_range(channel, stage2.Attr.NORMAL)
        machine.destroy_table_set(sb)
        self.machine.cache_invalidate_owner(sb)
        self.sandboxes.pop(sb)
        self._approvals = {key for key in self._approvals if key[0] != sb}
        cost = 0
        if charge:
            cost = self.engine.charge(f"sb{sb}", "shutdown",
                                      self.engine.costs.shutdown_ns)
        self._trace("teardown", {"sandbox": sb, "devices": returned_devs})
        return cost, returned_devs

    # -- exploration support -----------------------------------------------------

    def clone_onto(self, machine: Machine, eng) -> "Monitor":
        other = Monitor.__new__(Monitor)
        other.machine = machine
        other.store = self.store
        other.engine = eng
        other.defenses = Defenses(**vars(self.defenses))
        other.mode = self.mode
        other.shared_pool_range = self.shared_pool_range
        other.ledger = self.ledger.clone()
        other.sandboxes = {
            sb: SandboxMeta(**vars(meta)) for sb, meta in self.sandboxes.items()
        }
        other.driver_states = None
        other._next_sandbox = self._next_sandbox
        other._approvals = set(self._approvals)
        return other

    def canonical(self) -> tuple:
        return (
            self.ledger.canonical(),
            tuple(
                (sb, meta.app_id, meta.base_bytes, meta.channel, meta.boot_core,
                 meta.max_cores, meta.max_memory, meta.booted_digest, meta.attested)
                for sb, meta in sorted(self.sandboxes.items())
            ),
        )
