"""Per-sandbox runtime: synthetic workloads, CPU/memory pressure monitors,
and the requests they raise.

Work is tracked in an integer fixed-point unit (milli-units times
nanoseconds) so that total work done equals rate times time exactly under
any ownership schedule.
"""

from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, Optional, Set, Tuple

from .errors import BadState
from .units import MB, MS_NS, S_NS, align_up

# Fixed-point scale: one work unit is 1000 milli-units; rates are
# milli-units per millisecond, so rate * dt_ns consumes scaled work directly.
WORK_SCALE = 1000 * MS_NS

BIG_RATE_MU_MS = 1000    # 1.0 unit/ms
LITTLE_RATE_MU_MS = 350  # 0.35 unit/ms
DEFAULT_GPU_SPEEDUP_PCT = 357  # x3.57

USAGE_SAMPLE_NS = 100 * MS_NS
INCREASE_WINDOW_SAMPLES = 20   # 2 s of 100 ms samples
RELEASE_WINDOW_SAMPLES = 50    # 5 s
INCREASE_THRESHOLD_PERMILLE = 990
RELEASE_THRESHOLD_PERMILLE = 400
HYSTERESIS_NS = 1 * S_NS

MEM_GRANULE = 16 * MB


@dataclass
class InferenceBatch:
    images: int
    units_per_image: int
    parallelizable: bool = True
    gpu_speedup_pct: int = DEFAULT_GPU_SPEEDUP_PCT

    def total_scaled(self) -> int:
        return self.images * self.units_per_image * WORK_SCALE


@dataclass
class CipherQuery:
    """Query workload over encrypted files: the part of a file that fits in
    the owned cache memory scans cheap, the rest pays a decrypt penalty."""

    file_sizes: Tuple[int, ...]
    queries_per_file: int = 10
    cache_base_bytes: int = 10 * MB
    scan_units_per_mb: int = 10
    miss_units_per_mb: int = 50

    def query_scaled(self, file_bytes: int, cache_bytes: int) -> int:
        whole_mb = -(-file_bytes // MB)
        uncached_mb = -(-max(0, file_bytes - cache_bytes) // MB)
        units = whole_mb * self.scan_units_per_mb \
            + uncached_mb * self.miss_units_per_mb
        return units * WORK_SCALE


@dataclass
class Idle:
    pass


@dataclass(frozen=True)
class AdjustRequest:
    kind: str                      # "increase_core" | "release_core"
    core_class: Optional[str] = None
    core_id: Optional[int] = None


@dataclass(frozen=True)
class MemRequest:
    kind: str                      # "attach" | "detach"
    nbytes: int


_STATE_ORDER = ["created", "verifying", "booting", "running", "terminating", "dead"]


class SandboxRuntime:
    def __init__(self, sandbox_id: int, app_id: str, max_cores: int,
                 max_memory: int, boot_core: int, boot_core_class: str,
                 base_bytes: int, workload=None,
                 mem_granule: int = MEM_GRANULE):
        self.id = sandbox_id
        self.app_id = app_id
        self.state = "created"
        self.max_cores = max_cores
        self.max_memory = max_memory
        self.boot_core = boot_core
        self.base_bytes = base_bytes
        self.mem_granule = mem_granule
        # Runtime's own view of what it may use; the ledger stays the truth.
        self.cores: Dict[int, str] = {boot_core: boot_core_class}
        self.devices: Set[str] = set()
        self.gpu_owned = False
        self.workload = workload if workload is not None else Idle()
        self.remaining_scaled = (
            workload.total_scaled() if isinstance(workload, InferenceBatch) else 0
        )
        # Cipher bookkeeping.
        self._file_index = 0
        self._queries_left = 0
        self._attached_bytes = 0
        self.mem_pressure = False
        self.mem_pending = False
        # Accounting.
        self.work_started_ns: Optional[int] = None
        self.work_finished_ns: Optional[int] = None
        self._last_account_ns: Optional[int] = None
        self.usage: Deque[Tuple[int, Dict[int, int]]] = deque(
            maxlen=RELEASE_WINDOW_SAMPLES
        )
        self.hysteresis_until_ns = 0
        self.adjust_count = 0
        self.adjust_latency_ns = 0

    # -- state machine -----------------------------------------------------

    def advance(self, new_state: str) -> None:
        cur = _STATE_ORDER.index(self.state)
        nxt = _STATE_ORDER.index(new_state)
        if nxt != cur + 1:
            raise BadState(f"sandbox {self.id}: {self.state} -> {new_state}")
        self.state = new_state

    def require_running(self) -> None:
        if self.state != "running":
            raise BadState(f"sandbox {self.id} is {self.state}")

    # -- workload ------------------------------------------------------------

    def busy(self) -> bool:
        if self.state != "running":
            return False
        if isinstance(self.workload, InferenceBatch):
            return self.remaining_scaled > 0
        if isinstance(self.workload, CipherQuery):
            return self._file_index < len(self.workload.file_sizes)
        return False

    def rate_mu_ms(self) -> int:
        """Aggregate compute rate over owned cores (boot core only for
        non-parallelizable work), GPU factor applied."""
        if isinstance(self.workload, InferenceBatch) and not self.workload.parallelizable:
            classes = [self.cores[self.boot_core]]
        else:
            classes = list(self.cores.values())
        rate = sum(
            BIG_RATE_MU_MS if c == "big" else LITTLE_RATE_MU_MS for c in classes
        )
        if self.gpu_owned and isinstance(self.workload, InferenceBatch):
            rate = rate * self.workload.gpu_speedup_pct // 100
        return rate

    def start_work(self, now_ns: int) -> None:
        self.work_started_ns = now_ns
        self._last_account_ns = now_ns
        if isinstance(self.workload, CipherQuery) and self.workload.file_sizes:
            self._queries_left = self.workload.queries_per_file
            self.remaining_scaled = self._current_query_cost()

    def _cache_bytes(self) -> int:
        assert isinstance(self.workload, CipherQuery)
        return self.workload.cache_base_bytes + self._attached_bytes

    def _current_query_cost(self) -> int:
        w = self.workload
        return w.query_scaled(w.file_sizes[self._file_index], self._cache_bytes())

    def working_set_bytes(self) -> int:
        if isinstance(self.workload, CipherQuery) and self.busy():
            return self.workload.file_sizes[self._file_index]
        return 0

    def used_bytes(self) -> int:
        """Memory the runtime is actually using: the OS image footprint plus
        whatever part of the working set fits the cache allocation."""
        if isinstance(self.workload, CipherQuery):
            os_part = self.base_bytes - self.workload.cache_base_bytes
            return os_part + min(self.working_set_bytes(), self._cache_bytes())
        return self.base_bytes

    def step_workload(self, dt_ns: int) -> int:
        """Consume work for dt at the current rate; returns scaled work done."""
        self.require_running()
        if dt_ns < 0:
            raise BadState("negative step")
        if not self.busy():
            return 0
        budget = self.rate_mu_ms() * dt_ns
        done = 0
        while budget > 0 and self.busy():
            take = min(budget, self.remaining_scaled)
            self.remaining_scaled -= take
            done += take
            budget -= take
            if self.remaining_scaled == 0:
                self._on_chunk_done()
        return done

    def _on_chunk_done(self) -> None:
        if isinstance(self.workload, CipherQuery):
            self._queries_left -= 1
            if self._queries_left > 0:
                self.remaining_scaled = self._current_query_cost()
                return
            self._file_index += 1
            if self._file_index < len(self.workload.file_sizes):
                self._queries_left = self.workload.queries_per_file
                self.remaining_scaled = self._current_query_cost()

    def account_to(self, now_ns: int) -> None:
        """Fold elapsed time into the workload; call before any rate change."""
        if self.state != "running" or self._last_account_ns is None:
            return
        dt = now_ns - self._last_account_ns
        self._last_account_ns = now_ns
        if dt > 0 and self.busy():
            self.step_workload(dt)
            if not self.busy() and self.work_finished_ns is None:
                self.work_finished_ns = now_ns

    def finish_eta_ns(self) -> Optional[int]:
        """Time to finish from the last accounting point at the current
        rate, or None when idle."""
        if not self.busy():
            return None
        rate = self.rate_mu_ms()
        if rate == 0:
            return None
        remaining = self.remaining_scaled
        if isinstance(self.workload, CipherQuery):
            w = self.workload
            cache = self._cache_bytes()
            remaining += (self._queries_left - 1) * w.query_scaled(
                w.file_sizes[self._file_index], cache
            )
            for f in w.file_sizes[self._file_index + 1 :]:
                remaining += w.queries_per_file * w.query_scaled(f, cache)
        return -(-remaining // rate)

    # -- usage sampling and monitors ----------------------------------------

    def sample_usage(self, now_ns: int, busy_ns_in_window: int) -> None:
        permille = min(1000, busy_ns_in_window * 1000 // USAGE_SAMPLE_NS)
        per_core: Dict[int, int] = {}
        parallel = not (
            isinstance(self.workload, InferenceBatch)
            and not self.workload.parallelizable
        )
        for cid in self.cores:
            per_core[cid] = permille if (parallel or cid == self.boot_core) else 0
        agg = sum(per_core.values()) // max(1, len(per_core))
        self.usage.append((agg, per_core))

    def monitor_cpu(self, now_ns: int) -> Optional[AdjustRequest]:
        if self.state != "running" or now_ns < self.hysteresis_until_ns:
            return None
        if len(self.usage) >= INCREASE_WINDOW_SAMPLES and len(self.cores) < self.max_cores:
            recent = list(self.usage)[-INCREASE_WINDOW_SAMPLES:]
            avg = sum(a for a, _ in recent) // INCREASE_WINDOW_SAMPLES
            if avg > INCREASE_THRESHOLD_PERMILLE:
                return AdjustRequest(
                    "increase_core", core_class=self.cores[self.boot_core]
                )
        surplus = sorted(c for c in self.cores if c != self.boot_core)
        for cid in surplus:
            # Only samples taken while the core was owned count toward its
            # idle window.
            vals = [pc[cid] for _, pc in self.usage if cid in pc]
            if len(vals) >= RELEASE_WINDOW_SAMPLES and \
                    sum(vals) // len(vals) < RELEASE_THRESHOLD_PERMILLE:
                return AdjustRequest("release_core", core_id=cid)
        return None

    def monitor_memory(self, requested_bytes: int) -> Optional[MemRequest]:
        """Attach when the demanded bytes outgrow the owned dynamic memory,
        detach whole granules once they are free again."""
        if self.state != "running":
            return None
        if not isinstance(self.workload, CipherQuery):
            return None
        need = max(0, requested_bytes - self._cache_bytes())
        if need > 0:
            ask = align_up(need, self.mem_granule)
            room = self.max_memory - self.base_bytes - self._attached_bytes
            ask = min(ask, room - room % self.mem_granule)
            if ask > 0:
                self.mem_pressure = True
                return MemRequest("attach", ask)
            return None
        self.mem_pressure = False
        slack = self._cache_bytes() - requested_bytes
        free_granules = min(slack // self.mem_granule,
                            self._attached_bytes // self.mem_granule)
        if free_granules > 0:
            return MemRequest("detach", free_granules * self.mem_granule)
        return None

    # -- cloning for exploration ------------------------------------------------

    def clone(self) -> "SandboxRuntime":
        other = SandboxRuntime.__new__(SandboxRuntime)
        other.__dict__.update(self.__dict__)
        other.cores = dict(self.cores)
        other.devices = set(self.devices)
        other.usage = deque(self.usage, maxlen=RELEASE_WINDOW_SAMPLES)
        # Workload dataclasses hold only immutable parameters.
        return other

    def canonical(self) -> tuple:
        return (
            self.id, self.app_id, self.state,
            tuple(sorted(self.cores.items())), tuple(sorted(self.devices)),
            self.remaining_scaled, self._file_index, self._queries_left,
            self._attached_bytes,
        )


def step_workload(runtime: SandboxRuntime, dt_ns: int) -> int:
    return runtime.step_workload(dt_ns)


def monitor_cpu(runtime: SandboxRuntime, now_ns: int) -> Optional[AdjustRequest]:
    return runtime.monitor_cpu(now_ns)


def monitor_memory(runtime: SandboxRuntime, requested_bytes: int) -> Optional[MemRequest]:
    return runtime.monitor_memory(requested_bytes)
