"""Virtual PID namespace with ns_last_pid semantics.

The next process created in a namespace gets the first free PID after
``last_pid``, wrapping to ``reserved_low`` once ``pid_max`` is reached.  A
restorer that needs a specific PID either writes ``last_pid = pid - 1``
directly (privileged) or forks and kills throwaway processes until the
counter sits just below the target (unprivileged).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import PidUnavailable, TargetInUse, TargetUnreachable

DEFAULT_PID_MAX = 32768
DEFAULT_RESERVED_LOW = 300


@dataclass(frozen=True)
class ReservationCost:
    direct_writes: int = 0
    fork_iterations: int = 0

    def __add__(self, other: "ReservationCost") -> "ReservationCost":
        return ReservationCost(self.direct_writes + other.direct_writes,
                               self.fork_iterations + other.fork_iterations)

    def seconds(self, fork_cost: float, write_cost: float = 0.0) -> float:
        """Latency implied by this cost under a per-fork cost model."""
        return self.fork_iterations * fork_cost + self.direct_writes * write_cost

    def to_dict(self) -> dict:
        return {"direct_writes": self.direct_writes, "fork_iterations": self.fork_iterations}


@dataclass
class VirtualPidSpace:
    last_pid: int = 1
    pid_max: int = DEFAULT_PID_MAX
    reserved_low: int = DEFAULT_RESERVED_LOW
    privileged: bool = False
    in_use: set = field(default_factory=lambda: {1})
    allocation_log: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.last_pid < self.pid_max:
            raise ValueError("last_pid must lie in [0, pid_max)")
        if not 0 < self.reserved_low < self.pid_max:
            raise ValueError("reserved_low must lie in (0, pid_max)")
        if any(not 0 < p < self.pid_max for p in self.in_use):
            raise ValueError("in_use PIDs must lie in (0, pid_max)")

    @classmethod
    def from_params(cls, params: dict) -> "VirtualPidSpace":
        return cls(last_pid=params.get("initial_last_pid", 1),
                   pid_max=params.get("pid_max", DEFAULT_PID_MAX),
                   reserved_low=params.get("reserved_low", DEFAULT_RESERVED_LOW),
                   privileged=params.get("privileged", False))

    def _step(self, pid: int) -> int:
        nxt = pid + 1
        return self.reserved_low if nxt >= self.pid_max else nxt

    def next_free(self) -> int:
        """PID the next fork would receive."""
        pid = self._step(self.last_pid)
        for _ in range(self.pid_max):
            if pid not in self.in_use:
                return pid
            pid = self._step(pid)
        raise PidUnavailable("PID space exhausted")

    def allocate(self) -> int:
        pid = self.next_free()
        self.last_pid = pid
        self.in_use.add(pid)
        self.allocation_log.append({"kind": "fork", "value": pid})
        return pid

    def release(self, pid: int) -> None:
        self.in_use.discard(pid)

    def write_last_pid(self, value: int) -> None:
        if not self.privileged:
            raise PermissionError("ns_last_pid is not writable in this namespace")
        self.last_pid = value
        self.allocation_log.append({"kind": "write", "value": value})

    def _free_between(self, lo: int, hi: int) -> int:
        """Number of free PIDs p with lo < p < hi."""
        if hi <= lo + 1:
            return 0
        return (hi - lo - 1) - sum(1 for p in self.in_use if lo < p < hi)

    def _free_below(self, pid: int) -> int:
        """Closest free PID cyclically preceding ``pid`` in fork order."""
        p = pid - 1
        for _ in range(self.pid_max):
            if p < self.reserved_low and p <= self.last_pid:
                p = self.pid_max - 1
            if p not in self.in_use:
                return p
            p -= 1
        raise PidUnavailable("PID space exhausted")


def reserve_pid(space: VirtualPidSpace, target: int) -> ReservationCost:
    """Position ``space`` so that its next allocation yields ``target``."""
    if not 0 < target < space.pid_max:
        raise TargetUnreachable(f"target {target} outside (0, {space.pid_max})")
    if target in space.in_use:
        raise TargetInUse(f"PID {target} is in use")
    if space.privileged:
        space.write_last_pid(target - 1)
        return ReservationCost(direct_writes=1)

    last = space.last_pid
    if target > last:
        forks = space._free_between(last, target)
    elif target >= space.reserved_low:
        # wrap: the rest of the range above last, then [reserved_low, target)
        forks = space._free_between(last, space.pid_max) + space._free_between(space.reserved_low - 1, target)
    else:
        raise TargetUnreachable(f"PID {target} is below the wrap floor {space.reserved_low}")
    if forks:
        space.last_pid = space._free_below(target)
        space.allocation_log.append({"kind": "fork", "value": space.last_pid, "count": forks})
    return ReservationCost(fork_iterations=forks)
