"""Discrete-event simulation of five-stage neuron-cluster pipelines.

Each cluster task runs Pred -> GIO -> GC -> UDIO -> UDC.  Pred, GC and UDC
are compute stages on CPU cores; GIO and UDIO are flash reads on the single
I/O queue and are dropped when the data is already resident.  Two policies:

matrix_level   a matrix's tasks may not start until every task of the
               previous matrix has finished (a barrier between matrices).
cluster_level  tasks of different matrices interleave freely unless one
               matrix's output feeds another.

Scheduling is greedy list scheduling: whenever something finishes, ready
compute stages go to idle cores (fastest core first, lowest task id first)
and ready I/O stages queue first-in first-out.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .errors import ConstraintError, InvariantError


class Policy(str, Enum):
    MATRIX_LEVEL = "matrix_level"
    CLUSTER_LEVEL = "cluster_level"


class StageName(str, Enum):
    PRED = "Pred"
    GIO = "GIO"
    GC = "GC"
    UDIO = "UDIO"
    UDC = "UDC"


class StageKind(str, Enum):
    COMPUTE = "compute"
    IO = "io"
    NPU = "npu"


STAGE_KIND = {StageName.PRED: StageKind.COMPUTE, StageName.GIO: StageKind.IO,
              StageName.GC: StageKind.COMPUTE, StageName.UDIO: StageKind.IO,
              StageName.UDC: StageKind.COMPUTE}

DEFAULT_PRED_FRACTION = 0.02  # predictor cost relative to the Gate compute


@dataclass(frozen=True)
class Core:
    name: str
    throughput: float  # work units per second

    def __post_init__(self):
        if self.throughput <= 0:
            raise ConstraintError("core throughput must be > 0")


@dataclass(frozen=True)
class Resources:
    compute_cores: tuple[Core, ...]
    io_core: str = "big"
    npu: Core | None = None

    def __post_init__(self):
        object.__setattr__(self, "compute_cores", tuple(self.compute_cores))
        if not self.compute_cores:
            raise ConstraintError("at least one compute core is required")
        names = [c.name for c in self.compute_cores]
        if len(set(names)) != len(names):
            raise ConstraintError("compute core names must be unique")

    @classmethod
    def uniform(cls, n_cores: int, throughput: float = 1.0, npu: float | None = None) -> "Resources":
        return cls(tuple(Core(f"cpu{i}", throughput) for i in range(n_cores)),
                   npu=Core("npu", npu) if npu else None)


@dataclass(frozen=True)
class Stage:
    name: StageName | str
    kind: StageKind
    amount: float  # compute: work units; io: seconds

    def __post_init__(self):
        object.__setattr__(self, "kind", StageKind(self.kind))
        if self.amount < 0:
            raise ConstraintError("stage amounts must be >= 0")


@dataclass(frozen=True)
class ClusterSpec:
    """Inputs for one cluster's five stages.  Zero-time I/O means resident."""

    gc_work: float
    udc_work: float
    gio_time: float = 0.0
    udio_time: float = 0.0
    pred_work: float | None = None  # default: DEFAULT_PRED_FRACTION * gc_work

    def __post_init__(self):
        if self.gc_work <= 0 or self.udc_work < 0:
            raise ConstraintError("gc_work must be > 0 and udc_work >= 0")
        if min(self.gio_time, self.udio_time) < 0:
            raise ConstraintError("I/O durations must be >= 0")
        if self.pred_work is not None and self.pred_work <= 0:
            raise ConstraintError("pred_work must be > 0")


@dataclass(frozen=True)
class Task:
    task_id: int
    matrix_id: int
    cluster_id: int
    stages: tuple[Stage, ...]
    after: tuple[int, ...] = ()  # tasks that must finish before the first stage


def cluster_stages(spec: ClusterSpec) -> tuple[Stage, ...]:
    pred = spec.pred_work if spec.pred_work is not None else DEFAULT_PRED_FRACTION * spec.gc_work
    out = [Stage(StageName.PRED, StageKind.COMPUTE, pred)]
    if spec.gio_time > 0:
        out.append(Stage(StageName.GIO, StageKind.IO, spec.gio_time))
    out.append(Stage(StageName.GC, StageKind.COMPUTE, spec.gc_work))
    if spec.udio_time > 0:
        out.append(Stage(StageName.UDIO, StageKind.IO, spec.udio_time))
    if spec.udc_work > 0:  # 0: every neuron in the cluster failed the gate check
        out.append(Stage(StageName.UDC, StageKind.COMPUTE, spec.udc_work))
    return tuple(out)


def _check_acyclic(tasks: Sequence[Task]) -> None:
    ids = {t.task_id for t in tasks}
    indeg = {t.task_id: 0 for t in tasks}
    succ: dict[int, list[int]] = {t.task_id: [] for t in tasks}
    for t in tasks:
        for p in t.after:
            if p not in ids:
                raise ConstraintError(f"task {t.task_id} depends on unknown task {p}")
            indeg[t.task_id] += 1
            succ[p].append(t.task_id)
    todo = deque(i for i, d in indeg.items() if d == 0)
    seen = 0
    while todo:
        i = todo.popleft()
        seen += 1
        for s in succ[i]:
            indeg[s] -= 1
            if indeg[s] == 0:
                todo.append(s)
    if seen != len(tasks):
        raise ConstraintError("task dependencies contain a cycle")


def build_tasks(matrices: Sequence[Sequence[ClusterSpec]], policy: Policy | str,
                feeds: Sequence[tuple[int, int]] = ()) -> list[Task]:
    """One task per cluster, numbered in matrix then cluster order.

    ``feeds`` lists (producer, consumer) matrix pairs: every consumer task
    waits for all producer tasks under either policy.  ``matrix_level``
    additionally chains consecutive matrices with a barrier.
    """
    policy = Policy(policy)
    n = len(matrices)
    for a, b in feeds:
        if not (0 <= a < n and 0 <= b < n):
            raise ConstraintError(f"feed ({a}, {b}) names an unknown matrix")
    ids: list[list[int]] = []
    nxt = 0
    for clusters in matrices:
        ids.append(list(range(nxt, nxt + len(clusters))))
        nxt += len(clusters)
    waits: dict[int, set[int]] = {m: {a for a, b in feeds if b == m} for m in range(n)}
    if policy is Policy.MATRIX_LEVEL:
        for m in range(1, n):
            waits[m].add(m - 1)
    tasks = []
    for m, clusters in enumerate(matrices):
        after = tuple(sorted(t for p in waits[m] for t in ids[p]))
        for c, spec in enumerate(clusters):
            tasks.append(Task(ids[m][c], m, c, cluster_stages(spec), after))
    _check_acyclic(tasks)
    return tasks


# --------------------------------------------------------------------------
# Event log
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    time: float
    resource: str
    task: int
    stage: str
    kind: str  # "start" | "end"; anything else is a point marker


@dataclass
class EventLog:
    events: list[Event] = field(default_factory=list)
    makespan: float = 0.0
    resources: dict = field(default_factory=dict)  # resource name -> kind
    fallback: bool = False  # cluster-level run that kept the barrier schedule

    def intervals(self, resource: str | None = None) -> list[tuple[float, float, str, int, str]]:
        """(start, end, resource, task, stage) in start order."""
        open_: dict[tuple[str, int, str], float] = {}
        out = []
        for e in self.events:
            if resource is not None and e.resource != resource:
                continue
            k = (e.resource, e.task, e.stage)
            if e.kind == "start":
                open_[k] = e.time
            elif e.kind == "end":
                out.append((open_.pop(k), e.time, e.resource, e.task, e.stage))
        return sorted(out, key=lambda r: (r[0], r[2], r[3]))

    def validate(self) -> None:
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise InvariantError("event times decrease")
        by_res: dict[str, list] = {}
        for iv in self.intervals():
            by_res.setdefault(iv[2], []).append(iv)
        for res, ivs in by_res.items():
            ivs.sort()
            for a, b in zip(ivs, ivs[1:]):
                if b[0] < a[1]:
                    raise InvariantError(f"overlapping intervals on {res}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "resource", "task", "stage", "kind"])
        for e in self.events:
            w.writerow([repr(e.time), e.resource, e.task, e.stage, e.kind])
        return buf.getvalue()

    def summary(self) -> dict:
        u = utilization(self) if self.events else None
        return {
            "makespan": self.makespan,
            "n_events": len(self.events),
            "resources": dict(self.resources),
            "busy_fraction": u.busy_fraction if u else {},
            "overlap_fraction": u.overlap_fraction if u else 0.0,
            "idle_bubbles": u.idle_bubbles if u else 0.0,
            "fallback": self.fallback,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


# --------------------------------------------------------------------------
# Simulator
# --------------------------------------------------------------------------

IO_RESOURCE = "io"


def _sname(st: Stage) -> str:
    return st.name.value if isinstance(st.name, Enum) else str(st.name)


def simulate(tasks: Sequence[Task], resources: Resources) -> EventLog:
    """Greedy list scheduling of ``tasks``; the policy is baked into their dependencies."""
    log = EventLog()
    cores = sorted(resources.compute_cores, key=lambda c: -c.throughput)  # stable: ties keep order
    for c in cores:
        log.resources[c.name] = StageKind.COMPUTE.value
    log.resources[IO_RESOURCE] = StageKind.IO.value
    if resources.npu:
        log.resources[resources.npu.name] = StageKind.NPU.value
    if not tasks:
        return log
    _check_acyclic(tasks)

    by_id = {t.task_id: t for t in tasks}
    waiting = {t.task_id: len(set(t.after)) for t in tasks}
    dependents: dict[int, list[int]] = {t.task_id: [] for t in tasks}
    for t in tasks:
        for p in set(t.after):
            dependents[p].append(t.task_id)
    next_stage = {t.task_id: 0 for t in tasks}

    ready_compute: list[int] = []   # heap of task ids
    ready_npu: list[int] = []
    ready_io: deque[int] = deque()
    idle_cores = list(range(len(cores)))
    io_busy = False
    npu_busy = False
    running: list[tuple[float, int, str, int]] = []  # (end, seq, resource, task)
    seq = 0
    done = 0

    def enqueue(tid: int) -> None:
        st = by_id[tid].stages[next_stage[tid]]
        if st.kind is StageKind.COMPUTE:
            heapq.heappush(ready_compute, tid)
        elif st.kind is StageKind.IO:
            ready_io.append(tid)
        else:
            if resources.npu is None:
                raise ConstraintError("task needs an NPU but none is configured")
            heapq.heappush(ready_npu, tid)

    io_batch: list[int] = []
    for tid in sorted(waiting):
        if waiting[tid] == 0:
            io_batch.append(tid)
    for tid in io_batch:
        enqueue(tid)

    now = 0.0
    while True:
        # dispatch
        while idle_cores and ready_compute:
            tid = heapq.heappop(ready_compute)
            ci = min(idle_cores)
            idle_cores.remove(ci)
            st = by_id[tid].stages[next_stage[tid]]
            end = now + st.amount / cores[ci].throughput
            log.events.append(Event(now, cores[ci].name, tid, _sname(st), "start"))
            heapq.heappush(running, (end, seq, cores[ci].name, tid))
            seq += 1
        if not io_busy and ready_io:
            tid = ready_io.popleft()
            st = by_id[tid].stages[next_stage[tid]]
            log.events.append(Event(now, IO_RESOURCE, tid, _sname(st), "start"))
            heapq.heappush(running, (now + st.amount, seq, IO_RESOURCE, tid))
            seq += 1
            io_busy = True
        if resources.npu and not npu_busy and ready_npu:
            tid = heapq.heappop(ready_npu)
            st = by_id[tid].stages[next_stage[tid]]
            log.events.append(Event(now, resources.npu.name, tid, _sname(st), "start"))
            heapq.heappush(running, (now + st.amount / resources.npu.throughput, seq, resources.npu.name, tid))
            seq += 1
            npu_busy = True
        if not running:
            break
        # advance to the next completion time and retire everything ending then
        now = running[0][0]
        finished = []
        while running and running[0][0] == now:
            _, _, res, tid = heapq.heappop(running)
            finished.append((res, tid))
        released = []
        for res, tid in sorted(finished, key=lambda r: r[1]):
            st = by_id[tid].stages[next_stage[tid]]
            log.events.append(Event(now, res, tid, _sname(st), "end"))
            if res == IO_RESOURCE:
                io_busy = False
            elif resources.npu and res == resources.npu.name:
                npu_busy = False
            else:
                idle_cores.append(next(i for i, c in enumerate(cores) if c.name == res))
            next_stage[tid] += 1
            if next_stage[tid] < len(by_id[tid].stages):
                released.append(tid)
            else:
                done += 1
                for d in dependents[tid]:
                    waiting[d] -= 1
                    if waiting[d] == 0:
                        released.append(d)
        for tid in sorted(released):
            enqueue(tid)
    if done != len(tasks):  # pragma: no cover - acyclic graphs always drain
        raise InvariantError("simulation stalled with unfinished tasks")
    log.makespan = now
    return log


def run_policy(matrices: Sequence[Sequence[ClusterSpec]], resources: Resources,
               policy: Policy | str, feeds: Sequence[tuple[int, int]] = (),
               guard: bool = True) -> EventLog:
    """Build and simulate under ``policy``.

    Greedy list scheduling is not monotone: dropping the barrier can, on
    rare instances, make the makespan longer.  With ``guard`` the
    cluster-level run is compared against the barrier schedule and the
    shorter one is kept (``fallback`` marks the log when that is the barrier
    schedule).  Both schedules are deterministic, so the planner can make
    this choice offline.
    """
    policy = Policy(policy)
    log = simulate(build_tasks(matrices, policy, feeds), resources)
    if guard and policy is Policy.CLUSTER_LEVEL and len(matrices) > 1:
        barrier = simulate(build_tasks(matrices, Policy.MATRIX_LEVEL, feeds), resources)
        if barrier.makespan < log.makespan:
            barrier.fallback = True
            return barrier
    return log


# --------------------------------------------------------------------------
# Utilization
# --------------------------------------------------------------------------

def _union(ivs: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for s, e in sorted(ivs):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def _measure(ivs) -> float:
    return sum(e - s for s, e in ivs)


def _intersect(a, b) -> float:
    i = j = 0
    total = 0.0
    while i < len(a) and j < len(b):
        lo, hi = max(a[i][0], b[j][0]), min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


@dataclass(frozen=True)
class Utilization:
    busy_fraction: dict       # resource -> busy time / makespan
    overlap_fraction: float   # share of I/O time during which some compute core is busy
    idle_bubbles: float       # total idle compute-core time inside [0, makespan]
    compute_busy: float       # measure of the union of compute-busy intervals
    io_busy: float


def utilization(log: EventLog) -> Utilization:
    if not log.events:
        raise ConstraintError("utilization of an empty log")
    span = log.makespan
    per: dict[str, list[tuple[float, float]]] = {r: [] for r in log.resources}
    for s, e, res, _, _ in log.intervals():
        per.setdefault(res, []).append((s, e))
    busy = {r: (_measure(v) / span if span > 0 else 0.0) for r, v in per.items()}
    compute_res = [r for r, k in log.resources.items() if k == StageKind.COMPUTE.value]
    comp = _union([iv for r in compute_res for iv in per[r]])
    io_ivs = _union(per.get(IO_RESOURCE, []))
    io_time = _measure(io_ivs)
    overlap = _intersect(comp, io_ivs) / io_time if io_time > 0 else 0.0
    bubbles = sum(span - _measure(per[r]) for r in compute_res)
    return Utilization(busy, overlap, bubbles, _measure(comp), io_time)


def fig6_instance(io_time: float = 2.0, n_matrices: int = 2, n_clusters: int = 8,
                  n_resident: int = 4) -> list[list[ClusterSpec]]:
    """Toy instance: unit compute stages, fixed-length reads for the non-resident clusters.

    Resident clusters come first within each matrix.
    """
    return [[ClusterSpec(gc_work=1.0, udc_work=1.0, pred_work=1.0,
                         gio_time=0.0 if c < n_resident else io_time,
                         udio_time=0.0 if c < n_resident else io_time)
             for c in range(n_clusters)] for _ in range(n_matrices)]
