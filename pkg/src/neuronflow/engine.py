"""End-to-end decode and prefill simulation.

Decode, per step and layer:

1. Attention runs as one dense block.  Meanwhile the I/O core loads any
   pending NPU graph (first), then the hot-set weights that are not
   resident.  The FFN cannot start before both finish.
2. The FFN splits in two.  The NPU multiplies the plan's hot rows densely.
   The CPU runs the cold activated neurons through the cluster pipeline,
   reading missing bundle fragments from flash.  With the NPU disabled the
   CPU handles every activated neuron.
3. The step's critical path is classified interval by interval as compute
   (some compute unit busy), exposed I/O (only the flash queue busy) or stall.

Compute stage durations are max(bytes / bandwidth, elements / throughput).
While both units stream weights, each gets its share of the combined cap.
The NPU speeds up to its solo cap once the CPU side is done.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cache import CacheConfig, ClusterKey, Fragment, LookupPhase, NeuronCache, NeuronKey, Outcome, Region
from .errors import ConstraintError
from .hardware import HardwareProfile
from .model import ActivationTrace, Dtype, ModelSpec, SkewParams, generate_trace, default_skew
from .pipeline import ClusterSpec, Core, EventLog, Event, Policy, Resources, _intersect, _measure, _union, run_policy
from .planner import ExecutionPlan, PlanEntry, PlannerConfig, generate_plan, profile
from .quant import PAGE, bundle_bytes
from .storage import FlashLayout, ReadKind, layout, read_time, sequential_load_time

PROFILE_TOKEN_BASE = 0
DECODE_TOKEN_BASE = 1_000_000  # keeps evaluation draws disjoint from profiling draws


@dataclass(frozen=True)
class PolicyFlags:
    bundle: bool = True
    cache: bool = True
    pipeline: Policy = Policy.CLUSTER_LEVEL
    xpu: bool = True
    coactivation: bool = False  # co-activation bundle caching, for comparison only

    def __post_init__(self):
        object.__setattr__(self, "pipeline", Policy(self.pipeline))


ABLATION_STEPS: tuple[tuple[str, PolicyFlags], ...] = (
    ("baseline", PolicyFlags(bundle=False, cache=False, pipeline=Policy.MATRIX_LEVEL, xpu=False)),
    ("+bundle", PolicyFlags(bundle=True, cache=False, pipeline=Policy.MATRIX_LEVEL, xpu=False)),
    ("+cache", PolicyFlags(bundle=True, cache=True, pipeline=Policy.MATRIX_LEVEL, xpu=False)),
    ("+pipeline", PolicyFlags(bundle=True, cache=True, pipeline=Policy.CLUSTER_LEVEL, xpu=False)),
    ("+xpu", PolicyFlags(bundle=True, cache=True, pipeline=Policy.CLUSTER_LEVEL, xpu=True)),
)


@dataclass
class RunConfig:
    spec: ModelSpec
    plan: ExecutionPlan
    hw: HardwareProfile
    trace: ActivationTrace  # decode activations; token order and batch sizes define the schedule
    offload_fraction: float = 0.5
    flags: PolicyFlags = field(default_factory=PolicyFlags)
    fixed_bytes: int = 0
    cold_cluster_size: int = 32
    hot_cluster_size: int = 64
    clusters_per_matrix: int = 8
    record_events: bool = False

    def __post_init__(self):
        if not 0.0 <= self.offload_fraction <= 1.0:
            raise ConstraintError("offload_fraction must be in [0, 1]")
        if len(self.trace) == 0:
            raise ConstraintError("empty decode schedule")
        if (self.trace.d_ffn, self.trace.n_layers) != (self.spec.d_ffn, self.spec.n_layers):
            raise ConstraintError("trace shape does not match the model")
        if min(self.cold_cluster_size, self.hot_cluster_size, self.clusters_per_matrix) < 1:
            raise ConstraintError("cluster sizes must be >= 1")

    @property
    def neuron_bytes(self) -> int:
        return bundle_bytes(self.spec.d_model, self.dtype)[0]

    @property
    def dtype(self) -> Dtype:
        return self.spec.dtype if self.spec.dtype in (Dtype.FP16, Dtype.INT4_GROUP) else Dtype.INT4_GROUP

    @property
    def ffn_bytes(self) -> int:
        return self.spec.n_layers * self.spec.d_ffn * self.neuron_bytes

    @property
    def resident_ffn_bytes(self) -> int:
        return int(round((1.0 - self.offload_fraction) * self.ffn_bytes))

    @property
    def batch_schedule(self) -> list[int]:
        return [entries[0].batch_size for _, entries in sorted(self.trace.by_token().items())]

    @property
    def n_tokens(self) -> int:
        return len(self.trace.by_token())


def build_run_config(spec: ModelSpec | None = None, batch_schedule: Sequence[int] = (1,) * 16, *,
                     skew: SkewParams | None = None, hw: HardwareProfile | None = None,
                     offload_fraction: float = 0.5, flags: PolicyFlags | None = None,
                     profile_tokens: int = 64, fixed_bytes: int = 0, **kw) -> RunConfig:
    """Profile, plan and sample a decode trace in one go.

    Profiling covers every batch size in the schedule with ``profile_tokens``
    tokens each, drawn from a token range disjoint from the decode trace.
    """
    spec = spec or ModelSpec(n_layers=4, d_model=4096, d_ffn=14336, dtype=Dtype.INT4_GROUP, seed=0)
    skew = skew or default_skew()
    hw = hw or HardwareProfile()
    if not batch_schedule:
        raise ConstraintError("empty decode schedule")
    sizes = sorted(set(int(b) for b in batch_schedule))
    prof = generate_trace(spec, skew, profile_tokens * len(sizes),
                          [b for b in sizes for _ in range(profile_tokens)], first_token=PROFILE_TOKEN_BASE)
    dtype = spec.dtype if spec.dtype in (Dtype.FP16, Dtype.INT4_GROUP) else Dtype.INT4_GROUP
    nb = bundle_bytes(spec.d_model, dtype)[0]
    resident = int(round((1.0 - offload_fraction) * spec.n_layers * spec.d_ffn * nb))
    pcfg = PlannerConfig(d_model=spec.d_model, dtype=dtype, cache_total_bytes=fixed_bytes + resident,
                         fixed_bytes=fixed_bytes)
    plan = generate_plan(profile(prof), hw, sizes, pcfg)
    trace = generate_trace(spec, skew, len(batch_schedule), list(batch_schedule), first_token=DECODE_TOKEN_BASE)
    return RunConfig(spec=spec, plan=plan, hw=hw, trace=trace, offload_fraction=offload_fraction,
                     flags=flags or PolicyFlags(), fixed_bytes=fixed_bytes, **kw)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass
class RunMetrics:
    tokens: int
    steps: int
    total_time: float
    step_latency: np.ndarray
    step_batch: np.ndarray
    compute_time: float
    io_overhead_time: float
    stall_time: float
    lookups: int
    hits: int
    window_miss_rates: np.ndarray
    bytes_read: int
    compute_bytes: int
    graph_switches: int = 0
    graph_switch_cost: float = 0.0
    npu_fraction: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def tokens_per_s(self) -> float:
        return self.tokens / self.total_time if self.total_time > 0 else float("inf")

    @property
    def step_speed(self) -> np.ndarray:
        """Decode iterations per second, per step."""
        return 1.0 / self.step_latency

    def latency_percentile(self, q: float) -> float:
        return float(np.percentile(self.step_latency, q))

    @property
    def io_overhead_fraction(self) -> float:
        return self.io_overhead_time / self.total_time if self.total_time else 0.0

    @property
    def compute_fraction(self) -> float:
        return self.compute_time / self.total_time if self.total_time else 0.0

    @property
    def stall_fraction(self) -> float:
        return self.stall_time / self.total_time if self.total_time else 0.0

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 1.0

    @property
    def effective_bandwidth(self) -> float:
        return self.compute_bytes / self.total_time if self.total_time else 0.0

    def summary(self) -> dict:
        w = self.window_miss_rates if self.window_miss_rates.size else np.zeros(1)
        return {
            "tokens": self.tokens,
            "steps": self.steps,
            "total_time_s": self.total_time,
            "tokens_per_s": self.tokens_per_s,
            "latency_mean_s": float(np.mean(self.step_latency)),
            "latency_p50_s": self.latency_percentile(50),
            "latency_p90_s": self.latency_percentile(90),
            "latency_p99_s": self.latency_percentile(99),
            "io_overhead_fraction": self.io_overhead_fraction,
            "compute_fraction": self.compute_fraction,
            "stall_fraction": self.stall_fraction,
            "cache_lookups": self.lookups,
            "cache_hit_rate": self.hit_rate,
            "miss_rate_p50": float(np.percentile(w, 50)),
            "miss_rate_p99": float(np.percentile(w, 99)),
            "bytes_read": self.bytes_read,
            "effective_bandwidth_gbps": self.effective_bandwidth / 1e9,
            "graph_switches": self.graph_switches,
            "graph_switch_cost_s": self.graph_switch_cost,
        }


METRIC_COLUMNS = ("tokens", "steps", "total_time_s", "tokens_per_s", "latency_mean_s", "latency_p50_s",
                  "latency_p90_s", "latency_p99_s", "io_overhead_fraction", "compute_fraction",
                  "stall_fraction", "cache_lookups", "cache_hit_rate", "miss_rate_p50", "miss_rate_p99",
                  "bytes_read", "effective_bandwidth_gbps", "graph_switches", "graph_switch_cost_s")


def metrics_csv(rows: Sequence[tuple[str, RunMetrics]], label: str = "config") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((label,) + METRIC_COLUMNS)
    for name, m in rows:
        s = m.summary()
        w.writerow([name] + [repr(s[c]) if isinstance(s[c], float) else s[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Engine state and split adjustment
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitChange:
    old_batch: int
    new_batch: int
    old_fraction: float
    new_fraction: float
    graph_bytes: int


@dataclass
class EngineState:
    plan: ExecutionPlan
    batch: int
    entry: PlanEntry
    pending_graph: int = 0  # bytes of an NPU graph to load during the next attention block
    switches: list[SplitChange] = field(default_factory=list)

    @classmethod
    def start(cls, plan: ExecutionPlan, batch: int) -> "EngineState":
        return cls(plan, batch, plan.entry(batch))


def adjust_split(state: EngineState, new_batch: int, graph_bytes: int | None = None) -> SplitChange | None:
    """Switch to the plan entry for ``new_batch``; the graph loads during the next attention block."""
    if new_batch == state.batch:
        return None
    entry = state.plan.entry(new_batch)
    change = SplitChange(state.batch, new_batch, state.entry.npu_fraction, entry.npu_fraction,
                         entry.graph.load_bytes if graph_bytes is None else graph_bytes)
    state.batch, state.entry = new_batch, entry
    state.pending_graph = change.graph_bytes
    state.switches.append(change)
    return change


# --------------------------------------------------------------------------
# Decode simulation
# --------------------------------------------------------------------------

class _Decoder:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.hw = cfg.hw
        self.spec = cfg.spec
        self.flags = cfg.flags
        self.lay: FlashLayout = layout(cfg.spec, cfg.dtype)
        self.nb = cfg.neuron_bytes
        gate_b = self.nb // 3
        self.fragment_bytes = {Fragment.GATE: gate_b, Fragment.UPDOWN: self.nb - gate_b}
        self.data_range = self.lay.total_bytes
        self.d = cfg.spec.d_ffn
        self.L = cfg.spec.n_layers
        sched = cfg.batch_schedule
        for b in sorted(set(sched)):
            cfg.plan.entry(b)  # raises PlanError for uncovered batch sizes
        self.state = EngineState.start(cfg.plan, sched[0])
        self.static_resident = np.arange(self.d) < int(round((1.0 - cfg.offload_fraction) * self.d))
        self.cache: NeuronCache | None = None
        self.hot_mask = [np.zeros(self.d, dtype=bool) for _ in range(self.L)]  # resident hot neurons
        self.pending_hot = [np.zeros(0, dtype=np.int64) for _ in range(self.L)]
        if self.flags.cache:
            self.cache = NeuronCache(self._cache_config(self.state.entry))
            self._fill_hot(self.state.entry, initial=True)
            self._fill_cold()
        self._read_cost = {}
        self.events = EventLog() if cfg.record_events else None

        tp = self.hw.core_throughput
        cores = self.hw.compute_cores
        self.ref_tp = tp[cores[0]]
        self.resources = Resources(tuple(Core(f"{c}{i}", tp[c] / self.ref_tp) for i, c in enumerate(cores)),
                                   io_core=self.hw.io_core)

    # -- cache bookkeeping -------------------------------------------------
    def _cache_config(self, entry: PlanEntry) -> CacheConfig:
        b = entry.cache_budget
        return CacheConfig(total_bytes=b.total, fixed_bytes=b.fixed, hot_bytes=b.hot, cold_bytes=b.cold)

    def _hot_capacity(self, entry: PlanEntry) -> int:
        return min(entry.n_hot, entry.cache_budget.hot // (self.L * self.nb)) if self.nb else 0

    def _fill_hot(self, entry: PlanEntry, initial: bool = False) -> None:
        """Re-key the hot region to ``entry``; newly hot neurons become pending prefetches."""
        cache = self.cache
        cache.resize(self._cache_config(entry))
        cache.clear(Region.HOT)
        cap = self._hot_capacity(entry)
        C = self.cfg.hot_cluster_size
        for layer in range(self.L):
            target = entry.hot_sets[layer][:cap]
            for c in range(0, cap, C):
                chunk = target[c:c + C]
                cache.insert(ClusterKey(layer, c // C), chunk.size * self.nb, Region.HOT)
            if initial:
                mask = np.zeros(self.d, dtype=bool)
                mask[target] = True
                self.pending_hot[layer] = np.zeros(0, dtype=np.int64)
            else:
                old = self.hot_mask[layer]
                keep = old[target]
                promote = np.array([not k and len(cache.fragments(NeuronKey(layer, n))) == 2
                                    for n, k in zip(target.tolist(), keep.tolist())], dtype=bool)
                mask = np.zeros(self.d, dtype=bool)
                mask[target[keep | promote]] = True
                # most frequent first, so the likeliest neurons arrive soonest
                self.pending_hot[layer] = target[~(keep | promote)]
                for n in target[promote].tolist():
                    cache.discard(NeuronKey(layer, n))
                # demoted rows are already in memory: they move to the cold region without I/O
                tmask = np.zeros(self.d, dtype=bool)
                tmask[target] = True
                for n in np.flatnonzero(old & ~tmask).tolist():
                    self._insert_cold(NeuronKey(layer, n), dict(self.fragment_bytes))
            self.hot_mask[layer] = mask

    def _fill_cold(self) -> None:
        """Initially resident cold weights: the lowest-index non-hot neurons of each layer."""
        per_layer = self.cache.config.cold_bytes // (self.L * self.nb)
        for layer in range(self.L):
            for n in np.flatnonzero(~self.hot_mask[layer])[:per_layer].tolist():
                self.cache.insert(NeuronKey(layer, n), 0, Region.COLD, dict(self.fragment_bytes))

    def _resident_mask(self, layer: int) -> np.ndarray:
        return self.hot_mask[layer] if self.flags.cache else self.static_resident

    # -- I/O helpers -------------------------------------------------------
    def _rt(self, size: int) -> float:
        t = self._read_cost.get(size)
        if t is None:
            t = read_time(self.hw.io, size, ReadKind.RAND, self.data_range, self.hw.io_core)
            self._read_cost[size] = t
        return t

    def _seq(self, nbytes: int) -> float:
        return sequential_load_time(self.hw.io, nbytes, core=self.hw.io_core)

    def _fits(self, slack: float, limit: int) -> int:
        """Most whole bundles (<= limit) whose sequential load fits in ``slack`` seconds."""
        if slack <= 0:
            return 0
        lo, hi = 0, int(limit)
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self._seq(mid * self.nb) <= slack:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def _neuron_reads(self, need_gate: bool, need_ud: bool) -> tuple[list[int], list[int]]:
        """(gate-phase read sizes, up/down-phase read sizes) for one neuron."""
        lay = self.lay
        if not self.flags.bundle:
            step = -(-lay.slice_bytes // PAGE) * PAGE
            return ([step] if need_gate else []), ([step, step] if need_ud else [])
        if lay.dtype is Dtype.FP16:
            # one contiguous read brings the whole bundle
            return ([lay.aligned_bundle_size] if (need_gate or need_ud) else []), []
        first = min(PAGE, lay.aligned_bundle_size)
        rest = lay.aligned_bundle_size - first
        return ([first] if need_gate else []), ([rest] if need_ud and rest else [])

    # -- one layer ---------------------------------------------------------
    def layer(self, layer: int, batch: int, activated: np.ndarray, updown: np.ndarray):
        cfg, hw, flags = self.cfg, self.hw, self.flags
        entry = self.state.entry
        xpu = flags.xpu
        d_model = self.spec.d_model
        slice_b = self.lay.slice_bytes if self.lay.dtype is not Dtype.FP16 else 2 * d_model

        attn = hw.attention_time(batch, hybrid=xpu)
        io_att = 0.0
        graph_delay = 0.0
        bytes_read = 0
        if layer == 0 and self.state.pending_graph:
            g = self._seq(self.state.pending_graph)
            io_att += g
            graph_delay = max(0.0, g - attn)
            bytes_read += self.state.pending_graph
            self.state.pending_graph = 0
        hot = entry.hot_sets[layer]
        is_hot = np.zeros(self.d, dtype=bool)
        is_hot[hot] = True
        if self.flags.cache:
            # hot rows past the hot region's capacity are never cached
            beyond = np.zeros(self.d, dtype=bool)
            beyond[hot[self._hot_capacity(entry):]] = True
        else:
            beyond = is_hot & ~self.static_resident
        if xpu:
            streamed = int(np.count_nonzero(beyond))
            if streamed:
                io_att += self._seq(streamed * self.nb)
                bytes_read += streamed * self.nb
        pend = self.pending_hot[layer]
        if pend.size:
            # hot-set refresh uses only the I/O slack left in this attention block
            n = self._fits(attn - io_att, pend.size)
            if n:
                io_att += self._seq(n * self.nb)
                bytes_read += n * self.nb
                self.hot_mask[layer][pend[:n]] = True
                self.pending_hot[layer] = pend = pend[n:]
        resident = self._resident_mask(layer)
        if pend.size:
            # not yet loaded: handled on the cold path this step
            is_hot[pend] = False

        # lookups: every activated neuron
        act = np.asarray(activated, dtype=np.int64)
        ud_mask = np.zeros(self.d, dtype=bool)
        ud_mask[updown] = True
        lookups = int(act.size)
        hits = int(np.count_nonzero(resident[act]))

        cpu_set = act[~is_hot[act]] if xpu else act
        cpu_res = resident[cpu_set]
        C = cfg.cold_cluster_size
        n_cores = len(self.resources.compute_cores)
        elem_rate = self.ref_tp
        raw = []  # per cluster: (gc_bytes, gc_elems, ud_bytes, ud_elems, gio, udio)
        cache = self.cache
        compute_bytes = 0
        for start in range(0, cpu_set.size, C):
            ids = cpu_set[start:start + C]
            res = cpu_res[start:start + C]
            gio = udio = 0.0
            n_ud = 0
            for n, r in zip(ids.tolist(), res.tolist()):
                need_ud = bool(ud_mask[n])
                n_ud += need_ud
                if r:
                    continue
                have_gate = have_ud = False
                if cache is not None:
                    key = NeuronKey(layer, n)
                    frags = cache.fragments(key)
                    have_gate = Fragment.GATE in frags
                    have_ud = Fragment.UPDOWN in frags
                    phase = LookupPhase.WHOLE if need_ud else LookupPhase.GATE
                    if cache.lookup(key, phase) is Outcome.HIT:
                        hits += 1
                        continue
                g_ops, u_ops = self._neuron_reads(not have_gate, need_ud and not have_ud)
                if flags.coactivation and flags.bundle and g_ops:
                    # read the neighbouring bundle in the same request
                    g_ops = [2 * self.lay.aligned_bundle_size]
                    u_ops = []
                gio += sum(self._rt(s) for s in g_ops)
                udio += sum(self._rt(s) for s in u_ops)
                nread = sum(g_ops) + sum(u_ops)
                bytes_read += nread
                if cache is not None and cfg.offload_fraction > 0:
                    self._admit(layer, n, g_ops, u_ops)
            gc_bytes = ids.size * slice_b
            ud_bytes = n_ud * 2 * slice_b
            compute_bytes += gc_bytes + ud_bytes
            raw.append((gc_bytes, ids.size * d_model * batch, ud_bytes, n_ud * 2 * d_model * batch, gio, udio))

        solo_bw = hw.cpu_only_bw / n_cores
        shared_bw = hw.shared_bandwidth()[0] / n_cores

        def schedule(bw_of):
            """Simulate the cold clusters; ``bw_of(cluster, stage)`` gives the per-core bandwidth."""
            clusters = [ClusterSpec(gc_work=max(gb / bw_of(i, "GC"), ge / elem_rate),
                                    udc_work=max(ub / bw_of(i, "UDC"), ue / elem_rate),
                                    gio_time=gio, udio_time=udio)
                        for i, (gb, ge, ub, ue, gio, udio) in enumerate(raw)]
            matrices = [clusters[i:i + cfg.clusters_per_matrix]
                        for i in range(0, len(clusters), cfg.clusters_per_matrix)]
            return run_policy(matrices, self.resources, flags.pipeline) if matrices else None

        t_npu = 0.0
        if xpu and hot.size:
            # Pass 1: CPU at its shared rate throughout; the NPU streams at its
            # share while a CPU core is busy and at its solo cap otherwise.
            plog = schedule(lambda i, st: shared_bw)
            nbytes = int(hot.size) * self.nb
            compute_bytes += nbytes
            busy = _union([(s, e) for s, e, r, _, _ in plog.intervals() if r != "io"]) if plog else []
            tb = _fluid_time(nbytes, busy, hw.shared_bandwidth()[1], hw.npu_only_bw)
            t_npu = max(tb, hot.size * 3 * d_model * batch / hw.core_throughput["npu"])
            # Pass 2: CPU stages that started after the NPU finished get the solo rate.
            if plog is not None:
                starts = {(task, stage): s0 for s0, _, r, task, stage in plog.intervals() if r != "io"}
                plog = schedule(lambda i, st: solo_bw if starts.get((i, st), 0.0) >= t_npu else shared_bw)
        else:
            plog = schedule(lambda i, st: solo_bw)
        t_cpu = plog.makespan if plog else 0.0

        ffn_start = max(attn, io_att)
        total = ffn_start + max(t_cpu, t_npu)
        comp = [(0.0, attn)]
        ios = [(0.0, io_att)] if io_att > 0 else []
        if t_npu > 0:
            comp.append((ffn_start, ffn_start + t_npu))
        if plog is not None:
            for s, e, resname, task, stage in plog.intervals():
                (ios if resname == "io" else comp).append((ffn_start + s, ffn_start + e))
        cu, iu = _union(comp), _union(ios)
        c_time = _measure(cu)
        io_only = _measure(iu) - _intersect(cu, iu)
        if self.events is not None:
            self._record(layer, batch, attn, io_att, ffn_start, t_npu, plog)
        return dict(time=total, compute=c_time, io_only=io_only, lookups=lookups, hits=hits,
                    bytes_read=bytes_read, compute_bytes=compute_bytes, graph_delay=graph_delay)

    def _admit(self, layer: int, n: int, g_ops, u_ops) -> None:
        """Cache what was just read; memory holds slices, not flash pages."""
        sizes = self.fragment_bytes
        if self.flags.coactivation and g_ops:
            partner = n ^ 1
            if partner < self.d:
                self._insert_cold(NeuronKey(layer, partner), dict(sizes))
            self._insert_cold(NeuronKey(layer, n), dict(sizes))
            return
        frags = {}
        if g_ops:
            frags[Fragment.GATE] = sizes[Fragment.GATE]
        if u_ops:
            frags[Fragment.UPDOWN] = sizes[Fragment.UPDOWN]
        if frags:
            self._insert_cold(NeuronKey(layer, n), frags)

    def _insert_cold(self, key: NeuronKey, frags: dict) -> None:
        size = sum(frags.values()) + sum(self.cache_fragment_sizes(key))
        if size > self.cache.config.cold_bytes:
            return
        self.cache.insert(key, 0, Region.COLD, frags)

    def cache_fragment_sizes(self, key: NeuronKey) -> list[int]:
        have = self.cache.fragments(key)
        return [b for f, b in self.fragment_bytes.items() if f in have]

    def _record(self, layer, batch, attn, io_att, ffn_start, t_npu, plog) -> None:
        base = self._clock
        ev = self.events.events
        ev.append(Event(base, "attn", layer, "Attention", "start"))
        ev.append(Event(base + attn, "attn", layer, "Attention", "end"))
        if io_att > 0:
            ev.append(Event(base, "io", layer, "Prefetch", "start"))
            ev.append(Event(base + io_att, "io", layer, "Prefetch", "end"))
        if t_npu > 0:
            ev.append(Event(base + ffn_start, "npu", layer, "HotFFN", "start"))
            ev.append(Event(base + ffn_start + t_npu, "npu", layer, "HotFFN", "end"))
        if plog is not None:
            for e in plog.events:
                ev.append(Event(base + ffn_start + e.time, e.resource, e.task, e.stage, e.kind))

    # -- run ---------------------------------------------------------------
    def run(self) -> tuple[RunMetrics, EventLog | None]:
        by_token = sorted(self.cfg.trace.by_token().items())
        lat, bat, npu_f, windows = [], [], [], []
        tot = dict(compute=0.0, io_only=0.0, lookups=0, hits=0, bytes_read=0, compute_bytes=0, graph_delay=0.0)
        self._clock = 0.0
        tokens = 0
        for _, entries in by_token:
            b = entries[0].batch_size
            change = adjust_split(self.state, b)
            if change is not None:
                if self.events is not None:
                    self.events.events.append(Event(self._clock, "npu", -1, f"graph:{change.new_batch}", "switch"))
                if self.cache is not None:
                    self._fill_hot(self.state.entry)
            if not self.flags.xpu:
                self.state.pending_graph = 0
            step_t = 0.0
            w_look = w_hit = 0
            for e in sorted(entries, key=lambda e: e.layer_index):
                r = self.layer(e.layer_index, b, e.activated, e.updown)
                self._clock += r["time"]
                step_t += r["time"]
                w_look += r["lookups"]
                w_hit += r["hits"]
                for k in tot:
                    tot[k] += r[k]
            lat.append(step_t)
            bat.append(b)
            npu_f.append(self.state.entry.npu_fraction if self.flags.xpu else 0.0)
            windows.append((w_look - w_hit) / w_look if w_look else 0.0)
            tokens += b
        total = float(sum(lat))
        metrics = RunMetrics(
            tokens=tokens, steps=len(lat), total_time=total,
            step_latency=np.array(lat), step_batch=np.array(bat),
            compute_time=tot["compute"], io_overhead_time=tot["io_only"],
            stall_time=_residual(total, tot["compute"], tot["io_only"]),
            lookups=tot["lookups"], hits=tot["hits"], window_miss_rates=np.array(windows),
            bytes_read=tot["bytes_read"], compute_bytes=tot["compute_bytes"],
            graph_switches=len(self.state.switches), graph_switch_cost=tot["graph_delay"],
            npu_fraction=np.array(npu_f),
        )
        if self.events is not None:
            # per-layer records interleave resources; stable sort keeps start/end order at ties
            self.events.events.sort(key=lambda e: e.time)
            self.events.makespan = total
        return metrics, self.events


def _residual(total: float, compute: float, io_only: float) -> float:
    """Stall time; float round-off below 1e-12 of the total is treated as zero."""
    r = total - compute - io_only
    return 0.0 if abs(r) <= 1e-12 * max(total, 1e-300) else max(0.0, r)


def _fluid_time(nbytes: float, busy: list[tuple[float, float]], shared: float, solo: float) -> float:
    """Time to stream ``nbytes`` at ``shared`` rate inside ``busy`` intervals and ``solo`` outside."""
    t = done = 0.0
    for s, e in busy:
        if s > t:  # solo gap before this interval
            if done + (s - t) * solo >= nbytes:
                return t + (nbytes - done) / solo
            done += (s - t) * solo
            t = s
        if done + (e - t) * shared >= nbytes:
            return t + (nbytes - done) / shared
        done += (e - t) * shared
        t = e
    return t + (nbytes - done) / solo


def simulate_decode(cfg: RunConfig) -> tuple[RunMetrics, EventLog | None]:
    return _Decoder(cfg).run()


def run_ablation(cfg: RunConfig, steps: Sequence[tuple[str, PolicyFlags]] = ABLATION_STEPS
                 ) -> list[tuple[str, RunMetrics]]:
    """Run the incremental-optimization configurations in order."""
    return [(name, simulate_decode(replace(cfg, flags=flags, record_events=False))[0]) for name, flags in steps]


# --------------------------------------------------------------------------
# Prefill
# --------------------------------------------------------------------------

@dataclass
class PrefillMetrics:
    prompt_len: int
    total_time: float
    layer_compute: np.ndarray
    layer_load: np.ndarray
    layer_time: np.ndarray  # per layer: time from its start to the next layer's start (last: its compute)
    first_load: float

    @property
    def tokens_per_s(self) -> float:
        return self.prompt_len / self.total_time

    @property
    def hidden(self) -> np.ndarray:
        """hidden[l]: layer l's weights finished loading while layer l-1 computed (l >= 1)."""
        h = np.zeros(self.layer_load.size, dtype=bool)
        h[1:] = self.layer_load[1:] <= self.layer_compute[:-1]
        return h

    @property
    def io_overhead_time(self) -> float:
        return self.first_load + float(np.sum(np.maximum(0.0, self.layer_load[1:] - self.layer_compute[:-1])))

    @property
    def io_overhead_fraction(self) -> float:
        return self.io_overhead_time / self.total_time

    def summary(self) -> dict:
        return {"prompt_len": self.prompt_len, "total_time_s": self.total_time,
                "tokens_per_s": self.tokens_per_s, "first_load_s": self.first_load,
                "io_overhead_fraction": self.io_overhead_fraction,
                "layers_hidden_after_first": bool(np.all(self.hidden[1:]))}


def preload_time(hw: HardwareProfile, nbytes: int, sequential: bool = True, data_range: int | None = None) -> float:
    """Time for one big core to load ``nbytes`` as 512KB sequential or 4KB random reads."""
    if sequential:
        return sequential_load_time(hw.io, nbytes, core=hw.io_core)
    n = -(-int(nbytes) // PAGE)
    kw = {} if data_range is None else {"data_range": data_range}
    return n * read_time(hw.io, PAGE, ReadKind.RAND, core=hw.io_core, **kw)


def simulate_prefill(cfg: RunConfig, prompt_len: int, sequential: bool = True) -> PrefillMetrics:
    """NPU-dense prefill with next-layer weights preloaded during the current layer."""
    if prompt_len < 1:
        raise ConstraintError("prompt_len must be >= 1")
    hw, spec = cfg.hw, cfg.spec
    L = spec.n_layers
    layer_bytes = spec.d_ffn * cfg.neuron_bytes
    elements = spec.d_ffn * 3 * spec.d_model
    ffn = max(layer_bytes / hw.npu_only_bw, elements * prompt_len / hw.core_throughput["npu"])
    compute = np.full(L, hw.attention_time(prompt_len, hybrid=True) + ffn)
    offloaded = int(round(cfg.offload_fraction * layer_bytes))
    load = np.full(L, preload_time(hw, offloaded, sequential, layout(spec, cfg.dtype).total_bytes))
    times = np.empty(L)
    for i in range(L):
        times[i] = max(compute[i], load[i + 1]) if i + 1 < L else compute[i]
    total = float(load[0] + times.sum())
    return PrefillMetrics(prompt_len, total, compute, load, times, float(load[0]))


def summary_json(metrics: RunMetrics | PrefillMetrics) -> str:
    return json.dumps(metrics.summary(), sort_keys=True, indent=2)
