"""Offline execution-plan generation.

The planner profiles per-batch-size activation frequencies from a trace,
ranks neurons per layer, and chooses how many of the most frequent ones the
NPU should compute densely.  The binding constraint: whatever part of a
layer's hot set is not resident in the cache must stream in sequentially
within that layer's attention block (together with any NPU graph reload).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, ConstraintError, PlanError
from .hardware import HardwareProfile
from .model import ActivationTrace, Dtype
from .quant import bundle_bytes
from .storage import KB, read_time, ReadKind, sequential_load_time

log = logging.getLogger(__name__)

PLAN_VERSION = 1


@dataclass
class NeuronStats:
    """Activation frequency per batch size, shape (n_layers, d_ffn)."""

    n_layers: int
    d_ffn: int
    frequency: dict[int, np.ndarray] = field(default_factory=dict)
    token_count: dict[int, int] = field(default_factory=dict)

    def batch_sizes(self) -> list[int]:
        return sorted(self.frequency)

    def get(self, batch: int) -> np.ndarray:
        if batch not in self.frequency:
            raise PlanError(f"no activation statistics for batch size {batch}")
        return self.frequency[batch]


def profile(trace: ActivationTrace) -> NeuronStats:
    if len(trace) == 0:
        raise ConstraintError("cannot profile an empty trace")
    counts: dict[int, np.ndarray] = {}
    seen: dict[tuple[int, int], int] = {}  # (batch, layer) -> entries
    tokens: dict[int, set] = {}
    for e in trace:
        c = counts.setdefault(e.batch_size, np.zeros((trace.n_layers, trace.d_ffn), dtype=np.int64))
        c[e.layer_index, e.activated] += 1
        seen[(e.batch_size, e.layer_index)] = seen.get((e.batch_size, e.layer_index), 0) + 1
        tokens.setdefault(e.batch_size, set()).add(e.token_index)
    stats = NeuronStats(trace.n_layers, trace.d_ffn)
    for b, c in counts.items():
        denom = np.array([max(seen.get((b, layer), 0), 1) for layer in range(trace.n_layers)])
        stats.frequency[b] = c / denom[:, None]
        stats.token_count[b] = len(tokens[b])
    return stats


def frequency_order(freq: np.ndarray) -> np.ndarray:
    """Indices by descending frequency; ties go to the lower index."""
    return np.lexsort((np.arange(freq.size), -freq))


@dataclass(frozen=True)
class PlannerConfig:
    d_model: int = 4096
    dtype: Dtype = Dtype.INT4_GROUP
    cache_total_bytes: int = 0       # 0: everything fits
    fixed_bytes: int = 0             # attention weights + KV cache
    npu_fraction_min: float = 0.5    # target at batch 1
    npu_fraction_max: float = 0.7    # target from ``target_ref_batch`` on
    target_ref_batch: int = 4
    seq_chunk: int = 512 * KB

    def __post_init__(self):
        object.__setattr__(self, "dtype", Dtype(self.dtype))
        if not 0 <= self.npu_fraction_min <= self.npu_fraction_max <= 1:
            raise ConstraintError("need 0 <= npu_fraction_min <= npu_fraction_max <= 1")
        if self.target_ref_batch < 1:
            raise ConstraintError("target_ref_batch must be >= 1")

    @property
    def neuron_bytes(self) -> int:
        """Resident size of one neuron's Gate/Up/Down weights."""
        dtype = self.dtype if self.dtype in (Dtype.FP16, Dtype.INT4_GROUP) else Dtype.INT4_GROUP
        return bundle_bytes(self.d_model, dtype)[0]

    def target_fraction(self, batch: int) -> float:
        if self.target_ref_batch == 1:
            return self.npu_fraction_max
        return float(np.interp(batch, [1, self.target_ref_batch],
                               [self.npu_fraction_min, self.npu_fraction_max]))


def graph_load_time(hw: HardwareProfile) -> float:
    return read_time(hw.io, hw.graph_bytes, ReadKind.SEQ, core=hw.io_core)


def hot_load_time(hw: HardwareProfile, cfg: PlannerConfig, n_hot: int, resident_bytes: int) -> float:
    """Sequential time to stream the non-resident part of one layer's hot set."""
    missing = max(0, n_hot * cfg.neuron_bytes - int(resident_bytes))
    return sequential_load_time(hw.io, missing, cfg.seq_chunk, hw.io_core)


def hot_capacity(hw: HardwareProfile, cfg: PlannerConfig, batch: int, d_ffn: int,
                 resident_bytes: int = 0) -> tuple[int, bool]:
    """Largest per-layer hot count whose prefetch hides in attention, and feasibility flag."""
    budget = hw.attention_time(batch) - graph_load_time(hw)
    if budget < 0:
        return 0, False
    lo, hi = 0, d_ffn
    if hot_load_time(hw, cfg, hi, resident_bytes) <= budget:
        return hi, True
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if hot_load_time(hw, cfg, mid, resident_bytes) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo, True


@dataclass(frozen=True)
class Classification:
    hot: list[np.ndarray]   # per layer, descending frequency
    cold: list[np.ndarray]  # per layer, ascending index
    feasible: bool

    @property
    def hot_fraction(self) -> float:
        total = sum(h.size + c.size for h, c in zip(self.hot, self.cold))
        return sum(h.size for h in self.hot) / total if total else 0.0


def classify(stats: NeuronStats, hw: HardwareProfile, batch: int, cfg: PlannerConfig | None = None,
             *, resident_bytes: int = 0, min_frequency: float = 0.0,
             limit: int | None = None) -> Classification:
    """Greedy most-frequent-first take while the prefetch of the hot set fits in attention.

    ``min_frequency`` additionally stops the take at neurons that fire less
    often than that (0 means feasibility alone decides); ``limit`` caps the
    per-layer count.
    """
    cfg = cfg or PlannerConfig()
    freq = stats.get(batch)
    capacity, feasible = hot_capacity(hw, cfg, batch, stats.d_ffn, resident_bytes)
    if not feasible:
        log.warning("batch %d: NPU graph load alone exceeds attention time; hot set left empty", batch)
    if limit is not None:
        capacity = min(capacity, limit)
    hot, cold = [], []
    for layer in range(stats.n_layers):
        order = frequency_order(freq[layer])
        eligible = int(np.count_nonzero(freq[layer] >= min_frequency)) if min_frequency > 0 else stats.d_ffn
        k = min(capacity, eligible)
        hot.append(order[:k].copy())
        cold.append(np.sort(order[k:]))
    return Classification(hot, cold, feasible)


# --------------------------------------------------------------------------
# Execution plan
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CacheBudget:
    fixed: int
    hot: int
    cold: int

    @property
    def total(self) -> int:
        return self.fixed + self.hot + self.cold


@dataclass(frozen=True)
class GraphDescriptor:
    batch: int
    rows: int
    d_model: int
    load_bytes: int


@dataclass(frozen=True)
class PlanEntry:
    batch: int
    hot_sets: tuple[np.ndarray, ...]  # per layer, descending frequency at ``batch``
    npu_fraction: float
    cache_budget: CacheBudget
    graph: GraphDescriptor
    feasible: bool = True

    @property
    def n_hot(self) -> int:
        return int(self.hot_sets[0].size) if self.hot_sets else 0


@dataclass
class ExecutionPlan:
    n_layers: int
    d_ffn: int
    d_model: int
    dtype: Dtype
    entries: dict[int, PlanEntry] = field(default_factory=dict)
    version: int = PLAN_VERSION

    def entry(self, batch: int) -> PlanEntry:
        try:
            return self.entries[batch]
        except KeyError:
            raise PlanError(f"execution plan has no entry for batch size {batch}") from None

    def batch_sizes(self) -> list[int]:
        return sorted(self.entries)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "n_layers": self.n_layers,
            "d_ffn": self.d_ffn,
            "d_model": self.d_model,
            "dtype": self.dtype.value,
            "entries": {
                str(b): {
                    "batch": e.batch,
                    "npu_fraction": e.npu_fraction,
                    "feasible": e.feasible,
                    "cache_budget": {"fixed": e.cache_budget.fixed, "hot": e.cache_budget.hot,
                                     "cold": e.cache_budget.cold},
                    "npu_graph": {"batch": e.graph.batch, "rows": e.graph.rows,
                                  "d_model": e.graph.d_model, "load_bytes": e.graph.load_bytes},
                    "hot_sets": [h.tolist() for h in e.hot_sets],
                }
                for b, e in sorted(self.entries.items())
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ExecutionPlan":
        if data.get("version") != PLAN_VERSION:
            raise ConfigError(f"unsupported plan version {data.get('version')!r}")
        plan = cls(int(data["n_layers"]), int(data["d_ffn"]), int(data["d_model"]), Dtype(data["dtype"]))
        for key, e in data["entries"].items():
            b = int(key)
            cb, g = e["cache_budget"], e["npu_graph"]
            plan.entries[b] = PlanEntry(
                batch=b,
                hot_sets=tuple(np.asarray(h, dtype=np.int64) for h in e["hot_sets"]),
                npu_fraction=float(e["npu_fraction"]),
                cache_budget=CacheBudget(int(cb["fixed"]), int(cb["hot"]), int(cb["cold"])),
                graph=GraphDescriptor(int(g["batch"]), int(g["rows"]), int(g["d_model"]), int(g["load_bytes"])),
                feasible=bool(e.get("feasible", True)),
            )
        return plan

    @classmethod
    def loads(cls, text: str) -> "ExecutionPlan":
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed plan: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExecutionPlan":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"plan not found: {path}")
        return cls.loads(path.read_text())


def generate_plan(stats: NeuronStats, hw: HardwareProfile, batch_sizes: Iterable[int],
                  cfg: PlannerConfig | None = None) -> ExecutionPlan:
    cfg = cfg or PlannerConfig()
    batch_sizes = sorted(set(int(b) for b in batch_sizes))
    if not batch_sizes:
        raise ConstraintError("batch_sizes must not be empty")
    B = cfg.neuron_bytes
    d_ffn, n_layers = stats.d_ffn, stats.n_layers
    ffn_total = n_layers * d_ffn * B
    if cfg.cache_total_bytes:
        ffn_budget = max(0, cfg.cache_total_bytes - cfg.fixed_bytes)
    else:
        ffn_budget = ffn_total
    plan = ExecutionPlan(n_layers, d_ffn, cfg.d_model, cfg.dtype)
    for b in batch_sizes:
        target = cfg.target_fraction(b)
        k_target = int(round(target * d_ffn))
        resident = min(k_target * B, ffn_budget // n_layers)
        cls_ = classify(stats, hw, b, cfg, resident_bytes=resident, limit=k_target)
        k = cls_.hot[0].size
        hot_bytes = min(ffn_budget, n_layers * k * B)
        plan.entries[b] = PlanEntry(
            batch=b,
            hot_sets=tuple(cls_.hot),
            npu_fraction=k / d_ffn,
            cache_budget=CacheBudget(cfg.fixed_bytes, hot_bytes, ffn_budget - hot_bytes),
            graph=GraphDescriptor(b, k, cfg.d_model, hw.graph_bytes),
            feasible=cls_.feasible,
        )
    return plan


def plan_feasible(plan: ExecutionPlan, hw: HardwareProfile, cfg: PlannerConfig | None = None) -> bool:
    """Every entry's non-resident hot prefetch (plus graph load) fits in attention."""
    cfg = cfg or PlannerConfig(d_model=plan.d_model, dtype=plan.dtype)
    for b, e in plan.entries.items():
        resident = e.cache_budget.hot // plan.n_layers
        t = hot_load_time(hw, cfg, e.n_hot, resident) + graph_load_time(hw)
        if e.n_hot and t > hw.attention_time(b) * (1 + 1e-12):
            return False
    return True
