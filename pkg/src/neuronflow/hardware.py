"""Hardware profile: compute throughputs, memory-bandwidth caps, I/O model, attention cost."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ConstraintError
from .storage import IOModelParams, default_profile

GB = 1e9
KB = 1024

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class HardwareProfile:
    """A phone SoC as seen by the simulator.

    Throughputs are weight elements multiplied per second (one element per
    token in the batch).  Bandwidth caps are bytes/s of DRAM traffic when the
    CPU works alone, the NPU works alone, or both work together.  Attention
    cost per layer is ``attention_base_s + attention_per_batch_s * batch`` on
    the NPU; other placements scale it by the bandwidth they can draw.
    """

    core_throughput: dict = field(default_factory=lambda: {
        "big": 30e9, "mid": 25e9, "little": 10e9, "npu": 5e12})
    compute_cores: tuple = ("mid", "mid", "mid", "mid")
    io_core: str = "big"
    cpu_only_bw: float = 43.9 * GB
    npu_only_bw: float = 56.0 * GB
    combined_bw: float = 59.6 * GB
    io: IOModelParams = field(default_factory=default_profile)
    attention_base_s: float = 470e-6
    attention_per_batch_s: float = 20e-6
    npu_attention_min_batch: int = 4
    graph_bytes: int = 10 * KB

    def __post_init__(self):
        tp = {str(k): float(v) for k, v in dict(self.core_throughput).items()}
        for key in ("big", "mid", "little", "npu"):
            if tp.get(key, 0.0) <= 0:
                raise ConstraintError(f"core throughput for {key!r} must be > 0")
        object.__setattr__(self, "core_throughput", tp)
        cores = tuple(str(c) for c in self.compute_cores)
        if not cores:
            raise ConstraintError("at least one compute core is required")
        for c in cores + (self.io_core,):
            if c not in ("big", "mid", "little"):
                raise ConstraintError(f"unknown CPU core type {c!r}")
        object.__setattr__(self, "compute_cores", cores)
        if min(self.cpu_only_bw, self.npu_only_bw, self.combined_bw) <= 0:
            raise ConstraintError("bandwidth caps must be > 0")
        if self.combined_bw < max(self.cpu_only_bw, self.npu_only_bw):
            raise ConstraintError("combined bandwidth cap must be >= each solo cap")
        if self.attention_base_s < 0 or self.attention_per_batch_s < 0:
            raise ConstraintError("attention coefficients must be >= 0")

    # -- attention ---------------------------------------------------------
    def attention_time(self, batch: int, hybrid: bool = True) -> float:
        """Per-layer attention time for one decode step."""
        npu_time = self.attention_base_s + self.attention_per_batch_s * batch
        if not hybrid:
            return npu_time * self.npu_only_bw / self.cpu_only_bw
        if batch >= self.npu_attention_min_batch:
            return npu_time
        # heads split across CPU and NPU draw the combined bandwidth
        return npu_time * self.npu_only_bw / self.combined_bw

    # -- bandwidth sharing -------------------------------------------------
    def shared_bandwidth(self) -> tuple[float, float]:
        """(cpu, npu) allocation while both units stream weights.

        Proportional to each unit's solo cap, scaled so the sum is the combined cap.
        """
        total = self.cpu_only_bw + self.npu_only_bw
        return (self.combined_bw * self.cpu_only_bw / total,
                self.combined_bw * self.npu_only_bw / total)

    @property
    def cpu_throughput(self) -> float:
        return sum(self.core_throughput[c] for c in self.compute_cores)

    def to_dict(self) -> dict:
        return {
            "compute": {
                "core_throughput": dict(self.core_throughput),
                "compute_cores": list(self.compute_cores),
                "io_core": self.io_core,
            },
            "memory": {
                "cpu_only_gbps": self.cpu_only_bw / GB,
                "npu_only_gbps": self.npu_only_bw / GB,
                "combined_gbps": self.combined_bw / GB,
            },
            "attention": {
                "base_s": self.attention_base_s,
                "per_batch_s": self.attention_per_batch_s,
                "npu_min_batch": self.npu_attention_min_batch,
                "graph_bytes": self.graph_bytes,
            },
            "io": self.io.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareProfile":
        try:
            kw = {}
            comp = data.get("compute", {})
            if "core_throughput" in comp:
                kw["core_throughput"] = {**cls().core_throughput, **comp["core_throughput"]}
            if "compute_cores" in comp:
                kw["compute_cores"] = tuple(comp["compute_cores"])
            if "io_core" in comp:
                kw["io_core"] = comp["io_core"]
            mem = data.get("memory", {})
            for src, dst in (("cpu_only_gbps", "cpu_only_bw"), ("npu_only_gbps", "npu_only_bw"),
                             ("combined_gbps", "combined_bw")):
                if src in mem:
                    kw[dst] = float(mem[src]) * GB
            att = data.get("attention", {})
            for src, dst in (("base_s", "attention_base_s"), ("per_batch_s", "attention_per_batch_s"),
                             ("npu_min_batch", "npu_attention_min_batch"), ("graph_bytes", "graph_bytes")):
                if src in att:
                    kw[dst] = att[src]
            if "io" in data:
                kw["io"] = IOModelParams.from_dict(data["io"])
            return cls(**kw)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad hardware profile: {exc}") from exc


def load_profile(path: str | Path) -> HardwareProfile:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"hardware profile not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return HardwareProfile.from_dict(data)
