"""UFS read-cost model and on-flash neuron bundle layout.

Bandwidth comes from anchor tables interpolated linearly in log-log space
and clamped at the table ends.  Sequential reads depend on block size only;
random reads also depend on the byte range the reads are scattered over.
The issuing CPU core scales everything by its ``core_coeff``.

Units: block sizes and ranges in bytes (KB = 1024), bandwidth in bytes/s
(MB/s = 1e6 B/s), time in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConstraintError
from .model import Dtype, ModelSpec
from .quant import PAGE, bundle_bytes, int4_slice_bytes

KB = 1024
MB_RANGE = 1024 * 1024  # data ranges are binary megabytes
MBps = 1e6
GBps = 1e9


class ReadKind(str, Enum):
    SEQ = "seq"
    RAND = "rand"


class CoreType(str, Enum):
    BIG = "big"
    MID = "mid"
    LITTLE = "little"


class ReadPhase(str, Enum):
    GATE = "Gate"
    UPDOWN = "UpDown"
    WHOLE = "Whole"
    SLICE = "Slice"      # one matrix row/column of a non-bundled layout
    PREFETCH = "Prefetch"


Curve = tuple[tuple[int, float], ...]


def _check_curve(curve: Sequence[tuple[float, float]], name: str) -> Curve:
    pts = tuple(sorted((int(b), float(bw)) for b, bw in curve))
    if not pts:
        raise ConstraintError(f"{name}: empty anchor table")
    if any(b <= 0 or bw <= 0 for b, bw in pts):
        raise ConstraintError(f"{name}: anchors must be positive")
    if len({b for b, _ in pts}) != len(pts):
        raise ConstraintError(f"{name}: duplicate block sizes")
    return pts


def _loglog(curve: Curve, x: float) -> float:
    xs = np.log([b for b, _ in curve])
    ys = np.log([bw for _, bw in curve])
    return float(np.exp(np.interp(np.log(x), xs, ys)))


@dataclass(frozen=True)
class IOModelParams:
    seq_bw_curve: Curve
    rand_bw_curve: tuple[tuple[int, Curve], ...]  # (data_range, curve) sorted by range
    core_coeff: dict = field(default_factory=lambda: {c.value: 1.0 for c in CoreType})
    single_queue: bool = True
    concurrency_penalty: float = 0.4
    calibrated_anchors: tuple[str, ...] = ()

    def __post_init__(self):
        seq = _check_curve(self.seq_bw_curve, "seq_bw_curve")
        bws = [bw for _, bw in seq]
        if any(b2 < b1 for b1, b2 in zip(bws, bws[1:])):
            raise ConstraintError("sequential bandwidth must be non-decreasing in block size")
        object.__setattr__(self, "seq_bw_curve", seq)

        ranges = tuple(sorted((int(r), _check_curve(c, f"rand@{r}")) for r, c in self.rand_bw_curve))
        if not ranges:
            raise ConstraintError("rand_bw_curve needs at least one data range")
        grid = [b for b, _ in ranges[0][1]]
        for (_, c1), (_, c2) in zip(ranges, ranges[1:]):
            if [b for b, _ in c2] != grid:
                raise ConstraintError("all random-read ranges must share one block-size grid")
            if any(bw2 > bw1 for (_, bw1), (_, bw2) in zip(c1, c2)):
                raise ConstraintError("random bandwidth must be non-increasing in data range")
        object.__setattr__(self, "rand_bw_curve", ranges)

        coeff = {CoreType(k).value: float(v) for k, v in dict(self.core_coeff).items()}
        if abs(coeff.get("big", 0.0) - 1.0) > 1e-12:
            raise ConstraintError("core_coeff must be normalized so big == 1.0")
        if any(v <= 0 for v in coeff.values()):
            raise ConstraintError("core coefficients must be positive")
        object.__setattr__(self, "core_coeff", coeff)
        if not self.single_queue:
            raise ConstraintError("UFS exposes a single command queue")
        if not 0.0 <= self.concurrency_penalty < 1.0:
            raise ConstraintError("concurrency_penalty must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "seq": [[b, bw] for b, bw in self.seq_bw_curve],
            "rand": [{"range": r, "anchors": [[b, bw] for b, bw in c]} for r, c in self.rand_bw_curve],
            "core_coeff": dict(self.core_coeff),
            "concurrency_penalty": self.concurrency_penalty,
            "calibrated_anchors": list(self.calibrated_anchors),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IOModelParams":
        return cls(
            seq_bw_curve=tuple(tuple(p) for p in data["seq"]),
            rand_bw_curve=tuple((int(r["range"]), tuple(tuple(p) for p in r["anchors"]))
                                for r in data["rand"]),
            core_coeff=dict(data.get("core_coeff", {"big": 1.0})),
            concurrency_penalty=float(data.get("concurrency_penalty", 0.4)),
            calibrated_anchors=tuple(data.get("calibrated_anchors", ())),
        )


# Big-core 4KB random reads over 128MB; the little/mid ratios follow from it.
BIG_4K_RAND = 1076.10 * MBps
MID_4K_RAND = 1007.95 * MBps
LITTLE_4K_RAND = 761.87 * MBps


def default_profile() -> IOModelParams:
    """UFS 4.0 anchors.

    Measured anchors: seq 4KB 450MB/s and 512KB 4GB/s; rand 512KB 3.5GB/s
    and 4KB 1076.10MB/s over a 128MB range; per-core 4KB throughput.
    Calibrated anchors (listed in ``calibrated_anchors``) fill the table:
    8KB random reads are set slow enough that two 4KB reads beat one 8KB
    read, and the 512MB row sits below 850MB/s at 4KB.
    """
    return IOModelParams(
        seq_bw_curve=((4 * KB, 450 * MBps), (512 * KB, 4 * GBps)),
        rand_bw_curve=(
            (128 * MB_RANGE, ((4 * KB, BIG_4K_RAND), (8 * KB, 650 * MBps), (512 * KB, 3.5 * GBps))),
            (512 * MB_RANGE, ((4 * KB, 820 * MBps), (8 * KB, 600 * MBps), (512 * KB, 3.4 * GBps))),
        ),
        core_coeff={
            "big": 1.0,
            "mid": MID_4K_RAND / BIG_4K_RAND,
            "little": LITTLE_4K_RAND / BIG_4K_RAND,
        },
        concurrency_penalty=0.4,
        calibrated_anchors=("rand/128MB/8KB", "rand/512MB/4KB", "rand/512MB/8KB", "rand/512MB/512KB"),
    )


def bandwidth(params: IOModelParams, block_size: int, kind: ReadKind | str,
              data_range: int = 128 * MB_RANGE, core: CoreType | str = CoreType.BIG) -> float:
    """Bytes/s delivered to one issuer."""
    if block_size <= 0:
        raise ConstraintError("block_size must be > 0")
    kind = ReadKind(kind)
    coeff = params.core_coeff[CoreType(core).value]
    if kind is ReadKind.SEQ:
        return _loglog(params.seq_bw_curve, block_size) * coeff
    ranges = params.rand_bw_curve
    if len(ranges) == 1:
        return _loglog(ranges[0][1], block_size) * coeff
    xs = np.log([r for r, _ in ranges])
    ys = np.log([_loglog(c, block_size) for _, c in ranges])
    return float(np.exp(np.interp(np.log(max(data_range, 1)), xs, ys))) * coeff


def read_time(params: IOModelParams, block_size: int, kind: ReadKind | str,
              data_range: int = 128 * MB_RANGE, core: CoreType | str = CoreType.BIG) -> float:
    return block_size / bandwidth(params, block_size, kind, data_range, core)


def concurrent_bandwidth(params: IOModelParams, solo: float, n_issuers: int) -> float:
    """Per-issuer bandwidth when ``n_issuers`` cores share the single queue."""
    if n_issuers < 1:
        raise ConstraintError("n_issuers must be >= 1")
    if n_issuers == 1:
        return solo
    return solo * (1.0 - params.concurrency_penalty) / n_issuers


# --------------------------------------------------------------------------
# Flash layout
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReadOp:
    offset: int
    size: int
    kind: ReadKind
    phase: ReadPhase


@dataclass(frozen=True)
class FlashLayout:
    """Neuron-position-major bundles: layer by layer, neuron i at base + i * stride."""

    n_layers: int
    d_ffn: int
    d_model: int
    dtype: Dtype
    bundle_size: int
    aligned_bundle_size: int

    @property
    def layer_bytes(self) -> int:
        return self.d_ffn * self.aligned_bundle_size

    @property
    def total_bytes(self) -> int:
        return self.n_layers * self.layer_bytes

    def layer_base(self, layer: int) -> int:
        return layer * self.layer_bytes

    def offset(self, layer: int, neuron: int) -> int:
        if not (0 <= layer < self.n_layers and 0 <= neuron < self.d_ffn):
            raise KeyError(f"unknown neuron ({layer}, {neuron})")
        return self.layer_base(layer) + neuron * self.aligned_bundle_size

    def bundle_offsets(self, layer: int) -> np.ndarray:
        return self.layer_base(layer) + np.arange(self.d_ffn, dtype=np.int64) * self.aligned_bundle_size

    @property
    def slice_bytes(self) -> int:
        """One matrix's share of a neuron (row of Gate/Up or column of Down)."""
        if self.dtype is Dtype.FP16:
            return 2 * self.d_model
        return int4_slice_bytes(self.d_model)


def layout(model: ModelSpec, dtype: Dtype | str | None = None) -> FlashLayout:
    dtype = Dtype(dtype or model.dtype)
    size, aligned = bundle_bytes(model.d_model, dtype)
    return FlashLayout(model.n_layers, model.d_ffn, model.d_model, dtype, size, aligned)


def plan_io(lay: FlashLayout, neuron_id: tuple[int, int],
            gate_activated_hint: bool | None = None, *, bundled: bool = True) -> list[ReadOp]:
    """Random reads needed to bring one cold neuron into memory.

    int4 bundles load in two 4KB phases: Gate first, Up/Down only when the
    hint says the gate output is nonzero (``None`` plans phase 1 only).
    fp16 bundles load in one read.  ``bundled=False`` models a
    matrix-structured file: three independent page-rounded slice reads.
    """
    layer, neuron = neuron_id
    off = lay.offset(layer, neuron)
    if not bundled:
        step = -(-lay.slice_bytes // PAGE) * PAGE
        base = lay.layer_base(layer) + neuron * step
        region = lay.d_ffn * step
        return [ReadOp(base + k * region, step, ReadKind.RAND, ReadPhase.SLICE) for k in range(3)]
    if lay.dtype is Dtype.FP16:
        return [ReadOp(off, lay.aligned_bundle_size, ReadKind.RAND, ReadPhase.WHOLE)]
    first = min(PAGE, lay.aligned_bundle_size)
    ops = [ReadOp(off, first, ReadKind.RAND, ReadPhase.GATE)]
    if gate_activated_hint and lay.aligned_bundle_size > first:
        ops.append(ReadOp(off + first, lay.aligned_bundle_size - first, ReadKind.RAND, ReadPhase.UPDOWN))
    return ops


def plan_sequential(offset: int, nbytes: int, chunk: int = 512 * KB,
                    phase: ReadPhase = ReadPhase.PREFETCH) -> list[ReadOp]:
    """Large sequential reads covering [offset, offset + nbytes)."""
    ops = []
    pos, end = offset, offset + nbytes
    while pos < end:
        size = min(chunk, end - pos)
        ops.append(ReadOp(pos, size, ReadKind.SEQ, phase))
        pos += size
    return ops


def ops_time(params: IOModelParams, ops: Sequence[ReadOp], data_range: int,
             core: CoreType | str = CoreType.BIG) -> float:
    return sum(read_time(params, op.size, op.kind, data_range, core) for op in ops)


def sequential_load_time(params: IOModelParams, nbytes: int, chunk: int = 512 * KB,
                         core: CoreType | str = CoreType.BIG) -> float:
    """Time to stream ``nbytes`` with ``chunk``-sized sequential reads."""
    if nbytes <= 0:
        return 0.0
    full, rest = divmod(int(nbytes), chunk)
    t = full * read_time(params, chunk, ReadKind.SEQ, core=core)
    if rest:
        t += read_time(params, rest, ReadKind.SEQ, core=core)
    return t
