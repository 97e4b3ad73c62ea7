"""Synthetic gated-FFN model, neuron bundles, and activation traces.

A neuron ``i`` of a layer is row ``i`` of ``gate``, row ``i`` of ``up`` and
column ``i`` of ``down``.  Traces record, per (token, layer), which neurons
fire for the whole batch (a neuron fires if any sequence in the batch fires
it) and which of those also need their Up/Down weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConstraintError

# RNG stream tags; keep distinct so streams never alias.
_WEIGHT_STREAM = 1
_PERM_STREAM = 2
_TOKEN_STREAM = 3

MODEL_MAGIC = b"NFMW"
TRACE_FORMAT = "neuronflow-trace"
TRACE_VERSION = 1


class Dtype(str, Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    INT4_GROUP = "int4-group"
    INT4_MIXED = "int4-mixed"


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    d_model: int
    d_ffn: int
    dtype: Dtype = Dtype.FP32
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ffn"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConstraintError(f"{name} must be a positive integer, got {value!r}")
        if self.seed < 0:
            raise ConstraintError("seed must be non-negative")
        object.__setattr__(self, "dtype", Dtype(self.dtype))

    @property
    def shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "gate": (self.d_ffn, self.d_model),
            "up": (self.d_ffn, self.d_model),
            "down": (self.d_model, self.d_ffn),
        }

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "dtype": self.dtype.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            n_layers=int(data["n_layers"]),
            d_model=int(data["d_model"]),
            d_ffn=int(data["d_ffn"]),
            dtype=Dtype(data.get("dtype", "fp32")),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class FFNWeights:
    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray
    layer_index: int = 0

    def __post_init__(self):
        d_ffn, d_model = self.gate.shape
        if self.up.shape != (d_ffn, d_model) or self.down.shape != (d_model, d_ffn):
            raise ConstraintError(
                f"inconsistent FFN shapes: gate {self.gate.shape}, "
                f"up {self.up.shape}, down {self.down.shape}"
            )

    @property
    def d_ffn(self) -> int:
        return self.gate.shape[0]

    @property
    def d_model(self) -> int:
        return self.gate.shape[1]

    def copy(self) -> "FFNWeights":
        return FFNWeights(self.gate.copy(), self.up.copy(), self.down.copy(), self.layer_index)

    def equals(self, other: "FFNWeights") -> bool:
        return (
            self.layer_index == other.layer_index
            and np.array_equal(self.gate, other.gate)
            and np.array_equal(self.up, other.up)
            and np.array_equal(self.down, other.down)
        )


@dataclass(frozen=True)
class NeuronBundle:
    neuron_id: tuple[int, int]  # (layer_index, row_index)
    gate_row: np.ndarray
    up_row: np.ndarray
    down_col: np.ndarray

    @property
    def d_model(self) -> int:
        return self.gate_row.shape[0]


def make_synthetic_model(spec: ModelSpec) -> list[FFNWeights]:
    """Zero-mean Gaussian weights, one FFNWeights per layer, bit-reproducible per seed."""
    layers = []
    scale = 1.0 / np.sqrt(spec.d_model)
    for layer in range(spec.n_layers):
        rng = np.random.default_rng((spec.seed, layer, _WEIGHT_STREAM))
        gate = rng.normal(0.0, scale, size=(spec.d_ffn, spec.d_model)).astype(np.float32)
        up = rng.normal(0.0, scale, size=(spec.d_ffn, spec.d_model)).astype(np.float32)
        down = rng.normal(0.0, scale, size=(spec.d_model, spec.d_ffn)).astype(np.float32)
        layers.append(FFNWeights(gate, up, down, layer))
    return layers


def extract_bundle(weights: FFNWeights, i: int) -> NeuronBundle:
    if not 0 <= i < weights.d_ffn:
        raise IndexError(f"neuron {i} out of range [0, {weights.d_ffn})")
    return NeuronBundle(
        neuron_id=(weights.layer_index, int(i)),
        gate_row=weights.gate[i].copy(),
        up_row=weights.up[i].copy(),
        down_col=weights.down[:, i].copy(),
    )


def insert_bundle(weights: FFNWeights, bundle: NeuronBundle) -> None:
    """Write a bundle back into its row/column position, in place."""
    layer, i = bundle.neuron_id
    if layer != weights.layer_index:
        raise ConstraintError(f"bundle from layer {layer} inserted into layer {weights.layer_index}")
    if not 0 <= i < weights.d_ffn:
        raise IndexError(f"neuron {i} out of range [0, {weights.d_ffn})")
    weights.gate[i] = bundle.gate_row
    weights.up[i] = bundle.up_row
    weights.down[:, i] = bundle.down_col


# --------------------------------------------------------------------------
# Model container: magic, u32 header length, JSON header, raw LE float32.
# --------------------------------------------------------------------------

def write_model(path: str | Path, spec: ModelSpec, layers: Sequence[FFNWeights]) -> None:
    header = {"spec": spec.to_dict(), "tensor_dtype": "<f4", "order": ["gate", "up", "down"],
              "shapes": {k: list(v) for k, v in spec.shapes.items()}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for w in layers:
            for mat in (w.gate, w.up, w.down):
                fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_model(path: str | Path) -> tuple[ModelSpec, list[FFNWeights]]:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ConstraintError(f"{path}: not a model container")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + hlen])
    spec = ModelSpec.from_dict(header["spec"])
    offset = 8 + hlen
    layers = []
    for layer in range(spec.n_layers):
        mats = []
        for name in ("gate", "up", "down"):
            shape = spec.shapes[name]
            count = shape[0] * shape[1]
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            mats.append(arr.astype(np.float32))
            offset += 4 * count
        layers.append(FFNWeights(*mats, layer_index=layer))
    if offset != len(data):
        raise ConstraintError(f"{path}: trailing or missing bytes in model container")
    return spec, layers


# --------------------------------------------------------------------------
# Activation skew and traces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SkewParams:
    """Two-tier activation model.

    ``hot_fraction_by_batch`` gives, per batch size, the share of neurons
    that fire on nearly every token (``hot_probability``).  The remaining
    neurons follow a capped Zipf-Mandelbrot tail per sequence,
    ``q_r = min(cold_cap, C * (r + zipf_offset * d_ffn + 1) ** -zipf_exponent)``
    over frequency rank ``r``, with ``C`` solved so that the mean activated
    fraction at batch size 1 equals ``base_sparsity``.  A batch of ``b``
    sequences fires a tail neuron with probability ``1 - (1 - q_r) ** b``.
    """

    hot_fraction_by_batch: dict = field(default_factory=lambda: {1: 0.01, 32: 0.75})
    base_sparsity: float = 0.1
    bundle_coactivation: float = 0.8
    cold_coactivation: float = 0.15
    zipf_exponent: float = 1.0
    zipf_offset: float = 0.0
    hot_probability: float = 0.98
    cold_cap: float = 0.9

    def __post_init__(self):
        fractions = {int(b): float(f) for b, f in dict(self.hot_fraction_by_batch).items()}
        if not fractions:
            raise ConstraintError("hot_fraction_by_batch must not be empty")
        object.__setattr__(self, "hot_fraction_by_batch", dict(sorted(fractions.items())))
        prev = -1.0
        for b, f in self.hot_fraction_by_batch.items():
            if b < 1:
                raise ConstraintError(f"batch size {b} < 1")
            if not 0.0 <= f <= 1.0:
                raise ConstraintError(f"hot fraction {f} at batch {b} outside [0, 1]")
            if f < prev:
                raise ConstraintError("hot_fraction_by_batch must be non-decreasing in batch size")
            prev = f
        for name in ("base_sparsity", "bundle_coactivation", "cold_coactivation",
                     "hot_probability", "cold_cap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConstraintError(f"{name}={v} outside [0, 1]")
        if self.zipf_exponent <= 0:
            raise ConstraintError("zipf_exponent must be > 0")
        if self.zipf_offset < 0:
            raise ConstraintError("zipf_offset must be >= 0")

    def hot_fraction(self, batch_size: int) -> float:
        """Piecewise-linear in batch size between configured points, clamped."""
        keys = list(self.hot_fraction_by_batch)
        vals = list(self.hot_fraction_by_batch.values())
        return float(np.interp(batch_size, keys, vals))

    def to_dict(self) -> dict:
        return {
            "hot_fraction_by_batch": {str(k): v for k, v in self.hot_fraction_by_batch.items()},
            "base_sparsity": self.base_sparsity,
            "bundle_coactivation": self.bundle_coactivation,
            "cold_coactivation": self.cold_coactivation,
            "zipf_exponent": self.zipf_exponent,
            "zipf_offset": self.zipf_offset,
            "hot_probability": self.hot_probability,
            "cold_cap": self.cold_cap,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SkewParams":
        data = dict(data)
        if "hot_fraction_by_batch" in data:
            data["hot_fraction_by_batch"] = {int(k): float(v)
                                             for k, v in data["hot_fraction_by_batch"].items()}
        return cls(**data)


def default_skew() -> SkewParams:
    """Skew calibrated to the qualitative batch-size structure of a ReLU 7B model.

    Under 1% of neurons fire on nearly every token at batch 1 and about 75%
    at batch 32.  The tail concentrates activations in the upper half of the
    frequency ranking, so a half-resident cache catches most of them.
    """
    return SkewParams(
        hot_fraction_by_batch={1: 0.008, 2: 0.05, 4: 0.2, 8: 0.4, 16: 0.6, 32: 0.75},
        base_sparsity=0.42,
        zipf_exponent=8.0,
        zipf_offset=0.4,
        hot_probability=0.98,
        cold_cap=0.88,
    )


def _tail_scale(q_shape: np.ndarray, target_sum: float, cap: float) -> float:
    """Solve sum(min(cap, C * q_shape)) == target_sum for C by bisection."""
    if target_sum <= 0:
        return 0.0
    if cap * len(q_shape) < target_sum * (1 - 1e-12):
        raise ConstraintError("base_sparsity unreachable: raise cold_cap or lower base_sparsity")
    lo, hi = 0.0, 1.0
    while np.minimum(cap, hi * q_shape).sum() < target_sum:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(cap, mid * q_shape).sum() < target_sum:
            lo = mid
        else:
            hi = mid
    return hi


def sequence_probabilities(d_ffn: int, skew: SkewParams) -> np.ndarray:
    """Per-sequence firing probability by frequency rank (batch size 1)."""
    n_hot = int(round(skew.hot_fraction(1) * d_ffn))
    ranks = np.arange(d_ffn, dtype=np.float64)
    shape = (ranks + skew.zipf_offset * d_ffn + 1.0) ** (-skew.zipf_exponent)
    probs = np.empty(d_ffn)
    probs[:n_hot] = skew.hot_probability
    target_tail = skew.base_sparsity * d_ffn - n_hot * skew.hot_probability
    if target_tail < -1e-9:
        raise ConstraintError("base_sparsity below the mass of the batch-1 hot tier")
    tail = shape[n_hot:]
    scale = _tail_scale(tail, max(target_tail, 0.0), skew.cold_cap)
    probs[n_hot:] = np.minimum(skew.cold_cap, scale * tail)
    return probs


def batch_probabilities(d_ffn: int, skew: SkewParams, batch_size: int) -> np.ndarray:
    """Probability that a neuron (by rank) fires for a batch of ``batch_size`` sequences."""
    if batch_size < 1:
        raise ConstraintError("batch_size must be >= 1")
    q = sequence_probabilities(d_ffn, skew)
    union = 1.0 - (1.0 - q) ** batch_size
    n_hot_b = int(round(skew.hot_fraction(batch_size) * d_ffn))
    union[:n_hot_b] = np.maximum(union[:n_hot_b], skew.hot_probability)
    return union


def rank_permutation(spec: ModelSpec, layer: int) -> np.ndarray:
    """Maps frequency rank -> neuron index for one layer."""
    rng = np.random.default_rng((spec.seed, layer, _PERM_STREAM))
    return rng.permutation(spec.d_ffn)


@dataclass(frozen=True)
class TraceEntry:
    token_index: int
    batch_size: int
    layer_index: int
    activated: np.ndarray  # sorted unique neuron indices
    updown: np.ndarray     # subset of ``activated`` whose gate output is nonzero

    def to_json(self) -> dict:
        return {
            "token": self.token_index,
            "batch": self.batch_size,
            "layer": self.layer_index,
            "activated": self.activated.tolist(),
            "updown": self.updown.tolist(),
        }


@dataclass
class ActivationTrace:
    d_ffn: int
    n_layers: int
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TraceEntry]:
        return iter(self.entries)

    def batch_sizes(self) -> list[int]:
        return sorted({e.batch_size for e in self.entries})

    def by_token(self) -> dict[int, list[TraceEntry]]:
        out: dict[int, list[TraceEntry]] = {}
        for e in self.entries:
            out.setdefault(e.token_index, []).append(e)
        return out

    def validate(self) -> None:
        last_token: dict[int, int] = {}
        for e in self.entries:
            if e.batch_size < 1:
                raise ConstraintError(f"batch_size {e.batch_size} < 1")
            if not 0 <= e.layer_index < self.n_layers:
                raise ConstraintError(f"layer {e.layer_index} out of range")
            if e.activated.size and (e.activated[0] < 0 or e.activated[-1] >= self.d_ffn):
                raise ConstraintError("activated index outside [0, d_ffn)")
            if e.activated.size > 1 and np.any(np.diff(e.activated) <= 0):
                raise ConstraintError("activated set must be sorted and unique")
            if not np.all(np.isin(e.updown, e.activated)):
                raise ConstraintError("updown must be a subset of activated")
            prev = last_token.get(e.layer_index)
            if prev is not None and e.token_index <= prev:
                raise ConstraintError("token_index must strictly increase within a layer")
            last_token[e.layer_index] = e.token_index


def generate_trace(spec: ModelSpec, skew: SkewParams, n_tokens: int,
                   batch_schedule: Sequence[int], first_token: int = 0) -> ActivationTrace:
    """Sample per-token, per-layer activations.

    Token ``t`` draws from its own stream, so disjoint ``first_token``
    ranges give independent traces (e.g. profiling vs. evaluation).
    """
    if first_token < 0:
        raise ConstraintError("first_token must be >= 0")
    if len(batch_schedule) == 0 and n_tokens > 0:
        raise ConstraintError("empty batch schedule")
    if len(batch_schedule) != n_tokens:
        raise ConstraintError(
            f"batch_schedule length {len(batch_schedule)} != n_tokens {n_tokens}")
    trace = ActivationTrace(d_ffn=spec.d_ffn, n_layers=spec.n_layers)
    if n_tokens == 0:
        return trace
    probs_cache: dict[int, np.ndarray] = {}
    perms = [rank_permutation(spec, layer) for layer in range(spec.n_layers)]
    for t, b in enumerate(batch_schedule, start=first_token):
        b = int(b)
        if b not in probs_cache:
            probs_cache[b] = batch_probabilities(spec.d_ffn, skew, b)
        probs = probs_cache[b]
        for layer in range(spec.n_layers):
            rng = np.random.default_rng((spec.seed, layer, t, _TOKEN_STREAM))
            fire = rng.random(spec.d_ffn) < probs
            need_ud = rng.random(spec.d_ffn) < skew.bundle_coactivation
            activated = np.sort(perms[layer][fire])
            updown = np.sort(perms[layer][fire & need_ud])
            trace.entries.append(TraceEntry(t, b, layer, activated, updown))
    return trace


def write_trace(path: str | Path, trace: ActivationTrace) -> None:
    with open(path, "w") as fh:
        header = {"kind": "header", "format": TRACE_FORMAT, "version": TRACE_VERSION,
                  "d_ffn": trace.d_ffn, "n_layers": trace.n_layers}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in trace.entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def _parse_entries(lines: Iterable[str]) -> Iterator[dict]:
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if line:
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConstraintError(f"trace line {n}: {exc}") from None


def read_trace(path: str | Path) -> ActivationTrace:
    with open(path) as fh:
        records = list(_parse_entries(fh))
    if not records or records[0].get("kind") != "header":
        raise ConstraintError(f"{path}: missing trace header")
    header = records[0]
    if header.get("format") != TRACE_FORMAT:
        raise ConstraintError(f"{path}: unknown trace format {header.get('format')!r}")
    trace = ActivationTrace(d_ffn=int(header["d_ffn"]), n_layers=int(header["n_layers"]))
    for r in records[1:]:
        activated = np.asarray(r["activated"], dtype=np.int64)
        updown = np.asarray(r.get("updown", r["activated"]), dtype=np.int64)
        trace.entries.append(TraceEntry(int(r["token"]), int(r["batch"]), int(r["layer"]),
                                        activated, updown))
    trace.validate()
    return trace
