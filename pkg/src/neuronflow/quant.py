"""Symmetric INT4 weight quantization and on-flash bundle byte accounting.

Schemes
-------
per_channel  one fp16 scale per row.
group32      one fp16 scale per 32 consecutive weights of a row.
mixed        per row, the largest-magnitude ``outlier_fraction`` of weights are
             kept as int8 with a per-row fp16 scale; the rest are per-channel int4.

Codes are rounded half-to-even and clipped to [-8, 7].

Packed layout (little-endian): codes are two's-complement nibbles, two per
byte, element ``2k`` in the low nibble and ``2k+1`` in the high nibble; an odd
tail is padded with a zero nibble.  For the int4-group bundle format each
group of 32 codes is described by a pair of fp16 values (scale, zero-point);
the symmetric scheme always writes a zero-point of 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConstraintError
from .model import Dtype, NeuronBundle

GROUP = 32
KB = 1024
PAGE = 4 * KB
INT4_MIN, INT4_MAX = -8, 7
INT8_MAX = 127
DEFAULT_OUTLIER_FRACTION = 0.01


class Scheme(str, Enum):
    PER_CHANNEL = "per_channel"
    GROUP32 = "group32"
    MIXED = "mixed"


@dataclass
class QuantizedMatrix:
    scheme: Scheme
    shape: tuple[int, int]
    codes: np.ndarray          # int8 in [-8, 7], same shape as the source
    scales: np.ndarray         # float16, (rows, n_groups)
    outlier_rows: np.ndarray   # int64
    outlier_cols: np.ndarray   # int64
    outlier_values: np.ndarray  # int8
    outlier_scales: np.ndarray  # float16, one per row (mixed only)
    group_size: int

    @property
    def n_outliers(self) -> int:
        return int(self.outlier_rows.size)


def _fp16_scale(amax: np.ndarray, qmax: int) -> np.ndarray:
    return (amax / qmax).astype(np.float16)


def _quantize_groups(m: np.ndarray, group: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = m.shape
    n_groups = -(-cols // group)
    padded = np.zeros((rows, n_groups * group), dtype=np.float64)
    padded[:, :cols] = m
    blocks = padded.reshape(rows, n_groups, group)
    scales = _fp16_scale(np.abs(blocks).max(axis=2), INT4_MAX)
    s = scales.astype(np.float64)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(s > 0, np.rint(blocks / np.where(s > 0, s, 1.0)), 0.0)
    codes = np.clip(q, INT4_MIN, INT4_MAX).astype(np.int8)
    return codes.reshape(rows, -1)[:, :cols], scales


def quantize(matrix, scheme: Scheme | str, outlier_fraction: float | None = None) -> QuantizedMatrix:
    scheme = Scheme(scheme)
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ConstraintError("quantize needs a non-empty 2-D matrix")
    if (outlier_fraction is not None) != (scheme is Scheme.MIXED):
        raise ConstraintError("outlier_fraction is required for, and only for, the mixed scheme")
    rows, cols = m.shape
    empty_i = np.zeros(0, dtype=np.int64)
    no_outliers = (empty_i, empty_i, np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.float16))

    if scheme is Scheme.GROUP32:
        codes, scales = _quantize_groups(m, GROUP)
        return QuantizedMatrix(scheme, (rows, cols), codes, scales, *no_outliers, group_size=GROUP)
    if scheme is Scheme.PER_CHANNEL:
        codes, scales = _quantize_groups(m, cols)
        return QuantizedMatrix(scheme, (rows, cols), codes, scales, *no_outliers, group_size=cols)

    if not 0.0 <= outlier_fraction <= 1.0:
        raise ConstraintError("outlier_fraction must be in [0, 1]")
    k = int(np.floor(outlier_fraction * cols))
    # stable sort on -|w|: ties go to the lower column index
    order = np.argsort(-np.abs(m), axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(m, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    inliers = np.where(mask, 0.0, m)
    codes, scales = _quantize_groups(inliers, cols)
    o_rows, o_cols = np.nonzero(mask)
    o_vals = m[o_rows, o_cols]
    amax = np.zeros(rows)
    if k:
        amax = np.abs(np.where(mask, m, 0.0)).max(axis=1)
    o_scales = _fp16_scale(amax, INT8_MAX)
    s = o_scales.astype(np.float64)[o_rows]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(s > 0, np.rint(o_vals / np.where(s > 0, s, 1.0)), 0.0)
    o_codes = np.clip(q, -INT8_MAX, INT8_MAX).astype(np.int8)
    return QuantizedMatrix(scheme, (rows, cols), codes, scales, o_rows.astype(np.int64),
                           o_cols.astype(np.int64), o_codes, o_scales, group_size=cols)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    rows, cols = q.shape
    n_groups = q.scales.shape[1]
    padded = np.zeros((rows, n_groups * q.group_size))
    padded[:, :cols] = q.codes
    blocks = padded.reshape(rows, n_groups, q.group_size) * q.scales.astype(np.float64)[..., None]
    out = blocks.reshape(rows, -1)[:, :cols]
    if q.n_outliers:
        out[q.outlier_rows, q.outlier_cols] = (
            q.outlier_values.astype(np.float64) * q.outlier_scales.astype(np.float64)[q.outlier_rows])
    return out


def element_scales(q: QuantizedMatrix) -> np.ndarray:
    """The fp16 scale governing each element, as float64, source-shaped."""
    rows, cols = q.shape
    idx = np.arange(cols) // q.group_size
    return q.scales.astype(np.float64)[:, idx]


# --------------------------------------------------------------------------
# Nibble packing
# --------------------------------------------------------------------------

def pack_codes(codes) -> bytes:
    c = np.asarray(codes, dtype=np.int8).ravel()
    if c.size and (c.min() < INT4_MIN or c.max() > INT4_MAX):
        raise ConstraintError("int4 codes outside [-8, 7]")
    nib = (c.astype(np.int16) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_codes(data: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    nib = np.empty(b.size * 2, dtype=np.uint8)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    vals = nib[:count].astype(np.int16)
    return np.where(vals >= 8, vals - 16, vals).astype(np.int8)


# --------------------------------------------------------------------------
# Bundle byte accounting
# --------------------------------------------------------------------------

def _align(n: int, unit: int = PAGE) -> int:
    return -(-n // unit) * unit


def int4_slice_bytes(d_model: int) -> int:
    """One matrix slice of a neuron: packed codes + (scale, zero) fp16 pair per group."""
    return -(-d_model // 2) + (-(-d_model // GROUP)) * 4


def bundle_bytes(d_model: int, dtype: Dtype | str) -> tuple[int, int]:
    """(bundle_size, aligned_size) in bytes for one Gate-Up-Down neuron bundle.

    The aligned size rounds up to the 4KB flash page.
    """
    dtype = Dtype(dtype)
    if d_model < 1:
        raise ConstraintError("d_model must be >= 1")
    if dtype is Dtype.FP16:
        size = 3 * d_model * 2
    elif dtype is Dtype.INT4_GROUP:
        size = 3 * int4_slice_bytes(d_model)
    else:
        raise ConstraintError(f"bundle_bytes: unsupported dtype {dtype.value}")
    return size, _align(size)


def _int4_slice(vec: np.ndarray) -> bytes:
    q = quantize(vec.reshape(1, -1), Scheme.GROUP32)
    pairs = np.zeros((q.scales.shape[1], 2), dtype="<f2")
    pairs[:, 0] = q.scales[0]
    return pack_codes(q.codes[0]) + pairs.tobytes()


def serialize_bundle(bundle: NeuronBundle, dtype: Dtype | str, aligned: bool = False) -> bytes:
    """Gate, Up, Down slices back to back; optionally zero-padded to the aligned size."""
    dtype = Dtype(dtype)
    parts = (bundle.gate_row, bundle.up_row, bundle.down_col)
    if dtype is Dtype.FP16:
        blob = b"".join(np.asarray(p, dtype="<f2").tobytes() for p in parts)
    elif dtype is Dtype.INT4_GROUP:
        blob = b"".join(_int4_slice(np.asarray(p, dtype=np.float64)) for p in parts)
    else:
        raise ConstraintError(f"serialize_bundle: unsupported dtype {dtype.value}")
    if aligned:
        blob += bytes(bundle_bytes(bundle.d_model, dtype)[1] - len(blob))
    return blob


def deserialize_bundle(data: bytes, neuron_id: tuple[int, int], d_model: int,
                       dtype: Dtype | str) -> NeuronBundle:
    dtype = Dtype(dtype)
    vecs = []
    if dtype is Dtype.FP16:
        step = 2 * d_model
        for k in range(3):
            vecs.append(np.frombuffer(data, dtype="<f2", count=d_model, offset=k * step).astype(np.float32))
    elif dtype is Dtype.INT4_GROUP:
        step = int4_slice_bytes(d_model)
        n_codes = -(-d_model // 2)
        n_groups = -(-d_model // GROUP)
        for k in range(3):
            base = k * step
            codes = unpack_codes(data[base:base + n_codes], d_model).astype(np.float64)
            pairs = np.frombuffer(data, dtype="<f2", count=2 * n_groups, offset=base + n_codes)
            scale = pairs[0::2].astype(np.float64)
            zero = pairs[1::2].astype(np.float64)
            idx = np.arange(d_model) // GROUP
            vecs.append(((codes - zero[idx]) * scale[idx]).astype(np.float32))
    else:
        raise ConstraintError(f"deserialize_bundle: unsupported dtype {dtype.value}")
    return NeuronBundle(neuron_id, vecs[0], vecs[1], vecs[2])


def mse(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))
