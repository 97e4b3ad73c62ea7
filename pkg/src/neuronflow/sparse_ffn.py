"""Gated-FFN evaluation: dense reference, predictor-gated sparse, hybrid split, two-phase.

out = sum_i act(gate_i . x) * (up_i . x) * down[:, i]

Every reduction here goes through :func:`blocked_sum`, which fixes the
accumulation order (pairwise within blocks of ``BLOCK`` elements, then
sequential over blocks in ascending index) using only elementwise adds.
Neuron contributions are accumulated over blocks of absolute neuron index
and the rows of skipped neurons are exact ``+0``.  That makes oracle-sparse
and hybrid outputs bit-identical to :func:`ffn_dense` under ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConstraintError, PartitionError
from .model import FFNWeights, NeuronBundle

BLOCK = 16  # power of two


class Activation(str, Enum):
    RELU = "relu"
    SILU = "silu"


class IOPhase(str, Enum):
    GATE_ONLY = "GateOnly"
    GATE = "Gate"
    UP_DOWN = "UpDown"


def blocked_sum(a: np.ndarray) -> np.ndarray:
    """Reduce the last axis in a fixed, shape-independent order."""
    a = np.asarray(a)
    n = a.shape[-1]
    if n == 0:
        return np.zeros(a.shape[:-1], dtype=a.dtype)
    nb = -(-n // BLOCK)
    pad = nb * BLOCK - n
    if pad:
        a = np.concatenate([a, np.zeros(a.shape[:-1] + (pad,), dtype=a.dtype)], axis=-1)
    a = a.reshape(a.shape[:-1] + (nb, BLOCK))
    width = BLOCK
    while width > 1:
        width //= 2
        a = a[..., :width] + a[..., width:]
    a = a[..., 0]
    # add.accumulate is strictly sequential
    return np.add.accumulate(a, axis=-1)[..., -1]


def _dots(mat: np.ndarray, rows: np.ndarray, x: np.ndarray) -> np.ndarray:
    return blocked_sum(mat[rows] * x)


def _activate(g: np.ndarray, u: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        zero = np.zeros((), dtype=g.dtype)
        return np.where(g > 0, g * u, zero)
    silu = g / (np.ones((), dtype=g.dtype) + np.exp(-g))
    return silu * u


def neuron_coefficients(weights: FFNWeights, x: np.ndarray, rows: np.ndarray,
                        activation: Activation | str = Activation.RELU) -> np.ndarray:
    """act(gate_i . x) * (up_i . x) for the given rows."""
    activation = Activation(activation)
    rows = np.asarray(rows, dtype=np.int64)
    g = _dots(weights.gate, rows, x)
    u = _dots(weights.up, rows, x)
    return _activate(g, u, activation)


def gate_preactivations(weights: FFNWeights, x: np.ndarray) -> np.ndarray:
    return _dots(weights.gate, np.arange(weights.d_ffn), _check_x(weights, x))


def oracle_activated(weights: FFNWeights, x: np.ndarray) -> np.ndarray:
    """Neurons with gate_i . x > 0 (strict; relu(0) counts as inactive)."""
    return np.flatnonzero(gate_preactivations(weights, x) > 0)


def _check_x(weights: FFNWeights, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (weights.d_model,):
        raise ConstraintError(f"input shape {x.shape} != ({weights.d_model},)")
    return x.astype(weights.gate.dtype, copy=False)


def _check_rows(rows: Iterable[int], d_ffn: int) -> np.ndarray:
    arr = np.unique(np.fromiter((int(r) for r in rows), dtype=np.int64))
    if arr.size and (arr[0] < 0 or arr[-1] >= d_ffn):
        raise IndexError(f"neuron index outside [0, {d_ffn})")
    return arr


def _accumulate(weights: FFNWeights, rows: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """sum over rows of coeff * down[:, row], blocked by absolute neuron index."""
    d_model = weights.d_model
    dtype = weights.down.dtype
    out = np.zeros(d_model, dtype=dtype)
    if rows.size == 0:
        return out
    block_ids = rows // BLOCK
    touched, inverse = np.unique(block_ids, return_inverse=True)
    terms = np.zeros((touched.size, BLOCK, d_model), dtype=dtype)
    nz = coeffs != 0
    contrib = coeffs[nz, None] * weights.down[:, rows[nz]].T
    terms[inverse[nz], rows[nz] % BLOCK] = contrib
    width = BLOCK
    while width > 1:
        width //= 2
        terms = terms[:, :width] + terms[:, width:]
    partial = terms[:, 0]
    for k in range(partial.shape[0]):
        out = out + partial[k]
    return out


@dataclass(frozen=True)
class FFNWork:
    neurons: int
    elements: int  # weight elements touched: 3 * d_model per evaluated neuron


def ffn_dense(weights: FFNWeights, x, activation: Activation | str = Activation.RELU) -> np.ndarray:
    x = _check_x(weights, x)
    rows = np.arange(weights.d_ffn)
    return _accumulate(weights, rows, neuron_coefficients(weights, x, rows, activation))


def ffn_sparse(weights: FFNWeights, x, predicted: Iterable[int],
               activation: Activation | str = Activation.RELU) -> np.ndarray:
    return ffn_sparse_with_work(weights, x, predicted, activation)[0]


def ffn_sparse_with_work(weights: FFNWeights, x, predicted: Iterable[int],
                         activation: Activation | str = Activation.RELU) -> tuple[np.ndarray, FFNWork]:
    x = _check_x(weights, x)
    rows = _check_rows(predicted, weights.d_ffn)
    out = _accumulate(weights, rows, neuron_coefficients(weights, x, rows, activation))
    return out, FFNWork(int(rows.size), int(rows.size) * 3 * weights.d_model)


# --------------------------------------------------------------------------
# Predictor
# --------------------------------------------------------------------------

class PredictorMode(str, Enum):
    ORACLE = "oracle"
    NOISY = "noisy"


@dataclass(frozen=True)
class Predictor:
    """Behavioural activation predictor: the truth, optionally with per-neuron errors."""

    mode: PredictorMode = PredictorMode.ORACLE
    false_negative_rate: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", PredictorMode(self.mode))
        for name in ("false_negative_rate", "false_positive_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConstraintError(f"{name}={v} outside [0, 1]")
        if self.mode is PredictorMode.ORACLE and (self.false_negative_rate or self.false_positive_rate):
            raise ConstraintError("oracle predictor must have zero error rates")


def predict(pred: Predictor, true_activated: Iterable[int], d_ffn: int, token_key: int) -> np.ndarray:
    truth = _check_rows(true_activated, d_ffn)
    if pred.mode is PredictorMode.ORACLE:
        return truth
    rng = np.random.default_rng((pred.seed, int(token_key)))
    u = rng.random(d_ffn)
    member = np.zeros(d_ffn, dtype=bool)
    member[truth] = True
    keep = member & (u >= pred.false_negative_rate)
    add = ~member & (u < pred.false_positive_rate)
    return np.flatnonzero(keep | add)


# --------------------------------------------------------------------------
# Hybrid hot/cold evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitRatio:
    npu_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.npu_fraction <= 1.0:
            raise ConstraintError(f"npu_fraction={self.npu_fraction} outside [0, 1]")

    def hot_rows(self, d_ffn: int) -> int:
        return int(round(self.npu_fraction * d_ffn))


@dataclass(frozen=True)
class HybridResult:
    output: np.ndarray
    hot_work: FFNWork
    cold_work: FFNWork
    cold_predicted: np.ndarray


def ffn_hybrid(weights: FFNWeights, x, ratio: SplitRatio, hot_set: Sequence[int],
               predictor: Predictor | None = None, *, token_key: int = 0,
               cold_predicted: Iterable[int] | None = None,
               activation: Activation | str = Activation.RELU) -> HybridResult:
    """Dense over ``hot_set`` plus predictor-gated sparse over the complement.

    Pass ``cold_predicted`` to supply the cold partition's prediction
    directly; it must not overlap ``hot_set``.
    """
    x = _check_x(weights, x)
    d_ffn = weights.d_ffn
    hot = _check_rows(hot_set, d_ffn)
    if hot.size != len(hot_set):
        raise ConstraintError("hot_set contains duplicates")
    if hot.size != ratio.hot_rows(d_ffn):
        raise ConstraintError(
            f"|hot_set|={hot.size} != round(npu_fraction * d_ffn)={ratio.hot_rows(d_ffn)}")
    is_hot = np.zeros(d_ffn, dtype=bool)
    is_hot[hot] = True
    if cold_predicted is None:
        predictor = predictor or Predictor()
        if Activation(activation) is Activation.RELU:
            truth = oracle_activated(weights, x)
        else:
            truth = np.arange(d_ffn)
        cold = predict(predictor, truth, d_ffn, token_key)
        cold = cold[~is_hot[cold]]
    else:
        cold = _check_rows(cold_predicted, d_ffn)
        if np.any(is_hot[cold]):
            raise PartitionError("cold prediction overlaps the hot partition")
    rows = np.union1d(hot, cold)
    out = _accumulate(weights, rows, neuron_coefficients(weights, x, rows, activation))
    d3 = 3 * weights.d_model
    return HybridResult(
        output=out,
        hot_work=FFNWork(int(hot.size), int(hot.size) * d3),
        cold_work=FFNWork(int(cold.size), int(cold.size) * d3),
        cold_predicted=cold,
    )


# --------------------------------------------------------------------------
# Two-phase per-neuron evaluation
# --------------------------------------------------------------------------

def two_phase_eval(bundle: NeuronBundle, x) -> tuple[np.ndarray, list[IOPhase]]:
    x = np.asarray(x, dtype=bundle.gate_row.dtype)
    g = blocked_sum(bundle.gate_row * x)
    if not g > 0:
        return np.zeros_like(bundle.down_col), [IOPhase.GATE_ONLY]
    u = blocked_sum(bundle.up_row * x)
    coeff = g * u
    if coeff == 0:
        return np.zeros_like(bundle.down_col), [IOPhase.GATE, IOPhase.UP_DOWN]
    return coeff * bundle.down_col, [IOPhase.GATE, IOPhase.UP_DOWN]


def calibrate_silu_threshold(weights: FFNWeights, inputs: Sequence[np.ndarray],
                             target_fraction: float = 0.5) -> float:
    """Magnitude threshold that keeps ``target_fraction`` of SiLU neuron outputs."""
    if not 0.0 < target_fraction <= 1.0:
        raise ConstraintError("target_fraction must be in (0, 1]")
    rows = np.arange(weights.d_ffn)
    mags = np.concatenate([
        np.abs(neuron_coefficients(weights, _check_x(weights, x), rows, Activation.SILU))
        for x in inputs
    ])
    return float(np.quantile(mags, 1.0 - target_fraction))


def silu_predicted(weights: FFNWeights, x, threshold: float) -> np.ndarray:
    x = _check_x(weights, x)
    rows = np.arange(weights.d_ffn)
    return np.flatnonzero(np.abs(neuron_coefficients(weights, x, rows, Activation.SILU)) > threshold)
