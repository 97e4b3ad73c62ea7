import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuronflow.errors import ConstraintError
from neuronflow.model import Dtype, ModelSpec
from neuronflow.storage import (
    IOModelParams, ReadKind, ReadPhase, bandwidth, concurrent_bandwidth, default_profile, layout,
    plan_io, plan_sequential, read_time, sequential_load_time,
)

from oracles import ANCHORS, KB, MB_RANGE

P = default_profile()


def mbps(x):
    return x / 1e6


def test_quoted_anchors_exact():
    assert bandwidth(P, 4 * KB, "seq") == pytest.approx(ANCHORS["seq_4k"], rel=1e-12)
    assert bandwidth(P, 512 * KB, "seq") == pytest.approx(ANCHORS["seq_512k"], rel=1e-12)
    assert bandwidth(P, 512 * KB, "rand", 128 * MB_RANGE) == pytest.approx(ANCHORS["rand_512k_128m"], rel=1e-12)
    assert bandwidth(P, 4 * KB, "rand", 128 * MB_RANGE) == pytest.approx(ANCHORS["rand_4k_128m_big"], rel=1e-12)
    assert bandwidth(P, 4 * KB, "rand", 512 * MB_RANGE) <= ANCHORS["rand_4k_512m_max"]


@pytest.mark.parametrize("core", ["big", "mid", "little"])
def test_core_throughputs(core):
    got = bandwidth(P, 4 * KB, "rand", 128 * MB_RANGE, core)
    assert got == pytest.approx(ANCHORS[f"rand_4k_128m_{core}"], rel=1e-3)


def test_read_time_is_size_over_bandwidth():
    assert read_time(P, 4 * KB, "seq") == pytest.approx(4 * KB / 450e6)


def test_two_small_random_reads_beat_one_8k():
    assert 2 * read_time(P, 4 * KB, "rand") <= read_time(P, 8 * KB, "rand")


def test_concurrent_issuers_penalty():
    solo = bandwidth(P, 4 * KB, "rand")
    assert concurrent_bandwidth(P, solo, 1) == solo
    assert concurrent_bandwidth(P, solo, 2) <= 0.6 * solo
    with pytest.raises(ConstraintError):
        concurrent_bandwidth(P, solo, 0)


def test_clamped_outside_table():
    assert bandwidth(P, 1, "seq") == pytest.approx(450e6)
    assert bandwidth(P, 64 * 1024 * KB, "seq") == pytest.approx(4e9)
    with pytest.raises(ConstraintError):
        read_time(P, 0, "seq")


@settings(max_examples=300, deadline=None)
@given(a=st.integers(1, 4 * 1024 * KB), b=st.integers(1, 4 * 1024 * KB),
       r1=st.integers(1, 2048 * MB_RANGE), r2=st.integers(1, 2048 * MB_RANGE))
def test_interpolation_monotone(a, b, r1, r2):
    lo, hi = sorted((a, b))
    assert bandwidth(P, lo, "seq") <= bandwidth(P, hi, "seq") * (1 + 1e-12)
    near, far = sorted((r1, r2))
    assert bandwidth(P, lo, "rand", far) <= bandwidth(P, lo, "rand", near) * (1 + 1e-12)


def test_params_validation_and_round_trip():
    assert IOModelParams.from_dict(P.to_dict()) == P
    with pytest.raises(ConstraintError):
        IOModelParams(((4096, 2.0), (8192, 1.0)), ((1, ((4096, 1.0),)),))
    with pytest.raises(ConstraintError):
        IOModelParams(((4096, 1.0),), ((1, ((4096, 1.0),)), (2, ((4096, 2.0),))))
    with pytest.raises(ConstraintError):
        IOModelParams(((4096, 1.0),), ((1, ((4096, 1.0),)),), core_coeff={"big": 2.0})


# -- layout and read plans -------------------------------------------------

def test_layout_strides():
    spec = ModelSpec(2, 4096, 16)
    lay = layout(spec, Dtype.INT4_GROUP)
    offs = lay.bundle_offsets(1)
    assert np.all(np.diff(offs) == 8 * KB)
    assert lay.offset(1, 0) == lay.layer_base(1)
    assert np.all(np.diff(layout(spec, Dtype.FP16).bundle_offsets(0)) == 24 * KB)
    with pytest.raises(KeyError):
        lay.offset(2, 0)


def test_int4_two_phase_reads():
    lay = layout(ModelSpec(1, 4096, 8), Dtype.INT4_GROUP)
    off = lay.offset(0, 3)
    one = plan_io(lay, (0, 3), gate_activated_hint=False)
    assert [(o.offset, o.size, o.phase) for o in one] == [(off, 4 * KB, ReadPhase.GATE)]
    two = plan_io(lay, (0, 3), gate_activated_hint=True)
    assert [(o.size, o.phase) for o in two] == [(4 * KB, ReadPhase.GATE), (4 * KB, ReadPhase.UPDOWN)]
    assert all(o.kind is ReadKind.RAND for o in two)


def test_fp16_single_read_and_unbundled():
    lay = layout(ModelSpec(1, 4096, 8), Dtype.FP16)
    ops = plan_io(lay, (0, 2), True)
    assert [(o.size, o.phase) for o in ops] == [(24 * KB, ReadPhase.WHOLE)]
    lay4 = layout(ModelSpec(1, 4096, 8), Dtype.INT4_GROUP)
    assert len(plan_io(lay4, (0, 2), True, bundled=False)) == 3


def test_sequential_plans():
    ops = plan_sequential(0, 1300 * KB)
    assert [o.size for o in ops] == [512 * KB, 512 * KB, 276 * KB]
    assert all(o.kind is ReadKind.SEQ for o in ops)
    assert sequential_load_time(P, 1024 * KB) == pytest.approx(2 * 512 * KB / 4e9)
    assert sequential_load_time(P, 0) == 0.0
