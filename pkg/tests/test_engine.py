from dataclasses import replace

import numpy as np
import pytest

from neuronflow.errors import ConstraintError, PlanError
from neuronflow.hardware import HardwareProfile
from neuronflow.engine import (
    ABLATION_STEPS, METRIC_COLUMNS, EngineState, PolicyFlags, adjust_split, build_run_config,
    metrics_csv, preload_time, run_ablation, simulate_decode, simulate_prefill, summary_json,
)
from neuronflow.model import ModelSpec

SMALL = ModelSpec(2, 4096, 8192, seed=0)
MB = 1024 * 1024
BON = [4] * 4 + [3] * 4 + [2] * 4 + [1] * 4

# simulated tokens/s on the default profile at 50% offload, 16 batch-1 tokens
ABLATION_FIXTURE = {
    "baseline": 6.335449305423587,
    "+bundle": 9.027764669854117,
    "+cache": 51.89559878104631,
    "+pipeline": 55.09601860722265,
    "+xpu": 57.16261436525839,
}


def with_flags(cfg, **kw):
    return replace(cfg, flags=replace(cfg.flags, **kw))


@pytest.fixture(scope="module")
def ablation():
    return run_ablation(build_run_config())


@pytest.fixture(scope="module")
def bon():
    cfg = build_run_config(batch_schedule=BON, offload_fraction=0.0)
    return simulate_decode(with_flags(cfg, xpu=True))[0], simulate_decode(with_flags(cfg, xpu=False))[0]


@pytest.fixture(scope="module")
def small_cfg():
    return build_run_config(SMALL, [1] * 4, profile_tokens=32)


# -- ablation ------------------------------------------------------------------

def test_ablation_order_and_fixture(ablation):
    names = [n for n, _ in ablation]
    assert names == [n for n, _ in ABLATION_STEPS]
    tps = [m.tokens_per_s for _, m in ablation]
    assert all(a < b for a, b in zip(tps, tps[1:]))
    for name, m in ablation:
        assert m.tokens_per_s == pytest.approx(ABLATION_FIXTURE[name], rel=1e-9)


def test_cache_step_hit_rate(ablation):
    m = dict(ablation)
    assert m["+cache"].hit_rate >= 0.9
    assert m["+cache"].bytes_read < m["+bundle"].bytes_read


def test_metrics_csv_columns(ablation):
    text = metrics_csv(ablation, "step")
    lines = text.splitlines()
    assert lines[0].split(",") == ["step", *METRIC_COLUMNS]
    assert [line.split(",")[0] for line in lines[1:]] == [n for n, _ in ABLATION_STEPS]


# -- accounting ------------------------------------------------------------------

def test_time_accounting_sums_to_total(small_cfg):
    m, _ = simulate_decode(small_cfg)
    assert m.compute_fraction + m.io_overhead_fraction + m.stall_fraction == pytest.approx(1.0)
    assert m.stall_time >= 0 and m.total_time == pytest.approx(m.step_latency.sum())
    assert m.latency_percentile(50) <= m.latency_percentile(90) <= m.latency_percentile(99)
    assert set(m.summary()) == set(METRIC_COLUMNS)


def test_decode_is_deterministic(small_cfg):
    a, _ = simulate_decode(small_cfg)
    b, _ = simulate_decode(small_cfg)
    assert summary_json(a) == summary_json(b)


def test_event_log_recorded_and_valid(small_cfg):
    m, log = simulate_decode(replace(small_cfg, record_events=True))
    assert log is not None and log.events
    assert log.makespan == pytest.approx(m.total_time)
    assert {e.resource for e in log.events} >= {"io", "npu"}


def test_switching_schedule_keeps_log_and_cache_consistent():
    cfg = build_run_config(SMALL, [2, 2, 1, 1], profile_tokens=16, record_events=True)
    m, log = simulate_decode(cfg)
    log.validate()
    assert m.graph_switches == 1
    assert [e.stage for e in log.events if e.kind == "switch"] == ["graph:1"]


def test_offload_out_of_range_rejected(small_cfg):
    with pytest.raises(ConstraintError):
        replace(small_cfg, offload_fraction=1.5)


# -- residency and hybrid split -----------------------------------------------

def test_all_resident_hybrid_beats_cpu_only():
    cfg = build_run_config(SMALL, [1] * 4, profile_tokens=32, offload_fraction=0.0)
    hyb, _ = simulate_decode(cfg)
    cpu, _ = simulate_decode(with_flags(cfg, xpu=False))
    assert hyb.tokens_per_s > cpu.tokens_per_s
    assert hyb.bytes_read == 0 and hyb.hit_rate == 1.0 and hyb.io_overhead_fraction == 0.0


def test_all_resident_cache_flag_is_noop():
    cfg = build_run_config(SMALL, [1] * 4, profile_tokens=32, offload_fraction=0.0)
    on, _ = simulate_decode(cfg)
    off, _ = simulate_decode(with_flags(cfg, cache=False))
    assert on.total_time == pytest.approx(off.total_time, rel=1e-12)


def test_throughput_monotone_in_resident_share():
    tps = []
    for off in (0.8, 0.6, 0.4, 0.2, 0.0):
        cfg = build_run_config(SMALL, [1] * 4, profile_tokens=32, offload_fraction=off)
        tps.append(simulate_decode(cfg)[0].tokens_per_s)
    assert tps == sorted(tps)


def test_pipeline_reduces_exposed_io(small_cfg):
    on, _ = simulate_decode(small_cfg)
    off, _ = simulate_decode(with_flags(small_cfg, pipeline="matrix_level"))
    assert on.io_overhead_fraction < off.io_overhead_fraction
    assert on.total_time < off.total_time


def test_coactivation_reads_more(small_cfg):
    base, _ = simulate_decode(small_cfg)
    co, _ = simulate_decode(with_flags(small_cfg, coactivation=True))
    assert co.bytes_read > base.bytes_read


# -- dynamic adjustment --------------------------------------------------------

def test_bon_speed_rises_as_batch_decays(bon):
    hyb, cpu = bon
    means = [hyb.step_speed[hyb.step_batch == b].mean() for b in (4, 3, 2, 1)]
    assert means == sorted(means)
    assert np.all(hyb.step_speed >= cpu.step_speed)
    assert hyb.graph_switches == 3 and hyb.graph_switch_cost == 0.0
    assert hyb.npu_fraction[0] == pytest.approx(0.7, abs=1e-3)
    assert hyb.npu_fraction[-1] == pytest.approx(0.5, abs=1e-3)


def test_graph_switch_costs_time_when_graph_outlasts_attention():
    hw = HardwareProfile(graph_bytes=64 * MB)
    cfg = build_run_config(SMALL, [2, 1], profile_tokens=32, hw=hw, offload_fraction=0.0)
    m, _ = simulate_decode(cfg)
    assert m.graph_switches == 1 and m.graph_switch_cost > 0


def test_adjust_split(small_cfg):
    plan = build_run_config(SMALL, [1, 4], profile_tokens=16).plan
    st = EngineState.start(plan, 4)
    assert adjust_split(st, 4) is None
    ch = adjust_split(st, 1)
    assert (ch.old_batch, ch.new_batch) == (4, 1) and ch.new_fraction < ch.old_fraction
    assert st.pending_graph == ch.graph_bytes and st.switches == [ch]
    with pytest.raises(PlanError):
        adjust_split(st, 3)


def test_xpu_off_has_no_npu_share(small_cfg):
    m, _ = simulate_decode(with_flags(small_cfg, xpu=False))
    assert not np.any(m.npu_fraction)


# -- prefill -------------------------------------------------------------------

@pytest.fixture(scope="module")
def prefill_cfg():
    return build_run_config(batch_schedule=[1], offload_fraction=0.5)


def test_prefill_hides_io_after_first_layer(prefill_cfg):
    p = simulate_prefill(prefill_cfg, 512)
    assert not p.hidden[0] and p.hidden[1:].all()
    assert p.total_time == pytest.approx(p.first_load + p.layer_compute.sum())


def test_prefill_short_prompt_exposes_io(prefill_cfg):
    p = simulate_prefill(prefill_cfg, 16)
    assert not p.hidden[1:].any()
    assert p.io_overhead_fraction > simulate_prefill(prefill_cfg, 512).io_overhead_fraction


def test_prefill_roughly_doubles_with_prompt(prefill_cfg):
    a = simulate_prefill(prefill_cfg, 1024).total_time
    b = simulate_prefill(prefill_cfg, 2048).total_time
    assert 1.8 <= b / a <= 2.0


def test_sequential_preload_beats_random():
    hw = HardwareProfile()
    nbytes = 7 * MB
    ratio = preload_time(hw, nbytes, False, 128 * MB) / preload_time(hw, nbytes, True)
    assert 2.0 <= ratio <= 4.5


def test_prefill_rejects_empty_prompt(prefill_cfg):
    with pytest.raises(ConstraintError):
        simulate_prefill(prefill_cfg, 0)


def test_policy_flags_validate():
    with pytest.raises(ValueError):
        PolicyFlags(pipeline="tile_level")
