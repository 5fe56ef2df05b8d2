import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockprune.bench import (
    CURVE_COLUMNS,
    LatencyReport,
    count_network_flops,
    emit_curve,
    measure_latency,
    read_curve,
)
from blockprune.blocks import block_flops
from blockprune.pruning import greedy_prune, sequential_baseline
from blockprune.zoo import build_network, preset_spec, prune, prune_set, valid_blocks

from conftest import fresh_desk


def conv(cin, cout, hw, k=3):
    return cin * cout * k * k * hw * hw


def stage(cin, w, hw, depth):
    """A residual stage: first block (projected when the width changes) then depth-1 plain blocks."""
    first = conv(cin, w, hw) + conv(w, w, hw) + (conv(cin, w, hw, 1) if cin != w else 0)
    return first + (depth - 1) * 2 * conv(w, w, hw)


def test_desk_flops_hand_summed():
    expected = conv(3, 8, 16) + stage(8, 8, 16, 3) + stage(8, 16, 8, 3) + stage(16, 32, 4, 3) + 32 * 4
    assert expected == 2_578_560
    assert count_network_flops(fresh_desk()) == expected


def test_resnet20_flops_hand_summed():
    expected = conv(3, 16, 32) + stage(16, 16, 32, 3) + stage(16, 32, 16, 3) + stage(32, 64, 8, 3) + 64 * 10
    assert expected == 40_813_184
    assert count_network_flops(build_network(preset_spec("resnet20"), 0)) == expected


def test_flops_bookkeeping():
    net = fresh_desk()
    shapes = net.spec.input_shapes()
    for i in valid_blocks(net.spec):
        assert count_network_flops(prune(net, i)) == count_network_flops(net) - block_flops(net.spec.block(i), shapes[i][1:])
    assert count_network_flops(prune_set(net, [])) == count_network_flops(net)


# -- latency ---------------------------------------------------------------


def test_latency_defaults_and_ordering():
    net = fresh_desk()
    rep = measure_latency(net)
    assert rep.runs == 1000 and rep.warmup == 50 and rep.input_shape == (1, 3, 16, 16)
    assert rep.min <= rep.median <= rep.p95 <= rep.max
    assert rep.min <= rep.mean <= rep.max


def test_latency_single_run():
    rep = measure_latency(fresh_desk(), runs=1, warmup=0)
    assert rep.mean == rep.min == rep.max == rep.median


@pytest.mark.parametrize("runs,warmup", [(0, 5), (5, -1)])
def test_latency_argument_validation(runs, warmup):
    with pytest.raises(ValueError):
        measure_latency(fresh_desk(), runs=runs, warmup=warmup)


@given(st.lists(st.floats(0.001, 1e7), min_size=1, max_size=50))
def test_report_invariants_from_any_samples(samples):
    rep = LatencyReport.from_samples(samples, 0, (1, 3, 8, 8))
    assert rep.runs == len(samples)
    assert rep.min <= rep.median <= rep.p95 <= rep.max
    assert rep.min <= rep.mean <= rep.max


def test_report_text_block():
    rep = LatencyReport.from_samples([1.0, 2.0, 3.0, 4.0], 2, (1, 3, 16, 16))
    assert rep.to_text() == (
        "runs=4\nwarmup=2\nmean_us=2.5\nmedian_us=2.5\np95_us=3.85\nmin_us=1\nmax_us=4\ninput_shape=1x3x16x16\n"
    )


def test_pruned_net_is_not_slower():
    net = fresh_desk()
    small = prune_set(net, valid_blocks(net.spec))
    full_t = statistics.median(measure_latency(net, runs=100, warmup=10).median for _ in range(3))
    small_t = statistics.median(measure_latency(small, runs=100, warmup=10).median for _ in range(3))
    # loose: half the FLOPs are gone, timing noise on a shared machine is not
    assert small_t <= full_t * 1.1


# -- curves ----------------------------------------------------------------


@pytest.fixture(scope="module")
def traj(desk_data):
    return sequential_baseline(fresh_desk(), 3, desk_data[1].subset(np.arange(50)))


def test_curve_rows_and_header(traj, tmp_path):
    emit_curve(traj, tmp_path / "c.csv")
    raw = (tmp_path / "c.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == ",".join(CURVE_COLUMNS)
    assert len(lines) == 1 + 4
    assert lines[1].startswith("0,,11,")
    assert lines[2].startswith("1,10,10,")
    flops = [int(line.split(",")[4]) for line in lines[1:]]
    params = [int(line.split(",")[3]) for line in lines[1:]]
    assert all(b < a for a, b in zip(flops, flops[1:])) and all(b < a for a, b in zip(params, params[1:]))


def test_empty_trajectory_curve(tmp_path):
    emit_curve(sequential_baseline(fresh_desk(), 0), tmp_path / "c.csv")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 2


def test_curve_reemission_is_byte_identical(traj, tmp_path):
    emit_curve(traj, tmp_path / "a.csv")
    emit_curve(traj, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_curve_round_trip(tmp_path, small_val):
    net = fresh_desk(2)
    t = greedy_prune(net, small_val, 2, latency_fn=lambda n: measure_latency(n, runs=3, warmup=0))
    emit_curve(t, tmp_path / "a.csv")
    back = read_curve(tmp_path / "a.csv", "greedy")
    assert back.removed == t.removed
    assert back.base_params == t.base_params and back.base_flops == t.base_flops
    for a, b in zip(back.steps, t.steps):
        assert (a.params_remaining, a.flops_remaining, a.blocks_remaining) == (b.params_remaining, b.flops_remaining, b.blocks_remaining)
        assert a.acc_raw == pytest.approx(b.acc_raw, rel=1e-6)
        assert a.latency.mean == pytest.approx(b.latency.mean, rel=1e-5)
    emit_curve(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_read_curve_rejects_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        read_curve(tmp_path / "x.csv")
