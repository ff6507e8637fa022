import math

import pytest

from groupthink.latency import (
    HardwareProfile,
    compute_time,
    crossover_batch,
    memory_time,
    plateau_end,
    step_latency,
    total_latency,
)
from groupthink.scheduler import GroupConfig, Mode

EXAMPLE = HardwareProfile(mem_bandwidth=1e12, compute=1e14, weight_bytes=16e9, flops_per_token=32e9)


def test_example_crossover_is_fifty():
    assert crossover_batch(EXAMPLE) == 50.0
    assert plateau_end(EXAMPLE) == 50


def test_crossover_grows_without_bound_with_compute():
    values = [crossover_batch(HardwareProfile(1e12, c, 16e9, 32e9)) for c in (1e14, 1e18, 1e24)]
    assert values[0] < values[1] < values[2]
    assert crossover_batch(HardwareProfile(1e12, 1e300, 16e9, 32e9)) > 1e180


def test_symmetric_profile_crossover_one():
    p = HardwareProfile(mem_bandwidth=2.0, compute=3.0, weight_bytes=4.0, flops_per_token=6.0)
    assert memory_time(p) == compute_time(p, 1)
    assert crossover_batch(p) == 1.0


def test_single_thinker_is_memory_bound():
    assert step_latency(EXAMPLE, 1) == 16e9 / 1e12


def test_plateau_and_linear_regime():
    base = step_latency(EXAMPLE, 1)
    assert all(step_latency(EXAMPLE, n) == base for n in range(1, 51))
    assert step_latency(EXAMPLE, 51) > base
    assert step_latency(EXAMPLE, 400) == pytest.approx(2 * step_latency(EXAMPLE, 200))


def test_kv_traffic_adds_to_memory_term():
    p = HardwareProfile(1e12, 1e14, 16e9, 32e9, kv_bytes_per_token=1e6)
    assert step_latency(p, 4, context_tokens=1000) == pytest.approx((16e9 + 4 * 1000 * 1e6) / 1e12)


def test_total_latency_modes():
    k = 10
    lock1 = total_latency(GroupConfig(1, 20, Mode.GROUP_THINK_LOCKSTEP), EXAMPLE, k)
    lock4 = total_latency(GroupConfig(4, 20, Mode.GROUP_THINK_LOCKSTEP), EXAMPLE, k)
    assert lock1 == lock4
    inter2 = total_latency(GroupConfig(2, 20, Mode.GROUP_THINK_INTERLEAVED), EXAMPLE, k)
    lock2 = total_latency(GroupConfig(2, 20, Mode.GROUP_THINK_LOCKSTEP), EXAMPLE, k)
    assert inter2 == 2 * lock2
    cot = total_latency(GroupConfig(1, 20, Mode.SINGLE_COT), EXAMPLE, k)
    assert cot == k * 0.016
    cfg = GroupConfig(3, 20, Mode.INDEPENDENT_SAMPLING)
    per = total_latency(cfg, EXAMPLE, 1)
    assert all(total_latency(cfg, EXAMPLE, j) == pytest.approx(j * per) for j in range(21))
    with pytest.raises(ValueError):
        total_latency(cfg, EXAMPLE, 21)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mem_bandwidth=0, compute=1, weight_bytes=1, flops_per_token=1),
        dict(mem_bandwidth=1, compute=-1, weight_bytes=1, flops_per_token=1),
        dict(mem_bandwidth=1, compute=1, weight_bytes=1, flops_per_token=math.nan),
        dict(mem_bandwidth=1, compute=1, weight_bytes=1, flops_per_token=1, kv_bytes_per_token=-1),
    ],
)
def test_invalid_profiles(kwargs):
    with pytest.raises(ValueError):
        HardwareProfile(**kwargs)


def test_invalid_batch():
    for bad in (0, -2, 1.5, True):
        with pytest.raises(ValueError):
            step_latency(EXAMPLE, bad)


def test_profile_dict_round_trip():
    assert HardwareProfile.from_dict(EXAMPLE.to_dict()) == EXAMPLE
    with pytest.raises(ValueError):
        HardwareProfile.from_dict({**EXAMPLE.to_dict(), "watts": 3})


def test_first_batch_past_crossover_rises_despite_rounding():
    # exact crossover is 475.99999999999994; at 476 both terms round to one double
    p = HardwareProfile(490447208278.0708, 1360935838416047.0, 152276599.95889187, 887711002.327313)
    assert math.floor(crossover_batch(p)) == 475
    assert compute_time(p, 476) == memory_time(p)
    assert step_latency(p, 475) == step_latency(p, 1)
    assert step_latency(p, 476) > step_latency(p, 475)
    assert step_latency(p, 476) == math.nextafter(memory_time(p), math.inf)
