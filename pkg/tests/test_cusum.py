import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdcusum.cusum import (
    CusumState, DetectorConfig, brute_force_stat, detector_init, first_alarm, push_block, push_sample, run_to_stop,
    stopping_times, update_statistic,
)
from mmdcusum.errors import ConfigurationError, InputError
from mmdcusum.kernels import GAUSSIAN_RBF, RATIONAL_QUADRATIC, Kernel
from mmdcusum.mmd import biased_mmd, reference_build

RQ = Kernel(RATIONAL_QUADRATIC, 1.0)

increments = st.lists(st.floats(-1, 1, allow_nan=False), max_size=60)


def run(incs):
    state = CusumState()
    out = []
    for x in incs:
        update_statistic(state, x)
        out.append(state.s_hat)
    return state, out


def test_brute_force_examples():
    assert brute_force_stat([]) == 0.0
    assert brute_force_stat([-1, -1]) == 0.0
    assert brute_force_stat([0.5, -0.2, 0.3]) == pytest.approx(0.6, abs=1e-15)


def test_recursion_example():
    state, _ = run([0.5, -0.2, 0.3])
    assert state.s_hat == pytest.approx(0.6, abs=1e-15)
    assert state.s_min == 0.0


def test_all_negative_pinned_at_zero():
    _, hats = run([-0.1, -0.5, -0.01])
    assert hats == [0.0, 0.0, 0.0]


@given(increments)
def test_recursion_matches_brute_force(incs):
    state, hats = run(incs)
    for t, val in enumerate(hats, start=1):
        assert abs(val - brute_force_stat(incs[:t])) <= 1e-12
    assert state.s_min <= state.s + 1e-15
    assert all(h >= 0 for h in hats)


@given(increments, st.floats(-0.5, 0.5, allow_nan=False))
def test_shift_equivariance(incs, c):
    # Adding c to every increment is the same as lowering the offset by c.
    stats = [x + 0.7 for x in incs]
    _, a = run([s - 0.7 + c for s in stats])
    _, b = run([s - (0.7 - c) for s in stats])
    assert np.allclose(a, b, atol=1e-12, rtol=0)


@pytest.mark.parametrize("kw", [dict(r=5, delta=0.1, b=1.0, M=4), dict(r=5, delta=0.1, b=0.0),
                                dict(r=5, delta=-0.1, b=1.0), dict(r=0, delta=0.1, b=1.0)])
def test_config_preconditions(kw):
    with pytest.raises(ConfigurationError):
        DetectorConfig(**kw)


def test_default_M_is_r():
    assert DetectorConfig(r=7, delta=0.0, b=1.0).M == 7


def test_init_and_kernel_mismatch(rng):
    ref = reference_build(RQ, rng.normal(size=(10, 1)))
    state = detector_init(DetectorConfig(r=2, delta=0.0, b=1.0, kernel=RQ), ref)
    assert (state.t, state.s, state.s_min, state.s_hat, state.buffer) == (0, 0.0, 0.0, 0.0, [])
    with pytest.raises(ConfigurationError):
        detector_init(DetectorConfig(r=2, delta=0.0, b=1.0, kernel=Kernel(GAUSSIAN_RBF, 1.0)), ref)
    with pytest.raises(ConfigurationError):
        detector_init(DetectorConfig(r=2, delta=0.0, b=1.0, h=11), ref)


def test_push_sample_idle_until_block_full(rng):
    ref = reference_build(RQ, rng.normal(size=(10, 1)))
    cfg = DetectorConfig(r=2, delta=0.0, b=1.0)
    state = detector_init(cfg, ref)
    assert push_sample(state, [0.3], cfg, ref) is None
    assert state.s_hat == 0.0 and state.t == 0
    rec = push_sample(state, [0.1], cfg, ref)
    assert rec.t == 1
    assert rec.increment == biased_mmd([[0.3], [0.1]], ref)
    with pytest.raises(InputError):
        push_sample(state, [0.1, 0.2], cfg, ref)


def test_first_alarm_examples():
    assert first_alarm([0.4, 0.4], b=0.5, r=3, M=3) == 6
    assert first_alarm([0.4, 0.4, 0.4], b=0.5, r=1, M=10) is None
    # crossed at block 3, gate opens at block 10
    assert first_alarm([0.3] * 12, b=0.5, r=4, M=40) == 40


def test_run_to_stop_alarm_and_gate(rng):
    ref = reference_build(RQ, np.zeros((5, 1)))
    far = np.full((400, 1), 50.0)  # MMD ~ sqrt(2) per block
    rep = run_to_stop(iter(far), DetectorConfig(r=4, delta=0.9, b=1.0), ref, max_samples=400)
    assert rep.alarmed and rep.T == 8
    rep = run_to_stop(iter(far), DetectorConfig(r=4, delta=0.9, b=1.0, M=40), ref, max_samples=400)
    assert rep.T == 40 and rep.T % 4 == 0
    assert rep.trace[-1].s_hat > 1.0


def test_run_to_stop_censored(rng):
    ref = reference_build(RQ, rng.normal(size=(50, 1)))
    stream = rng.normal(size=(103, 1))
    rep = run_to_stop(iter(stream), DetectorConfig(r=10, delta=2.0, b=0.5), ref, max_samples=10**6)
    assert not rep.alarmed and rep.T is None
    assert rep.blocks == 10  # trailing 3 samples discarded
    assert all(r.s_hat == 0.0 for r in rep.trace)


def test_increment_bound_holds_on_blocks(rng):
    ref = reference_build(Kernel(GAUSSIAN_RBF, 0.5), rng.normal(size=(40, 2)))
    cfg = DetectorConfig(r=5, delta=0.3, b=100.0)
    state = detector_init(cfg, ref)
    for _ in range(30):
        rec = push_block(state, rng.normal(size=(5, 2)) * 3, cfg, ref)
        assert -0.3 <= rec.increment <= 2.0 - 0.3


def test_stopping_times_matches_individual_runs(rng):
    ref = reference_build(RQ, rng.normal(size=(60, 1)))
    stream = rng.normal(size=(600, 1)) + 0.4
    r = 10
    stats = [biased_mmd(stream[i:i + r], ref) for i in range(0, 600, r)]
    deltas, bs = [0.1, 0.2], [0.05, 0.3, 1.0, 50.0]
    table = stopping_times(stats, deltas, bs, r=r, M=20)
    for i, d in enumerate(deltas):
        for j, b in enumerate(bs):
            rep = run_to_stop(iter(stream), DetectorConfig(r=r, delta=d, b=b, M=20), ref, max_samples=600)
            assert table[i, j] == (rep.T if rep.alarmed else -1)


def test_kahan_sum_long_run():
    state = CusumState()
    for _ in range(10**5):
        update_statistic(state, 0.1)
    assert abs(state.s - 10**4) <= 1e-9
    assert math.isclose(state.s_hat, state.s)
