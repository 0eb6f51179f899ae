import numpy as np
import pytest

from liftseg.optim import OptimState, Schedule, optimizer_step


def test_one_cycle_shape():
    s = Schedule(peak_lr=1.0, total_steps=100, warmup_fraction=0.1, warmup_start=0.04, final_div=100)
    rates = np.array([s.rate(i) for i in range(100)])
    assert rates[0] == pytest.approx(0.04)
    assert rates[10] == pytest.approx(1.0) and rates.max() == pytest.approx(1.0)
    assert rates[-1] == pytest.approx(0.01)
    assert np.all(np.diff(rates[:11]) > 0) and np.all(np.diff(rates[10:]) <= 1e-15)


def test_constant_and_validation():
    assert Schedule(peak_lr=0.3, kind="constant").rate(999) == 0.3
    with pytest.raises(ValueError):
        Schedule(peak_lr=0)
    with pytest.raises(ValueError):
        Schedule(kind="linear")


def test_first_step_moves_by_lr():
    # with bias correction the first Adam step has magnitude lr (up to eps)
    p = {"w": np.array([1.0, -2.0])}
    st = OptimState(Schedule(peak_lr=0.1, kind="constant"))
    optimizer_step(p, {"w": np.array([3.0, -0.5])}, st)
    assert np.allclose(p["w"], [0.9, -1.9]) and st.step == 1


def test_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    st = OptimState(Schedule(peak_lr=0.1, kind="constant"), weight_decay=0.5)
    optimizer_step(p, {"w": np.array([0.0])}, st)
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_non_finite_gradient_skips():
    p = {"w": np.ones(2), "b": np.ones(1)}
    st = OptimState(Schedule(peak_lr=0.1, kind="constant"))
    optimizer_step(p, {"w": np.array([np.nan, 1.0]), "b": np.ones(1)}, st)
    assert np.array_equal(p["w"], np.ones(2)) and st.skipped == 1 and st.step == 1 and not st.m


def test_frozen_parameters_untouched():
    p = {"w": np.ones(2), "frozen": np.ones(2)}
    st = OptimState(Schedule(peak_lr=0.1, kind="constant"), weight_decay=0.1)
    optimizer_step(p, {"w": np.ones(2)}, st)
    assert np.array_equal(p["frozen"], np.ones(2)) and "frozen" not in st.m


def test_restore_continues_identically():
    r = np.random.default_rng(0)
    grads = [r.normal(size=3) for _ in range(6)]
    sched = Schedule(peak_lr=0.05, total_steps=6)
    pa = {"w": np.zeros(3)}
    sa = OptimState(sched, weight_decay=0.01)
    for g in grads:
        optimizer_step(pa, {"w": g}, sa)
    pb = {"w": np.zeros(3)}
    sb = OptimState(sched, weight_decay=0.01)
    for g in grads[:3]:
        optimizer_step(pb, {"w": g}, sb)
    sb = OptimState.restore(sb.hyper(), sb.moment_arrays())
    for g in grads[3:]:
        optimizer_step(pb, {"w": g}, sb)
    assert np.array_equal(pa["w"], pb["w"])
