import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_D, naive_DRC, naive_knn1, naive_PRC
from rmprobe import metrics as M
from rmprobe.alterations import AlterationPlan, white_noise_sequence
from rmprobe.downstream import EvalResult, knn1_accuracy, normalize_accuracy, pearson
from rmprobe.errors import DegenerateError
from rmprobe.trajectories import TrajectorySet, trajectories_from_bytes, trajectories_to_bytes

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def trajectory_batches(draw):
    n = draw(st.integers(1, 6))
    steps1 = draw(st.integers(3, 8))
    dim = draw(st.integers(1, 5))
    return draw(arrays(np.float64, (n, steps1, dim), elements=finite))


@settings(max_examples=200, deadline=None)
@given(trajectory_batches())
def test_metrics_agree_with_loops(pts):
    try:
        rec = M.measure(pts, normalize=False)
    except DegenerateError:
        return
    usable = rec.per_sample["usable"]
    for i, traj in enumerate(pts):
        assert rec.per_sample["D"][i] == pytest.approx(naive_D(traj), rel=1e-9, abs=1e-12)
        if usable[i]:
            assert rec.per_sample["D_RC"][i] == pytest.approx(naive_DRC(traj), rel=1e-9, abs=1e-12)
            assert rec.per_sample["P_RC"][i] == pytest.approx(naive_PRC(traj), rel=1e-9, abs=1e-12)
    assert rec.D >= 0 and rec.D_RC >= 0 and rec.P_RC >= 0


@settings(max_examples=100, deadline=None)
@given(trajectory_batches(), st.booleans(), st.dictionaries(st.text("abc_", min_size=1, max_size=5),
                                                         st.text("xyz =", max_size=8), max_size=3))
def test_rmtj_round_trip(pts, with_labels, meta):
    labels = np.arange(len(pts)) - 2 if with_labels else None
    t = TrajectorySet(pts, labels, meta)
    back = trajectories_from_bytes(trajectories_to_bytes(t))
    assert np.array_equal(back.points, t.points)
    assert back.metadata == meta


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1)), st.integers(0, 2**32 - 1),
       st.integers(0, 1000), st.integers(1, 20))
def test_noise_stays_in_unit_box(x, seed, index, steps):
    seq = white_noise_sequence(x, AlterationPlan.noise(steps, master_seed=seed), index).inputs
    assert seq.shape == (steps + 1, x.size)
    assert seq.min() >= 0 and seq.max() <= 1
    assert np.array_equal(seq[0], x)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 15), st.integers(1, 15), st.integers(1, 4), st.integers(0, 10**6))
def test_knn_equals_brute_force(n_ref, n_test, dim, seed):
    rng = np.random.default_rng(seed)
    ref = rng.integers(-2, 3, size=(n_ref, dim)).astype(float)  # small integer grid: many ties
    test = rng.integers(-2, 3, size=(n_test, dim)).astype(float)
    ry, ty = rng.integers(2, size=n_ref), rng.integers(2, size=n_test)
    assert knn1_accuracy(ref, ry, test, ty) == naive_knn1(ref, ry, test, ty)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20), st.integers(0, 10**6))
def test_pearson_bounded_and_symmetric(x, seed):
    y = list(np.random.default_rng(seed).normal(size=len(x)))
    try:
        r = pearson(x, y)
    except DegenerateError:
        return
    assert -1 <= r <= 1
    assert r == pytest.approx(pearson(y, x), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=10))
def test_normalized_accuracy_in_unit_interval_and_order_preserving(accs):
    out = [r.normalized_accuracy for r in normalize_accuracy([EvalResult(str(i), "t", a) for i, a in enumerate(accs)])]
    assert all(0 <= v <= 1 for v in out)
    for i in range(len(accs)):
        for j in range(len(accs)):
            if accs[i] < accs[j]:
                assert out[i] <= out[j]
