import struct

import numpy as np
import pytest

from rmprobe.alterations import AlterationPlan
from rmprobe.datagen import gen_blobs
from rmprobe.encoders import EncoderParams, EncoderSpec, Model, init_params
from rmprobe.errors import FormatError, ShapeError
from rmprobe.trajectories import (TrajectorySet, build_trajectories, read_trajectories,
                                  trajectories_from_bytes, trajectories_to_bytes, write_trajectories)


def identity_model(d, c=1.0):
    return Model(EncoderSpec(d, (), d), EncoderParams({"W0": np.eye(d) * c, "b0": np.zeros(d)}))


def random_tset(rng):
    n, steps1, dim = (int(v) for v in rng.integers(1, 8, size=3))
    labels = rng.integers(-3, 10, size=n) if rng.random() < 0.5 else None
    meta = {f"k{i}": f"v {rng.integers(100)}=x" for i in range(int(rng.integers(0, 4)))}
    return TrajectorySet(rng.normal(size=(n, steps1, dim)) * 10, labels, meta)


def test_zero_step_plan_gives_original_representation():
    data = gen_blobs(3, 2, 4, 0.1, seed=0)
    spec = EncoderSpec(4, (5,), 3)
    model = Model(spec, init_params(spec, 1))
    t = build_trajectories(model, data, AlterationPlan.noise(0))
    assert t.points.shape == (6, 1, 3)
    assert np.array_equal(t.points[:, 0], model.encode(data.inputs).astype(np.float32))


def test_identity_encoder_sees_the_altered_inputs():
    data = gen_blobs(5, 2, 6, 0.1, seed=0)
    plan = AlterationPlan.noise(5, master_seed=2)
    t = build_trajectories(identity_model(6), data, plan)
    assert t.points.shape == (10, 6, 6) and len(t) == 10 and t.steps == 5
    for i in range(len(data)):
        x = data.inputs[i]
        for j in range(1, 6):
            a = np.random.default_rng([2, i, j]).normal(0.0, 1.0, size=6) * (j / 5)
            assert np.array_equal(t.points[i, j], np.clip(x + a, 0, 1).astype(np.float32))


def test_models_share_altered_inputs():
    data = gen_blobs(4, 2, 3, 0.1, seed=5)
    plan = AlterationPlan.noise(7, master_seed=1)
    a = build_trajectories(identity_model(3), data, plan)
    b = build_trajectories(identity_model(3, 2.0), data, plan)
    assert np.array_equal(b.points, 2 * a.points)


def test_build_is_reproducible():
    data = gen_blobs(4, 2, 3, 0.1, seed=5)
    spec = EncoderSpec(3, (4,), 2)
    model = Model(spec, init_params(spec, 3))
    plan = AlterationPlan.noise(4)
    a = build_trajectories(model, data, plan)
    b = build_trajectories(model, data, plan)
    assert np.array_equal(a.points, b.points) and a.metadata == b.metadata
    assert np.array_equal(a.labels, data.labels)


def test_precomputed_alterations_shape_checked():
    data = gen_blobs(2, 2, 3, 0.1, seed=0)
    with pytest.raises(ShapeError):
        build_trajectories(identity_model(3), data, AlterationPlan.noise(4), altered=np.zeros((4, 4, 3)))


def test_rmtj_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    for k in range(20):
        t = random_tset(rng)
        path = tmp_path / f"t{k}.rmtj"
        write_trajectories(t, path)
        back = read_trajectories(path)
        assert back.points.dtype == np.float32
        assert np.array_equal(back.points, t.points)
        assert (back.labels is None) == (t.labels is None)
        if t.labels is not None:
            assert np.array_equal(back.labels, t.labels)
        assert back.metadata == t.metadata
        assert trajectories_to_bytes(back) == path.read_bytes()


def test_rmtj_header_layout():
    t = TrajectorySet(np.zeros((2, 3, 4)), np.array([1, 2]), {"a": "b"})
    buf = trajectories_to_bytes(t)
    assert buf[:4] == b"RMTJ"
    assert struct.unpack_from("<IIIIII", buf, 4) == (1, 2, 3, 4, 1, 4)
    assert buf[28:32] == b"a=b\n"
    assert len(buf) == 32 + 2 * (4 + 3 * 4 * 4)


def _good():
    return trajectories_to_bytes(TrajectorySet(np.ones((3, 4, 2)), np.arange(3), {"x": "1"}))


def test_rmtj_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        trajectories_from_bytes(b"RMXX" + _good()[4:])


def test_rmtj_bad_version():
    buf = bytearray(_good())
    buf[4:8] = struct.pack("<I", 7)
    with pytest.raises(FormatError, match="version"):
        trajectories_from_bytes(bytes(buf))


def test_rmtj_truncated():
    buf = bytearray(_good())
    with pytest.raises(FormatError, match="truncated"):
        trajectories_from_bytes(bytes(buf[:-5]))
    buf[8:12] = struct.pack("<I", 10)  # header claims more trajectories than stored
    with pytest.raises(FormatError, match="truncated"):
        trajectories_from_bytes(bytes(buf))
    with pytest.raises(FormatError, match="truncated"):
        trajectories_from_bytes(_good()[:12])


def test_rmtj_size_overflow():
    head = b"RMTJ" + struct.pack("<IIIIII", 1, 0xFFFFFFFF, 0xFFFFFFFF, 0xFFFFFFFF, 0, 0)
    with pytest.raises(FormatError, match="overflow"):
        trajectories_from_bytes(head)


def test_rmtj_bad_label_flag():
    buf = bytearray(_good())
    buf[20:24] = struct.pack("<I", 2)
    with pytest.raises(FormatError):
        trajectories_from_bytes(bytes(buf))


def test_metadata_rejects_newlines():
    with pytest.raises(ValueError):
        trajectories_to_bytes(TrajectorySet(np.zeros((1, 2, 1)), None, {"a": "x\ny"}))
