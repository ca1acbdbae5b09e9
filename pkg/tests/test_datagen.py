import struct

import numpy as np
import pytest

from rmprobe.datagen import (Dataset, gen_blobs, gen_rings, load_idx, read_csv, ring_radius, write_csv,
                             write_idx)
from rmprobe.downstream import knn1_accuracy
from rmprobe.errors import FormatError


def test_zero_spread_collapses_to_centers():
    d = gen_blobs(5, 3, 4, 0.0, seed=0)
    for c in range(3):
        rows = d.inputs[d.labels == c]
        assert np.all(rows == rows[0])


def test_generation_is_deterministic():
    for gen in (lambda s: gen_blobs(10, 3, 5, 0.1, s), lambda s: gen_rings(10, 3, 5, 0.05, s)):
        a, b, c = gen(1), gen(1), gen(2)
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.inputs, c.inputs)


def test_blobs_are_nearest_neighbour_separable():
    # train-on-train is trivially 1.0 (self match), so score a held-out split
    train, test = gen_blobs(100, 4, 16, 0.05, seed=0).train_test_split(0.5, seed=0)
    assert knn1_accuracy(train.inputs, train.labels, test.inputs, test.labels) > 0.99


def test_rings_radii():
    d = gen_rings(50, 2, 3, 0.0, seed=0)
    r = np.hypot(d.inputs[:, 0] - 0.5, d.inputs[:, 1] - 0.5)
    np.testing.assert_allclose(r[d.labels == 0], 0.15, atol=1e-12)
    np.testing.assert_allclose(r[d.labels == 1], 0.30, atol=1e-12)
    assert np.all(d.inputs[:, 2] == 0.5)
    assert ring_radius(5, 6) * 1 <= 0.5


def test_rings_not_linearly_separable():
    d = gen_rings(200, 2, 8, 0.01, seed=1)
    train, test = d.train_test_split(0.3, seed=0)

    def design(x):
        return np.hstack([x, np.ones((len(x), 1))])

    targets = np.eye(2)[train.labels]
    w, *_ = np.linalg.lstsq(design(train.inputs), targets, rcond=None)
    linear = np.mean(np.argmax(design(test.inputs) @ w, axis=1) == test.labels)
    nn = knn1_accuracy(train.inputs, train.labels, test.inputs, test.labels)
    assert linear < 0.8
    assert nn > 0.95


def test_inputs_in_unit_box_and_balanced():
    for d in (gen_blobs(40, 5, 6, 0.5, 3), gen_rings(40, 4, 6, 0.2, 3)):
        assert d.inputs.min() >= 0 and d.inputs.max() <= 1
        assert np.all(np.bincount(d.labels) == 40)


def test_generator_validation():
    with pytest.raises(ValueError):
        gen_blobs(5, 1, 3, 0.1, 0)
    with pytest.raises(ValueError):
        gen_rings(5, 2, 1, 0.1, 0)


def test_csv_round_trip(tmp_path):
    d = gen_blobs(5, 2, 3, 0.1, seed=0)
    write_csv(d, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv")
    assert np.array_equal(back.inputs, d.inputs) and np.array_equal(back.labels, d.labels)
    unlabeled = Dataset(d.inputs)
    write_csv(unlabeled, tmp_path / "u.csv")
    assert read_csv(tmp_path / "u.csv").labels is None


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x0,x1,label\n0.1,0.2,0\n0.3,zz,1\n")
    with pytest.raises(FormatError, match=":3"):
        read_csv(p)
    p.write_text("x0,label\n0.1\n")
    with pytest.raises(FormatError):
        read_csv(p)


def _idx(tmp_path, images, labels, img_magic=0x803):
    n, r, c = images.shape
    (tmp_path / "i.idx").write_bytes(struct.pack(">IIII", img_magic, n, r, c) + images.astype(np.uint8).tobytes())
    (tmp_path / "l.idx").write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))
    return tmp_path / "i.idx", tmp_path / "l.idx"


def test_idx_load(tmp_path):
    images = np.array([[[0, 255], [128, 1]], [[255, 255], [0, 0]]])
    d = load_idx(*_idx(tmp_path, images, [3, 7]))
    assert d.inputs.shape == (2, 4)
    assert d.inputs[0, 1] == 1.0 and d.inputs[0, 0] == 0.0
    assert d.inputs[0, 2] == pytest.approx(128 / 255)
    assert list(d.labels) == [3, 7]


def test_idx_errors(tmp_path):
    images = np.zeros((2, 2, 2))
    with pytest.raises(FormatError, match="magic"):
        load_idx(*_idx(tmp_path, images, [0, 1], img_magic=0x801))
    with pytest.raises(FormatError, match="mismatch"):
        load_idx(*_idx(tmp_path, images, [0, 1, 1]))
    i, l = _idx(tmp_path, images, [0, 1])
    i.write_bytes(i.read_bytes()[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(i, l)


def test_idx_round_trip(tmp_path):
    d = gen_blobs(4, 3, 16, 0.1, seed=2)
    write_idx(d, tmp_path / "a", tmp_path / "b")
    back = load_idx(tmp_path / "a", tmp_path / "b")
    assert np.array_equal(back.labels, d.labels)
    assert np.abs(back.inputs - d.inputs).max() <= 0.5 / 255 + 1e-12


def test_split_is_stratified_and_seeded():
    d = gen_blobs(10, 3, 2, 0.1, 0)
    tr, te = d.train_test_split(0.2, seed=5)
    assert np.all(np.bincount(te.labels) == 2) and len(tr) == 24
    tr2, _ = d.train_test_split(0.2, seed=5)
    assert np.array_equal(tr.inputs, tr2.inputs)
