import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdgm.dataio import (Dataset, IdxFormatError, binarize, load_dataset, load_idx_images,
                          load_idx_labels, make_ssl_split, pair, pool_bytes,
                          prepare_mnist_from_pool, prepare_mnist_subsets, read_idx_image_bytes,
                          save_dataset, synth_gaussian_classes, write_idx_images,
                          write_idx_labels)
from mmdgm.margin import pegasos_fit, predict


def _image_file(path, n, rows, cols, payload: bytes):
    path.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + payload)
    return path


def test_idx_image_examples(tmp_path):
    p = _image_file(tmp_path / "a.idx", 2, 2, 2, bytes([0, 128, 255, 1, 2, 3, 4, 5]))
    x = load_idx_images(p)
    assert x.shape == (2, 4)
    assert x[0, 1] == 0.5
    assert x[0, 2] == 255 / 256


def test_idx_label_example(tmp_path):
    p = tmp_path / "l.idx"
    p.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 1, 7]))
    assert load_idx_labels(p).tolist() == [7]


def test_idx_errors_name_byte_offsets(tmp_path):
    p = _image_file(tmp_path / "t.idx", 2, 2, 2, bytes(7))
    with pytest.raises(IdxFormatError, match="byte 23"):
        load_idx_images(p)
    bad = tmp_path / "m.idx"
    bad.write_bytes(struct.pack(">IIII", 0x801, 1, 1, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx_images(bad)
    extra = _image_file(tmp_path / "e.idx", 1, 1, 1, b"\x00\x01")
    with pytest.raises(IdxFormatError, match="trailing"):
        load_idx_images(extra)
    (tmp_path / "h.idx").write_bytes(b"\x00\x00\x08")
    with pytest.raises(IdxFormatError, match="byte"):
        load_idx_images(tmp_path / "h.idx")


def test_label_out_of_range(tmp_path):
    write_idx_labels(tmp_path / "l.idx", [1, 3, 2])
    assert load_idx_labels(tmp_path / "l.idx", n_classes=4).tolist() == [1, 3, 2]
    with pytest.raises(IdxFormatError, match="byte 9"):
        load_idx_labels(tmp_path / "l.idx", n_classes=3)


def test_pairing_count_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        pair(np.zeros((3, 4)), np.zeros(2, dtype=int))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6),
       st.booleans())
def test_idx_round_trip_is_bit_exact(n, rows, cols, seed, gz):
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, size=(n, rows * cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n)
    suffix = ".gz" if gz else ""
    with tempfile.TemporaryDirectory() as d:
        img, lab = Path(d) / f"i.idx{suffix}", Path(d) / f"l.idx{suffix}"
        write_idx_images(img, raw, rows, cols)
        write_idx_labels(lab, labels)
        back, r, c = read_idx_image_bytes(img)
        assert (r, c) == (rows, cols)
        assert back.tobytes() == raw.tobytes()
        assert np.array_equal(load_idx_labels(lab), labels)
        # floats written from a load come back identical
        x = load_idx_images(img)
        write_idx_images(img, x, rows, cols)
        assert load_idx_images(img).tobytes() == x.tobytes()


def test_gzip_reading(tmp_path):
    blob = struct.pack(">II", 0x801, 2) + bytes([3, 4])
    with gzip.open(tmp_path / "l.idx.gz", "wb") as fh:
        fh.write(blob)
    assert load_idx_labels(tmp_path / "l.idx.gz").tolist() == [3, 4]


def test_dataset_cache_round_trip(tmp_path):
    ds = synth_gaussian_classes(3, 5, D=16, seed=2)
    ds = Dataset(np.rint(ds.images * 256).clip(0, 255) / 256, ds.labels, 4, 3)
    save_dataset(ds, "toy", tmp_path)
    back = load_dataset("toy", tmp_path, n_classes=3)
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.side == 4
    assert load_dataset(str(tmp_path / "toy"), n_classes=3).images.shape == (15, 16)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.array([[1.5]]))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), n_classes=3)
    ds = Dataset(np.zeros((2, 4)), np.array([0, 1]), side=2)
    with pytest.raises(ValueError):
        ds.images[0, 0] = 1.0


def test_synth_examples():
    ds = synth_gaussian_classes(3, 4, spread=0.0, seed=0)
    for c in range(3):
        rows = ds.images[ds.labels == c]
        assert np.all(rows == rows[0])
    a, b = synth_gaussian_classes(4, 10, seed=5), synth_gaussian_classes(4, 10, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    with pytest.raises(ValueError):
        synth_gaussian_classes(1, 10)


def test_synth_two_classes_linearly_separable():
    ds = synth_gaussian_classes(2, 500, spread=0.1, seed=1)
    x = np.hstack([ds.images, np.ones((len(ds), 1))])
    w = pegasos_fit(x, ds.labels, reg=1e-3, epochs=10, seed=0)
    assert np.mean(predict(w, x) != ds.labels) < 0.01


def test_synth_high_dimensional_layout():
    ds = synth_gaussian_classes(4, 10, D=784, seed=3)
    assert ds.side == 28 and ds.images.shape == (40, 784)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_split_examples_and_invariants():
    ds = synth_gaussian_classes(4, 30, seed=0)
    sp = make_ssl_split(ds, 4, 10, seed=1)
    assert sorted(ds.labels[sp.labeled_idx].tolist()) == [0, 1, 2, 3]
    sets = [set(sp.labeled_idx), set(sp.unlabeled_idx), set(sp.valid_idx)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert sum(map(len, sets)) == len(ds)
    sp8 = make_ssl_split(ds, 8, 0, seed=2)
    assert np.bincount(ds.labels[sp8.labeled_idx]).tolist() == [2, 2, 2, 2]
    with pytest.raises(ValueError):
        make_ssl_split(ds, 6, 0, seed=0)
    with pytest.raises(ValueError):
        make_ssl_split(ds, 124, 0, seed=0)


def test_split_seed_behaviour():
    ds = synth_gaussian_classes(4, 50, seed=0)
    assert make_ssl_split(ds, 8, 20, 3) == make_ssl_split(ds, 8, 20, 3)
    labeled = {tuple(make_ssl_split(ds, 8, 20, s).labeled_idx) for s in range(10)}
    assert len(labeled) == 10


def test_binarize_modes():
    ds = Dataset(np.array([[0.5, 0.49, 0.0, 1.0]]))
    assert binarize(ds, "none") is ds
    assert binarize(ds, "threshold").images.tolist() == [[1.0, 0.0, 0.0, 1.0]]
    p = np.array([0.1, 0.5, 0.8])
    big = Dataset(np.tile(p, (10_000, 1)))
    mean = binarize(big, "stochastic", seed=0).images.mean(axis=0)
    assert np.all(np.abs(mean - p) < 4 * np.sqrt(p * (1 - p) / 10_000))
    for mode in ("threshold", "stochastic"):
        out = binarize(big, mode, seed=1).images
        assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        binarize(ds, "otsu")


def test_pool_bytes():
    raw = np.arange(16, dtype=np.uint8).reshape(1, 16)
    assert pool_bytes(raw, 4, 2).tolist() == [[2, 4, 10, 12]]
    assert pool_bytes(np.full((2, 784), 200, np.uint8), 28, 8).shape == (2, 64)


def _fake_raw(tmp_path, n_train, n_test, seed=0):
    rng = np.random.default_rng(seed)
    raw = tmp_path / "raw"
    tr, te = rng.integers(0, 256, (n_train, 784), dtype=np.uint8), rng.integers(0, 256, (n_test, 784), dtype=np.uint8)
    write_idx_images(raw / "train-images-idx3-ubyte.gz", tr, 28, 28)
    write_idx_labels(raw / "train-labels-idx1-ubyte.gz", rng.integers(0, 10, n_train))
    write_idx_images(raw / "t10k-images-idx3-ubyte", te, 28, 28)
    write_idx_labels(raw / "t10k-labels-idx1-ubyte", rng.integers(0, 10, n_test))
    return raw, tr, te


def test_prepare_subsets_from_raw_files(tmp_path):
    raw, tr, te = _fake_raw(tmp_path, 51000, 2000)
    prepare_mnist_subsets(raw, tmp_path / "cache")
    train = load_dataset("mnist-1k", tmp_path / "cache")
    valid = load_dataset("mnist-1k.valid", tmp_path / "cache")
    test = load_dataset("mnist-1k.test", tmp_path / "cache")
    assert (train.images * 256).astype(np.uint8).tobytes() == tr[:1000].tobytes()
    assert (valid.images * 256).astype(np.uint8).tobytes() == tr[50000:51000].tobytes()
    assert len(test) == 2000
    assert load_dataset("mnist-8x8", tmp_path / "cache").images.shape == (1000, 64)


def test_prepare_subsets_needs_enough_images(tmp_path):
    raw, _, _ = _fake_raw(tmp_path, 1200, 2000)
    with pytest.raises(ValueError):
        prepare_mnist_subsets(raw, tmp_path / "cache")


def test_prepare_from_csv_pool(tmp_path):
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(10), 420)
    pix = rng.integers(0, 256, (len(y), 784))
    np.savetxt(tmp_path / "pool.csv", np.hstack([pix, y[:, None]]), fmt="%d", delimiter=",")
    prepare_mnist_from_pool(tmp_path / "pool.csv", tmp_path / "cache", seed=0)
    parts = {s: load_dataset(f"mnist-1k{s}", tmp_path / "cache") for s in ("", ".valid", ".test")}
    assert [len(d) for d in parts.values()] == [1000, 1000, 2000]
    for d in parts.values():
        assert len(set(np.bincount(d.labels).tolist())) == 1
    rows = [set(map(bytes, (d.images * 256).astype(np.uint8))) for d in parts.values()]
    assert not (rows[0] & rows[1]) and not (rows[0] & rows[2]) and not (rows[1] & rows[2])
    small = tmp_path / "small.csv"
    np.savetxt(small, np.hstack([pix[:100], y[:100, None]]), fmt="%d", delimiter=",")
    with pytest.raises(ValueError):
        prepare_mnist_from_pool(small, tmp_path / "c2")
