import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitnorm.data import (
    BatchPlan,
    DataFormatError,
    Dataset,
    batch_stream,
    batches,
    load_cifar10,
    load_mnist,
    read_cifar10_bin,
    read_idx,
    read_idx_array,
    synthetic_dataset,
    value_range,
)

MNIST_DIR = Path("/root/data/mnist")


def idx_bytes(arr: np.ndarray) -> bytes:
    magic = 0x0803 if arr.ndim == 3 else 0x0801
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()


def write_idx_pair(tmp_path, images, labels, gz=False):
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    for path, arr in ((ip, images), (lp, labels)):
        raw = idx_bytes(arr)
        if gz:
            path = path.with_suffix(".gz")
            raw = gzip.compress(raw)
        path.write_bytes(raw)
    return (ip, lp) if not gz else (ip.with_suffix(".gz"), lp.with_suffix(".gz"))


# --- IDX ---------------------------------------------------------------------


def test_idx_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, (5, 3, 4))
    images[0, 0, 0] = 255
    labels = np.array([0, 9, 3, 3, 1])
    d = read_idx(*write_idx_pair(tmp_path, images, labels))
    assert d.images.shape == (5, 3, 4, 1) and d.images.dtype == np.float32
    assert d.images[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(d.images[..., 0], (images / 255).astype(np.float32))
    assert d.labels.tolist() == labels.tolist()


def test_idx_gzip(tmp_path, rng):
    images = rng.integers(0, 256, (2, 2, 2))
    d = read_idx(*write_idx_pair(tmp_path, images, np.array([1, 2]), gz=True))
    assert len(d) == 2


def test_idx_truncated_names_missing_bytes(tmp_path):
    path = tmp_path / "t.idx"
    path.write_bytes(idx_bytes(np.zeros((2, 3, 3)))[:-5])
    with pytest.raises(DataFormatError, match="missing 5 bytes"):
        read_idx_array(path)
    path.write_bytes(struct.pack(">I", 0x0803) + b"\x00\x00")
    with pytest.raises(DataFormatError, match="missing 10 bytes"):
        read_idx_array(path)


def test_idx_rejects_bad_files(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">I", 0x0802) + b"\x00" * 8)
    with pytest.raises(DataFormatError, match="magic"):
        read_idx_array(path)
    path.write_bytes(struct.pack(">I", 0x0803) + struct.pack(">3I", 2**20, 2**20, 2**20))
    with pytest.raises(DataFormatError, match="overflow"):
        read_idx_array(path)
    path.write_bytes(idx_bytes(np.zeros(3)) + b"\x01")
    with pytest.raises(DataFormatError, match="trailing"):
        read_idx_array(path)


def test_idx_pair_mismatch(tmp_path):
    with pytest.raises(DataFormatError):
        read_idx(*write_idx_pair(tmp_path, np.zeros((3, 2, 2)), np.array([0, 1])))
    with pytest.raises(DataFormatError):
        read_idx(*write_idx_pair(tmp_path, np.zeros((2, 2, 2)), np.array([0, 11])))


@pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST files not present")
def test_canonical_mnist_shapes():
    train = load_mnist(MNIST_DIR, "train")
    assert train.images.shape == (60000, 28, 28, 1)
    assert load_mnist(MNIST_DIR, "test").images.shape == (10000, 28, 28, 1)


def test_missing_mnist(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


# --- CIFAR-10 ----------------------------------------------------------------


def cifar_records(rng, n):
    labels = rng.integers(0, 10, n).astype(np.uint8)
    labels[0] = 9
    pixels = rng.integers(0, 256, (n, 3072)).astype(np.uint8)
    return labels, pixels, np.concatenate([labels[:, None], pixels], axis=1).tobytes()


def test_cifar_reassembly_matches_index_oracle(tmp_path, rng):
    labels, pixels, raw = cifar_records(rng, 10)
    assert len(raw) == 30730
    (tmp_path / "b.bin").write_bytes(raw)
    d = read_cifar10_bin([tmp_path / "b.bin"])
    assert len(d) == 10 and d.labels[0] == 9
    for n in range(10):
        for r, c, ch in ((0, 0, 0), (31, 31, 2), (5, 17, 1), (20, 3, 0)):
            assert d.images[n, r, c, ch] == np.float32(pixels[n, ch * 1024 + r * 32 + c]) / np.float32(255)
    expected = pixels.reshape(10, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / np.float32(255)
    assert d.images.tobytes() == expected.tobytes()


def test_cifar_record_size_mismatch(tmp_path, rng):
    _, _, raw = cifar_records(rng, 2)
    (tmp_path / "b.bin").write_bytes(raw[:-1])
    with pytest.raises(DataFormatError, match="3073"):
        read_cifar10_bin([tmp_path / "b.bin"])


def test_cifar_directory_layout(tmp_path, rng):
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    (sub / "test_batch.bin").write_bytes(cifar_records(rng, 3)[2])
    assert len(load_cifar10(tmp_path, "test")) == 3


# --- value_range ---------------------------------------------------------------


def test_value_range():
    d = Dataset(np.array([0.0, 1.0, 0.5, 0.25], dtype=np.float32).reshape(4, 1, 1, 1), np.zeros(4, dtype=np.int64), 1)
    out = value_range(d)
    assert out.images.ravel().tolist() == [-1.0, 1.0, 0.0, -0.5]
    with pytest.raises(ValueError, match="twice"):
        value_range(out)


def test_value_range_mean():
    d = synthetic_dataset(n=50)
    np.testing.assert_allclose(value_range(d).images.mean(), 2 * d.images.mean() - 1, atol=1e-6)


# --- batching ------------------------------------------------------------------


def test_batch_sizes_and_one_hot():
    d = synthetic_dataset(n=10)
    got = list(batches(d, BatchPlan(seed=0, batch_size=4)))
    assert [len(x) for x, _ in got] == [4, 4, 2]
    for x, y in got:
        assert np.all(y.sum(1) == 1)
    with pytest.raises(ValueError):
        BatchPlan(seed=0, batch_size=0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 200), seed=st.integers(0, 2**32), epoch=st.integers(0, 50), bs=st.integers(1, 64))
def test_epoch_is_a_bijection(n, seed, epoch, bs):
    plan = BatchPlan(seed, bs)
    perm = plan.permutation(n, epoch)
    assert sorted(perm.tolist()) == list(range(n))
    assert np.array_equal(perm, plan.permutation(n, epoch))


def test_batches_cover_each_example_once():
    d = synthetic_dataset(n=23)
    tagged = Dataset(np.arange(23, dtype=np.float32).reshape(23, 1, 1, 1) / 23, d.labels, d.class_count)
    seen = np.concatenate([x.ravel() for x, _ in batches(tagged, BatchPlan(3, 5), epoch=2)])
    assert sorted(np.rint(seen * 23).astype(int).tolist()) == list(range(23))


def test_stream_is_deterministic_and_reshuffles():
    d = synthetic_dataset(n=12)

    def take(k):
        s = batch_stream(d, BatchPlan(seed=7, batch_size=5))
        return [next(s) for _ in range(k)]

    a, b = take(7), take(7)
    assert all(x.tobytes() == y.tobytes() and t.tobytes() == u.tobytes() for (x, t), (y, u) in zip(a, b))
    assert [len(x) for x, _ in a] == [5, 5, 2, 5, 5, 2, 5]
    assert a[0][0].tobytes() != a[3][0].tobytes()


# --- synthetic -----------------------------------------------------------------


def test_synthetic_dataset():
    a, b = synthetic_dataset(2, 64, 8, 8, 1, seed=0), synthetic_dataset(2, 64, 8, 8, 1, seed=0)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.images.min() >= 0 and a.images.max() <= 1
    counts = np.bincount(a.labels)
    assert counts.max() - counts.min() <= 1
    m0 = a.images[a.labels == 0].mean(axis=(1, 2, 3))
    m1 = a.images[a.labels == 1].mean(axis=(1, 2, 3))
    # class brightness levels are 0.2 and 0.8; noise averages far below the gap
    assert m0.max() + 0.3 < m1.min()


def test_synthetic_many_classes_balanced():
    d = synthetic_dataset(class_count=5, n=23, seed=4, channels=3)
    counts = np.bincount(d.labels, minlength=5)
    assert counts.max() - counts.min() <= 1
    assert d.images.shape == (23, 8, 8, 3)
