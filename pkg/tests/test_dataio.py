import numpy as np
import pytest

from neuralfuse import dataio
from neuralfuse.dataio import Dataset, FormatError
from neuralfuse.eopm import BaseTrainConfig, train_base
from neuralfuse.harness import float_accuracy
from neuralfuse.models import build_base


def write_cifar(directory, records=dataio.RECORDS_PER_FILE, truncate=None, seed=0):
    rng = np.random.default_rng(seed)
    names = dataio.TRAIN_FILES + (dataio.TEST_FILE,)
    for i, name in enumerate(names):
        rec = np.empty((records, dataio.RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = rng.integers(0, 10, records)
        rec[:, 1:] = rng.integers(0, 256, (records, 3072))
        if i == 0:
            rec[0, 1:] = 0
            rec[1, 1:] = 255
        raw = rec.tobytes()
        if name == truncate:
            raw = raw[:-1]
        (directory / name).write_bytes(raw)


def test_normalization_endpoints_and_round_trip():
    assert dataio.normalize(0) == -1.0 and dataio.normalize(255) == 1.0
    v = np.arange(256)
    x = dataio.normalize(v)
    assert np.abs(x - (v / 127.5 - 1)).max() == 0
    assert np.array_equal(dataio.denormalize(x), v)


def test_load_fake_archive(tmp_path):
    write_cifar(tmp_path)
    train, test = dataio.load_cifar10(tmp_path)
    assert len(train) == 50_000 and len(test) == 10_000
    assert train.shape == (3, 32, 32) and train.num_classes == 10
    assert train.images[0].min() == -1.0 and train.images[1].max() == 1.0
    assert train.labels.min() >= 0 and train.labels.max() <= 9
    raw = np.fromfile(tmp_path / dataio.TRAIN_FILES[0], dtype=np.uint8)[:dataio.RECORD_BYTES]
    # R plane first, row major
    assert train.images[0].shape == (3, 32, 32)
    rec2 = np.fromfile(tmp_path / dataio.TRAIN_FILES[0], dtype=np.uint8)[2 * 3073:3 * 3073]
    assert train.labels[2] == rec2[0]
    np.testing.assert_array_equal(train.images[2][0, 0, :4], dataio.normalize(rec2[1:5]))
    np.testing.assert_array_equal(train.images[2][1, 0, 0], dataio.normalize(rec2[1 + 1024]))
    assert raw[0] == train.labels[0]


def test_truncated_file_names_file(tmp_path):
    write_cifar(tmp_path, records=10, truncate="data_batch_1.bin")
    with pytest.raises(FormatError, match="data_batch_1.bin: size"):
        dataio.load_cifar10(tmp_path)


def test_record_count_mismatch(tmp_path):
    write_cifar(tmp_path, records=10)
    with pytest.raises(FormatError, match="expected 10000 records"):
        dataio.load_cifar10(tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(FormatError, match="data_batch_1.bin"):
        dataio.load_cifar10(tmp_path)


def _labeled(n_per_class=20, classes=5):
    labels = np.repeat(np.arange(classes), n_per_class)
    images = np.linspace(-1, 1, labels.size)[:, None, None, None] * np.ones((1, 1, 2, 2))
    return Dataset(images, labels, classes)


def test_subset_deterministic_and_relabelled():
    ds = _labeled()
    a, b = dataio.subset(ds, [0, 1], 10, seed=7), dataio.subset(ds, [0, 1], 10, seed=7)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [10, 10]
    only = dataio.subset(ds, [3], 10)
    assert len(only) == 10 and set(only.labels) == {0}


def test_subset_all_is_permutation():
    ds = _labeled()
    s = dataio.subset(ds, [2], 20, seed=1)
    np.testing.assert_array_equal(np.sort(s.images[:, 0, 0, 0]), np.sort(ds.images[ds.labels == 2][:, 0, 0, 0]))


def test_subset_errors():
    ds = _labeled()
    with pytest.raises(ValueError):
        dataio.subset(ds, [0], 21)
    with pytest.raises(ValueError):
        dataio.subset(ds, [9], 1)


def test_dataset_is_read_only_and_validated():
    ds = _labeled()
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 0.5
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 1.5), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 2, 2)), np.array([2]), 2)


def test_synth_deterministic_and_bounded():
    a, b = dataio.synth_dataset(3, 10, 8, seed=4), dataio.synth_dataset(3, 10, 8, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.min() >= -1 and a.images.max() <= 1
    assert np.bincount(a.labels).tolist() == [10, 10, 10]
    c = dataio.synth_dataset(3, 10, 8, seed=4, split="test")
    assert not np.array_equal(a.images, c.images)
    with pytest.raises(ValueError):
        dataio.synth_dataset(2, 10, 4)


def test_synth_two_class_baseline_accuracy():
    train = dataio.synth_dataset(2, 200, 16, seed=0)
    test = dataio.synth_dataset(2, 100, 16, seed=0, split="test")
    g = build_base("tinycnn-a", train.shape, 2, seed=0)
    train_base(g, train, BaseTrainConfig(epochs=3))
    assert float_accuracy(g, test) > 90
