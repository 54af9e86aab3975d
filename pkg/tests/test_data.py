import struct

import numpy as np
import pytest

from sepnorm.data import (MAGIC, Dataset, DatasetError, SyntheticDatasetSpec, dataset_digest, generate,
                          load_dataset, read_snds, to_bytes, to_float, write_dataset, write_snds)


class TestSpec:
    def test_balanced_counts(self):
        splits = generate(SyntheticDatasetSpec(classes=4, train_size=256, test_size=256))
        for ds in splits.values():
            assert len(ds) == 256
            assert np.bincount(ds.labels, minlength=4).tolist() == [64, 64, 64, 64]

    def test_rejects_unbalanced_sizes(self):
        with pytest.raises(DatasetError):
            SyntheticDatasetSpec(classes=3, train_size=10)

    def test_rejects_unknown_kind(self):
        with pytest.raises(DatasetError):
            SyntheticDatasetSpec(kind="mnist")

    def test_splits_differ(self):
        splits = generate(SyntheticDatasetSpec(train_size=64, test_size=64))
        assert splits["train"].images.tobytes() != splits["test"].images.tobytes()


class TestFormat:
    def test_layout_bit_exact(self, tmp_path):
        ds = Dataset(np.arange(12, dtype=np.uint8).reshape(3, 2, 2), np.array([0, 1, 1], dtype=np.uint8), 2)
        write_snds(tmp_path / "a.snds", ds)
        raw = (tmp_path / "a.snds").read_bytes()
        assert raw[:4] == MAGIC == b"SNDS"
        assert struct.unpack_from("<4I", raw, 4) == (3, 2, 2, 2)
        assert raw[20:32] == bytes(range(12))
        assert raw[32:] == b"\x00\x01\x01"

    def test_roundtrip(self, tmp_path):
        splits = generate(SyntheticDatasetSpec(train_size=16, test_size=8, image_side=8))
        write_dataset(tmp_path, splits)
        back = load_dataset(tmp_path)
        for k in splits:
            assert back[k].images.tobytes() == splits[k].images.tobytes()
            assert back[k].labels.tobytes() == splits[k].labels.tobytes()

    def test_truncated_file(self, tmp_path):
        ds = generate(SyntheticDatasetSpec(train_size=4, test_size=4, image_side=4))["train"]
        write_snds(tmp_path / "x.snds", ds)
        (tmp_path / "y.snds").write_bytes((tmp_path / "x.snds").read_bytes()[:-3])
        with pytest.raises(DatasetError):
            read_snds(tmp_path / "y.snds")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "z.snds").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(DatasetError):
            read_snds(tmp_path / "z.snds")

    def test_missing_split(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            write_dataset(blocker / "sub", generate(SyntheticDatasetSpec(train_size=4, test_size=4, image_side=4)))

    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticDatasetSpec(train_size=32, test_size=32, seed=9)
        write_dataset(tmp_path / "a", generate(spec))
        write_dataset(tmp_path / "b", generate(spec))
        assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")
        write_dataset(tmp_path / "c", generate(SyntheticDatasetSpec(train_size=32, test_size=32, seed=10)))
        assert dataset_digest(tmp_path / "a") != dataset_digest(tmp_path / "c")


def test_pixel_mapping():
    assert to_float(np.array([0, 255], dtype=np.uint8)).tolist() == [-3.0, 3.0]
    x = np.linspace(-3, 3, 256)
    assert to_bytes(x).tolist() == list(range(256))


@pytest.mark.parametrize("kind", ["class-blobs", "textures"])
def test_global_statistics_carry_class_information(kind):
    """A one-feature threshold rule fitted on train beats chance on test."""
    spec = SyntheticDatasetSpec(kind=kind, classes=4, train_size=512, test_size=512)
    splits = generate(spec)

    def feature(ds):
        x = ds.floats()
        if kind == "class-blobs":
            return x.mean(axis=(1, 2))
        return np.abs(np.diff(x, axis=2)).mean(axis=(1, 2))  # roughness tracks frequency

    f_tr, f_te = feature(splits["train"]), feature(splits["test"])
    centers = np.array([f_tr[splits["train"].labels == c].mean() for c in range(4)])
    pred = np.abs(f_te[:, None] - centers[None, :]).argmin(axis=1)
    assert (pred == splits["test"].labels).mean() > 0.25 + 0.1
