import numpy as np
import pandas as pd
import pytest

from src.data import (
    LabeledDataset,
    ShiftSpec,
    SoftDataset,
    export_csv,
    gen_blobs,
    gen_digits_like,
    load_dataset,
    make_auxiliary,
    save_dataset,
    train_test_split,
)
from src.errors import DatasetFormatError, DomainError
from src.metrics import accuracy
from src.models import build_zoo_network
from src.training import TrainingConfig, fit_classifier


class TestGenerators:
    def test_blobs_balanced_and_bounded(self):
        ds = gen_blobs(5, 6, 500, 0.2, seed=1)
        assert ds.inputs.shape == (500, 6)
        np.testing.assert_array_equal(ds.class_counts(), [100] * 5)
        assert ds.inputs.min() >= -1.0 and ds.inputs.max() <= 1.0

    def test_blobs_deterministic(self):
        a, b = gen_blobs(3, 4, 60, 0.1, seed=9), gen_blobs(3, 4, 60, 0.1, seed=9)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("K, n", [(1, 10), (4, 3)])
    def test_blobs_rejects_degenerate(self, K, n):
        with pytest.raises(DomainError):
            gen_blobs(K, 4, n, 0.1, seed=0)

    def test_spread_zero_is_linearly_separable(self):
        ds = gen_blobs(4, 8, 200, 0.0, seed=2)
        net = build_zoo_network("linear", ds.input_shape, 4, seed=0)
        fit_classifier(net, ds, TrainingConfig(epochs=30, lr=0.05, optimizer="adam", batch_size=32, seed=0))
        assert accuracy(net, ds) == 1.0

    def test_digits_shape(self, digits_set):
        assert digits_set.inputs.shape == (200, 1, 8, 8)
        assert digits_set.class_count == 10
        assert np.abs(digits_set.inputs).max() <= 1.0

    def test_digits_needs_every_class(self):
        with pytest.raises(DomainError):
            gen_digits_like(9, seed=0)


class TestAuxiliary:
    def test_zero_shift_keeps_centers(self):
        base = gen_blobs(4, 8, 80, 0.1, seed=0)
        aux = make_auxiliary(base, ShiftSpec(0.0), seed=1)
        np.testing.assert_allclose(aux.source.centers, base.source.centers)

    def test_full_shift_is_orthogonal(self):
        base = gen_blobs(4, 8, 80, 0.1, seed=0)
        aux = make_auxiliary(base, ShiftSpec(1.0), seed=1)
        for old, new in zip(base.source.centers, aux.source.centers):
            assert np.dot(old, new) == pytest.approx(0.0, abs=1e-9)
            assert np.linalg.norm(new) == pytest.approx(np.linalg.norm(old))

    def test_digits_auxiliary(self, digits_set):
        aux = make_auxiliary(digits_set, ShiftSpec(0.5), seed=3)
        assert aux.inputs.shape == digits_set.inputs.shape
        assert aux.source.shear > 0

    @pytest.mark.parametrize("amount", [-0.1, 1.5])
    def test_shift_range(self, amount):
        with pytest.raises(DomainError):
            ShiftSpec(amount)


class TestSplit:
    def test_disjoint_and_stratified(self, blobs_split):
        train, test = blobs_split
        assert len(train) == 300 and len(test) == 100
        np.testing.assert_array_equal(test.class_counts(), [25] * 4)
        train_rows = {tuple(row) for row in train.inputs}
        test_rows = {tuple(row) for row in test.inputs}
        assert not train_rows & test_rows

    def test_fraction_range(self, blobs_split):
        with pytest.raises(DomainError):
            train_test_split(blobs_split[0], 1.0, seed=0)


class TestContainers:
    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            LabeledDataset(np.zeros((2, 3)), [0, 3], 3)

    def test_soft_labels_must_be_simplex(self):
        with pytest.raises(DomainError):
            SoftDataset(np.zeros((2, 3)), np.array([[0.5, 0.6], [0.5, 0.5]]))

    def test_with_labels(self):
        unlabeled = SoftDataset(np.zeros((2, 3)), epoch_tag=4)
        labeled = unlabeled.with_labels(np.array([[0.5, 0.5], [1.0, 0.0]]))
        assert unlabeled.soft_labels is None
        assert labeled.class_count == 2 and labeled.epoch_tag == 4


class TestFileFormat:
    def test_labeled_round_trip(self, tmp_path, digits_set):
        save_dataset(digits_set, tmp_path / "d.esd")
        loaded = load_dataset(tmp_path / "d.esd")
        np.testing.assert_array_equal(loaded.inputs, digits_set.inputs)
        np.testing.assert_array_equal(loaded.labels, digits_set.labels)
        assert loaded.name == "digits"

    def test_soft_round_trip(self, tmp_path, rng):
        soft = rng.dirichlet(np.ones(3), size=5)
        save_dataset(SoftDataset(rng.normal(size=(5, 4)), soft, epoch_tag=7, name="s"), tmp_path / "s.esd")
        loaded = load_dataset(tmp_path / "s.esd")
        assert isinstance(loaded, SoftDataset) and loaded.epoch_tag == 7
        np.testing.assert_array_equal(loaded.soft_labels, soft)

    def test_tags_survive(self, tmp_path):
        ds = LabeledDataset(np.eye(3), [0, 1, 2], 3, tags=[1, 1, 2])
        save_dataset(ds, tmp_path / "t.esd")
        np.testing.assert_array_equal(load_dataset(tmp_path / "t.esd").tags, [1, 1, 2])

    def test_unlabeled_soft_cannot_be_saved(self, tmp_path):
        with pytest.raises(DomainError):
            save_dataset(SoftDataset(np.zeros((2, 2))), tmp_path / "x.esd")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.esd").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path / "x.esd")

    def test_short_and_trailing(self, tmp_path, digits_set):
        path = tmp_path / "d.esd"
        save_dataset(digits_set, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(DatasetFormatError):
            load_dataset(path)
        path.write_bytes(blob + b"\x00")
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_export_csv_columns(self, tmp_path):
        ds = LabeledDataset(np.arange(6.0).reshape(3, 2), [0, 1, 0], 2, tags=[1, 1, 2])
        df = export_csv(ds, tmp_path / "d.csv")
        assert list(df.columns) == ["x0", "x1", "epoch", "label"]
        reread = pd.read_csv(tmp_path / "d.csv")
        assert reread["label"].tolist() == [0, 1, 0]

    def test_export_soft_csv(self, tmp_path):
        ds = SoftDataset(np.zeros((2, 1)), np.array([[0.25, 0.75], [1.0, 0.0]]))
        assert list(export_csv(ds, tmp_path / "s.csv").columns) == ["x0", "p0", "p1"]
