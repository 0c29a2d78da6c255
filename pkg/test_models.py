import numpy as np
import pytest

from src.errors import CheckpointError, CheckpointShapeError, CheckpointVersionError, DimensionError, DomainError
from src.models import (
    LayerSpec,
    build_generator,
    build_network,
    build_zoo_network,
    generate,
    infer_shapes,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    zoo_layers,
)
from src.tensor_autograd import one_hot


def _hand_mlp():
    net = build_network(
        [LayerSpec.dense(2, 2), LayerSpec.activation("relu"), LayerSpec.dense(2, 2)],
        seed=0,
        input_shape=(2,),
    )
    net.params["layer0.weight"].data[:] = [[1.0, -1.0], [2.0, 0.0]]
    net.params["layer0.bias"].data[:] = [0.0, 1.0]
    net.params["layer2.weight"].data[:] = [[1.0, 2.0], [3.0, -1.0]]
    net.params["layer2.bias"].data[:] = [0.5, -0.5]
    return net


def test_hand_set_mlp_forward():
    out = _hand_mlp().forward(np.array([[1.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[5.5, 9.5]])


def test_input_shape_mismatch():
    with pytest.raises(DimensionError):
        _hand_mlp().forward(np.ones((1, 3)))


def test_incompatible_layer_table():
    with pytest.raises(DimensionError):
        build_network([LayerSpec.dense(4, 3), LayerSpec.dense(5, 2)], seed=0, input_shape=(4,))


def test_same_seed_same_weights():
    a = build_zoo_network("mlp-small", (8,), 4, seed=3)
    b = build_zoo_network("mlp-small", (8,), 4, seed=3)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


@pytest.mark.parametrize("arch", ["linear", "mlp-small", "mlp-large", "cnn-small"])
def test_zoo_outputs_probabilities(arch, digits_set):
    net = build_zoo_network(arch, digits_set.input_shape, 10, seed=0)
    probs = predict_proba(net, digits_set.inputs[:7])
    assert probs.shape == (7, 10)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_cnn_needs_images():
    with pytest.raises(DimensionError):
        zoo_layers("cnn-small", (64,), 10)


def test_cnn_shapes():
    shapes = infer_shapes(zoo_layers("cnn-small", (1, 8, 8), 10), (1, 8, 8))
    assert shapes[2] == (8, 4, 4)
    assert shapes[-1] == (10,)


def test_feature_tap_is_last_dense():
    net = build_zoo_network("mlp-small", (8,), 4, seed=0)
    assert net.feature_tap() == 4
    assert net.forward(np.zeros((2, 8)), upto=net.feature_tap()).shape == (2, 64)


def test_frozen_view_shares_storage():
    net = build_zoo_network("linear", (3,), 2, seed=0)
    view = net.frozen()
    assert all(not p.requires_grad for p in view.parameters())
    net.params["layer0.weight"].data += 1.0
    np.testing.assert_array_equal(view.params["layer0.weight"].data, net.params["layer0.weight"].data)


def test_copy_is_independent():
    net = build_zoo_network("linear", (3,), 2, seed=0)
    clone = net.copy()
    clone.params["layer0.weight"].data += 1.0
    assert not np.allclose(clone.params["layer0.weight"].data, net.params["layer0.weight"].data)


class TestGenerator:
    def test_output_shape_and_range(self, rng):
        g = build_generator(6, 4, (1, 8, 8), hidden=16, seed=0)
        out = generate(g, rng.normal(size=(5, 6)), one_hot([0, 1, 2, 3, 0], 4))
        assert out.shape == (5, 1, 8, 8)
        assert (np.abs(out.data) <= 1.0).all()

    def test_rejects_soft_labels(self, rng):
        g = build_generator(6, 4, (8,), hidden=16, seed=0)
        with pytest.raises(DomainError):
            generate(g, rng.normal(size=(1, 6)), np.full((1, 4), 0.25))

    def test_rejects_batch_mismatch(self, rng):
        g = build_generator(6, 4, (8,), hidden=16, seed=0)
        with pytest.raises(DimensionError):
            generate(g, rng.normal(size=(3, 6)), one_hot([0, 1], 4))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, digits_set):
        net = build_zoo_network("cnn-small", digits_set.input_shape, 10, seed=5)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path, expected_layers=net.layers, expected_input_shape=(1, 8, 8))
        np.testing.assert_array_equal(
            predict_proba(net, digits_set.inputs[:10]), predict_proba(loaded, digits_set.inputs[:10])
        )

    def test_truncated(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(build_zoo_network("linear", (3,), 2, seed=0), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(build_zoo_network("linear", (3,), 2, seed=0), path)
        path.write_bytes(b"ESL2" + path.read_bytes()[4:])
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_architecture_mismatch(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(build_zoo_network("mlp-small", (1, 8, 8), 10, seed=0), path)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path, expected_layers=zoo_layers("cnn-small", (1, 8, 8), 10))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
