import struct

import numpy as np
import pytest

from conftest import identity_model
from iba import tensor as T
from iba.bottleneck import AlphaMask, FeatureStats, bottleneck_forward
from iba.data import ShapesDataset
from iba.network import (
    MAGIC,
    TrainingDiverged,
    accuracy,
    build_default_model,
    cascade_order,
    forward_with_tap,
    load_model,
    randomize_from,
    read_archive,
    save_model,
    train,
    write_archive,
)
from iba.tensor import Tensor, no_grad


def test_default_architecture_taps(tiny_model):
    assert tiny_model.tap_names == ["conv1", "conv2", "conv3", "conv4"]
    assert tiny_model.tap("conv1").shape == (4, 32, 32)
    assert tiny_model.tap("conv3").shape == (6, 16, 16)
    assert tiny_model.tap("conv4").k == 6 * 16 * 16
    with pytest.raises(KeyError, match="unknown tap"):
        tiny_model.tap("fc")


def test_stride_variant_keeps_tap_shapes():
    a = build_default_model(3, input_shape=(1, 32, 32), channels=(4, 4, 6, 6))
    b = build_default_model(3, input_shape=(1, 32, 32), channels=(4, 4, 6, 6), downsample="stride")
    for t in a.tap_names[1:]:
        assert b.tap(t).shape[0] == a.tap(t).shape[0]
    assert b.tap("conv2").shape == (4, 16, 16)
    assert b(np.zeros((2, 1, 32, 32), np.float32)).shape == (2, 3)


def test_forward_is_pure(tiny_model):
    x = np.random.default_rng(0).normal(size=(3, 1, 32, 32)).astype(np.float32)
    before = {k: v.copy() for k, v in tiny_model.params.items()}
    a = tiny_model(x).data
    b = tiny_model(x).data
    assert a.tobytes() == b.tobytes()
    for k, v in tiny_model.params.items():
        assert v.tobytes() == before[k].tobytes()


def test_forward_with_tap_identity_splice(tiny_model):
    x = np.random.default_rng(1).normal(size=(2, 1, 32, 32)).astype(np.float32)
    plain = tiny_model(x).data
    logits, r = forward_with_tap(tiny_model, x, "conv3")
    assert logits.data.tobytes() == plain.tobytes()
    assert r.shape == (2, 6, 16, 16)
    logits2, _ = forward_with_tap(tiny_model, x, tiny_model.tap("conv3"), splice=lambda z: z)
    assert logits2.data.tobytes() == plain.tobytes()


def test_forward_with_tap_zero_splice_changes_logits(tiny_model):
    x = np.random.default_rng(2).normal(size=(2, 1, 32, 32)).astype(np.float32)
    logits, _ = forward_with_tap(tiny_model, x, "conv2", splice=lambda z: z * 0.0)
    assert not np.allclose(logits.data, tiny_model(x).data)


def test_forward_with_tap_lambda_one_mask(tiny_model):
    x = np.random.default_rng(3).normal(size=(2, 1, 32, 32)).astype(np.float32)
    shape = tiny_model.tap("conv3").shape
    stats = FeatureStats(np.zeros(shape, np.float32), np.ones(shape, np.float32), 2)
    # alpha large enough that sigmoid rounds to exactly 1 in float32
    mask = AlphaMask.full(shape, value=40.0, sigma_s=1.0)
    logits, _ = forward_with_tap(tiny_model, x, "conv3", splice=lambda r: bottleneck_forward(r, stats, mask, seed=0))
    assert np.abs(logits.data - tiny_model(x).data).max() < 1e-6


def test_forward_with_tap_rejects_shape_change(tiny_model):
    x = np.zeros((1, 1, 32, 32), np.float32)
    with pytest.raises(T.ShapeError, match="splice changed"):
        forward_with_tap(tiny_model, x, "conv3", splice=lambda z: T.maxpool2d(z))


def test_randomize_from_fc_keeps_convs(tiny_model):
    r = randomize_from(tiny_model, "fc", seed=5)
    for name in tiny_model.spec.conv_names:
        for k in ("weight", "bias"):
            key = f"{name}.{k}"
            assert r.params[key].tobytes() == tiny_model.params[key].tobytes()
    assert not np.array_equal(r.params["fc.weight"], tiny_model.params["fc.weight"])


def test_randomize_from_first_conv_changes_all(tiny_model):
    r = randomize_from(tiny_model, "conv1", seed=5)
    for name in tiny_model.spec.param_names:
        assert not np.array_equal(r.params[f"{name}.weight"], tiny_model.params[f"{name}.weight"])


def test_randomize_from_seeds_differ(tiny_model):
    a = randomize_from(tiny_model, "fc", seed=1)
    b = randomize_from(tiny_model, "fc", seed=2)
    assert not np.array_equal(a.params["fc.weight"], b.params["fc.weight"])
    with pytest.raises(KeyError):
        randomize_from(tiny_model, "relu1", seed=0)


def test_randomize_from_uses_init_distribution(tiny_model):
    r = randomize_from(tiny_model, "conv2", seed=3)
    w = r.params["conv2.weight"]
    bound = np.sqrt(6 / (4 * 9))
    assert np.abs(w).max() <= bound
    assert np.all(r.params["conv2.bias"] == 0)


def test_cascade_is_monotone(tiny_model):
    order = cascade_order(tiny_model)
    assert order == ["fc", "conv4", "conv3", "conv2", "conv1"]

    def changed(m):
        return {n for n in tiny_model.spec.param_names if not np.array_equal(m.params[f"{n}.weight"], tiny_model.params[f"{n}.weight"])}

    sets = [changed(randomize_from(tiny_model, layer, seed=i)) for i, layer in enumerate(order)]
    for earlier, later in zip(sets, sets[1:]):
        assert earlier <= later


def test_archive_round_trip_bit_exact(tmp_path, tiny_model):
    path = tmp_path / "m.ibaw"
    save_model(tiny_model, path)
    loaded = load_model(path)
    assert loaded.spec == tiny_model.spec
    for k, v in tiny_model.params.items():
        assert loaded.params[k].tobytes() == v.tobytes()


def test_archive_layout(tmp_path):
    path = tmp_path / "a.ibaw"
    write_archive(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"IBAW"
    assert struct.unpack_from("<III", raw, 4) == (1, 1, 1)
    assert raw[16:17] == b"w"
    assert struct.unpack_from("<I", raw, 17) == (2,)
    assert struct.unpack_from("<2Q", raw, 21) == (2, 3)
    np.testing.assert_array_equal(np.frombuffer(raw[37:], "<f4"), np.arange(6))
    np.testing.assert_array_equal(read_archive(path)["w"], np.arange(6).reshape(2, 3))


def test_archive_bad_magic(tmp_path):
    p = tmp_path / "bad.ibaw"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="magic"):
        read_archive(p)


def test_untrained_accuracy_near_chance(small_dataset):
    m = build_default_model(5, seed=0)
    _, log = train(m, small_dataset, epochs=0)
    assert abs(log[0]["val_acc"] - 0.2) <= 0.1 + 1e-9


def test_training_is_deterministic(small_dataset):
    m = build_default_model(5, seed=0, channels=(4, 4, 4, 4))
    _, a = train(m, small_dataset, epochs=1, seed=3)
    _, b = train(m, small_dataset, epochs=1, seed=3)
    assert a[-1]["loss"] == b[-1]["loss"]


def test_training_leaves_input_model_untouched(small_dataset):
    m = build_default_model(5, seed=0, channels=(4, 4, 4, 4))
    before = m.params["conv1.weight"].copy()
    trained, _ = train(m, small_dataset, epochs=1)
    assert np.array_equal(m.params["conv1.weight"], before)
    assert not np.array_equal(trained.params["conv1.weight"], before)


def test_divergence_aborts(small_dataset):
    m = build_default_model(5, seed=0, channels=(4, 4, 4, 4))
    m.params["fc.weight"][:] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(m, small_dataset, epochs=1)


def test_trained_model_reaches_target_accuracy(trained_model, dataset):
    # golden: the cached 10-epoch run
    assert accuracy(trained_model, dataset.x_val, dataset.y_val) >= 0.95


def test_linear_model_learns(small_dataset):
    m = identity_model(2, 4)
    x = np.random.default_rng(0).normal(size=(8, 1, 4, 4)).astype(np.float32)
    with no_grad():
        out = m(Tensor(x)).data
    expected = np.maximum(x.reshape(8, -1), 0) @ m.params["fc.weight"].T
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)


def test_dataset_boxes_cover_shapes(small_dataset):
    d = small_dataset
    assert d.x_train.shape == (60, 1, 64, 64)
    assert set(np.unique(d.y_train)) <= set(range(5))
    for x, y, w, h in d.box_val:
        assert w >= 1 and h >= 1 and x >= 0 and y >= 0 and x + w <= 64 and y + h <= 64


def test_dataset_deterministic():
    a = ShapesDataset.generate(n_train=10, n_val=5, seed=9)
    b = ShapesDataset.generate(n_train=10, n_val=5, seed=9)
    c = ShapesDataset.generate(n_train=10, n_val=5, seed=10)
    assert a.content_hash() == b.content_hash() != c.content_hash()


def test_dataset_save_load(tmp_path, small_dataset):
    p = tmp_path / "d.npz"
    small_dataset.save(p)
    assert ShapesDataset.load(p).content_hash() == small_dataset.content_hash()
