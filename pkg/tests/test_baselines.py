import numpy as np
import pytest

from conftest import identity_model
from iba import baselines as BL
from iba import tensor as T
from iba.evaluation import bbox_ratio
from iba.network import LayerSpec, Model, ModelSpec
from iba.tensor import Tensor, default_dtype, no_grad


def _linear_conv_model(seed=0) -> Model:
    """conv -> flatten -> dense with no ReLU anywhere."""
    layers = (
        LayerSpec("conv1", "conv", 1, 2, 3, 1, 1),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc", "dense", 2 * 8 * 8, 3),
    )
    return Model.initialize(ModelSpec((1, 8, 8), 3, layers), seed)


def test_random_attribution_reproducible_and_uniform():
    img = np.zeros((1, 64, 64), np.float32)
    a = BL.random_attribution(img, seed=4).values
    assert a.tobytes() == BL.random_attribution(img, seed=4).values.tobytes()
    assert abs(a.mean() - 0.5) < 0.01
    assert not np.array_equal(a, BL.random_attribution(img, seed=5).values)


def test_gradient_of_linear_one_pixel_model():
    m = identity_model(classes=2, size=1)
    img = np.array([[[0.7]]], np.float32)
    g = BL.gradient_map(m, img, target=1).values
    assert g[0, 0] == pytest.approx(float(m.params["fc.weight"][1, 0]), rel=1e-6)


def test_gradient_matches_finite_differences(tiny_model):
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        img = rng.normal(size=(1, 32, 32))
        g = BL.gradient_map(tiny_model, img, target=2).values
        for _ in range(5):
            i, j = rng.integers(0, 32, 2)
            h = 1e-6
            up, down = img.copy(), img.copy()
            up[0, i, j] += h
            down[0, i, j] -= h
            with no_grad():
                num = (tiny_model(up[None]).data[0, 2] - tiny_model(down[None]).data[0, 2]) / (2 * h)
            assert abs(num - g[i, j]) <= 1e-3 * max(abs(num), 1e-8)


def test_saliency_non_negative(tiny_model):
    img = np.random.default_rng(1).normal(size=(1, 32, 32)).astype(np.float32)
    s = BL.saliency(tiny_model, img, 0).values
    assert s.min() >= 0
    np.testing.assert_allclose(s, np.abs(BL.gradient_map(tiny_model, img, 0).values), rtol=1e-6)


def test_smoothgrad_without_noise_is_saliency(tiny_model):
    img = np.random.default_rng(2).normal(size=(1, 32, 32)).astype(np.float32)
    sg = BL.smoothgrad(tiny_model, img, 1, n=10, noise_frac=0.0).values
    np.testing.assert_allclose(sg, BL.saliency(tiny_model, img, 1).values, rtol=1e-5, atol=1e-9)


def test_smoothgrad_reproducible(tiny_model):
    img = np.random.default_rng(3).normal(size=(1, 32, 32)).astype(np.float32)
    a = BL.smoothgrad(tiny_model, img, 1, n=1, seed=9).values
    b = BL.smoothgrad(tiny_model, img, 1, n=1, seed=9).values
    assert a.tobytes() == b.tobytes()


def test_integrated_gradients_completeness(trained_model, dataset):
    errs = []
    for i in range(5):
        img, t = dataset.x_val[i], int(dataset.y_val[i])
        ig = BL.integrated_gradients(trained_model, img, t, steps=50).values
        logits = trained_model.logits(np.stack([img, np.zeros_like(img)]))
        diff = logits[0, t] - logits[1, t]
        errs.append(abs(ig.sum() - diff) / abs(diff))
    assert np.mean(errs) < 0.05


def test_occlusion_zero_region_has_zero_relevance(tiny_model):
    img = np.random.default_rng(4).normal(size=(1, 32, 32)).astype(np.float32)
    img[:, :8, :8] = 0.0
    heat = BL.occlusion(tiny_model, img, 0, patch=8).values
    # float32 rounding only: base and occluded logits come from different batch sizes
    assert np.abs(heat[:8, :8]).max() < 1e-5


def test_occlusion_equals_brute_force(tiny_model):
    img = np.random.default_rng(5).normal(size=(1, 32, 32)).astype(np.float32)
    heat = BL.occlusion(tiny_model, img, 1, patch=8).values
    base = tiny_model.logits(img[None])[0, 1]
    for y, x in [(0, 0), (8, 16), (24, 24)]:
        occ = img.copy()
        occ[:, y : y + 8, x : x + 8] = 0.0
        drop = base - tiny_model.logits(occ[None])[0, 1]
        np.testing.assert_allclose(heat[y : y + 8, x : x + 8], drop, rtol=1e-5, atol=1e-6)


def test_occlusion_overlapping_patches_average(tiny_model):
    img = np.random.default_rng(6).normal(size=(1, 32, 32)).astype(np.float32)
    heat = BL.occlusion(tiny_model, img, 0, patch=8, stride=4).values
    assert heat.shape == (32, 32) and np.all(np.isfinite(heat))
    with pytest.raises(ValueError):
        BL.occlusion(tiny_model, img, 0, patch=40)


def test_occlusion_prefers_the_shape(trained_model, dataset):
    inside, outside = [], []
    for i in range(20):
        h = BL.occlusion(trained_model, dataset.x_val[i], int(dataset.y_val[i]), patch=8).values
        x, y, w, hh = dataset.box_val[i]
        mask = np.zeros_like(h, bool)
        mask[y : y + hh, x : x + w] = True
        inside.append(h[mask].mean())
        outside.append(h[~mask].mean())
    assert np.mean(inside) > np.mean(outside)


def test_grad_cam_non_negative(tiny_model):
    img = np.random.default_rng(7).normal(size=(1, 32, 32)).astype(np.float32)
    h = BL.grad_cam(tiny_model, img, 0)
    assert h.values.shape == (32, 32) and h.values.min() >= 0 and h.tap == "conv4"


def test_guided_backprop_without_relu_is_gradient():
    m = _linear_conv_model()
    img = np.random.default_rng(8).normal(size=(1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(BL.guided_backprop(m, img, 1).values, BL.gradient_map(m, img, 1).values)


def test_guided_relu_blocks_negative_gradients():
    x = Tensor(np.array([1.0, -1.0, 2.0]), requires_grad=True)
    y = T.guided_relu(x)
    y.backward(np.array([-1.0, 1.0, 3.0]))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 3.0])


def test_guided_grad_cam_in_unit_range(tiny_model):
    img = np.random.default_rng(9).normal(size=(1, 32, 32)).astype(np.float32)
    v = BL.guided_grad_cam(tiny_model, img, 2).values
    assert v.min() >= 0 and v.max() <= 1


def test_grad_cam_beats_random_on_boxes(trained_model, dataset):
    cam, rnd = [], []
    for i in range(30):
        img, t, box = dataset.x_val[i], int(dataset.y_val[i]), dataset.box_val[i]
        cam.append(bbox_ratio(BL.grad_cam(trained_model, img, t).values, box))
        rnd.append(bbox_ratio(BL.random_attribution(img, seed=i).values, box))
    assert np.mean(cam) > np.mean(rnd)


@pytest.mark.parametrize("name", [n for n in BL.METHOD_NAMES if n not in ("per-sample", "readout")])
def test_methods_deterministic_and_shaped(name, tiny_model):
    img = np.random.default_rng(10).normal(size=(1, 32, 32)).astype(np.float32)
    method = BL.make_method(name, seed=3)
    if name == "smoothgrad":
        method = BL.AttributionMethod(name, lambda m, x, t, s: BL.smoothgrad(m, x, t, n=4, seed=s), seed=3)
    if name == "integrated-gradients":
        method = BL.AttributionMethod(name, lambda m, x, t, s: BL.integrated_gradients(m, x, t, steps=5))
    a = method(tiny_model, img, 1)
    b = method(tiny_model, img, 1)
    assert a.method == name
    assert a.values.shape == (32, 32) and np.all(np.isfinite(a.values))
    assert a.values.tobytes() == b.values.tobytes()


def test_make_method_unknown():
    with pytest.raises(KeyError, match="unknown attribution method"):
        BL.make_method("lrp")


def test_wrapper_checks_shape(tiny_model):
    bad = BL.AttributionMethod("bad", lambda m, x, t, s: BL.Heatmap(np.zeros((3, 3)), "bad"))
    with pytest.raises(T.ShapeError):
        bad(tiny_model, np.zeros((1, 32, 32), np.float32), 0)


def test_per_sample_method_restimates_stats_per_model(tiny_model):
    from iba.bottleneck import BottleneckConfig
    from iba.network import randomize_from

    imgs = np.random.default_rng(11).normal(size=(6, 1, 32, 32)).astype(np.float32)
    method = BL.make_method("per-sample", tap="conv3", stats_images=imgs, config=BottleneckConfig(iterations=2))
    a = method(tiny_model, imgs[0], 0)
    other = randomize_from(tiny_model, "conv1", seed=1)
    b = method(other, imgs[0], 0)
    assert a.values.shape == b.values.shape == (32, 32)
    assert not np.allclose(a.values, b.values)
