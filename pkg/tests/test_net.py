import numpy as np
import pytest

from selfcount.models.net import (
    FEN_PREFIX,
    Conv2d,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Network,
    StaleTapeError,
    backward,
    forward_density,
    forward_rotation,
    mean_feature_maps,
    parameter_count,
    parameter_digest,
    sgd_step,
    softmax_cross_entropy,
)
from selfcount.processing.vision import GrayImage, rotate90


def _numeric_grad(f, array, eps=1e-6, limit=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    indices = np.arange(flat.size)
    if limit is not None and flat.size > limit:
        indices = rng.choice(flat.size, size=limit, replace=False)
    grad = np.zeros(flat.size)
    for i in indices:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(array.shape), indices


def _rel_err(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


@pytest.fixture
def tiny_net():
    net = Network.initialize(
        seed=0, width1=2, width2=3, width3=3, rot_width=3, head_width=2, dtype=np.float64
    )
    # keep every unit alive so finite differences see a smooth function
    for name in net.names():
        if name.endswith(".b"):
            net.params[name][:] = 0.1
    return net


class TestLayers:
    def test_conv_gradients(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        r = rng.standard_normal((2, 4, 5, 6))
        y, cache = Conv2d.forward(x, w, b)
        assert y.shape == (2, 4, 5, 6)
        dx, (dw, db) = Conv2d.backward(r, cache, w, b)

        def loss():
            return float((Conv2d.forward(x, w, b)[0] * r).sum())

        for analytic, array in ((dx, x), (dw, w), (db, b)):
            numeric, _ = _numeric_grad(loss, array)
            assert _rel_err(analytic, numeric) < 1e-6

    def test_maxpool_gradients(self, rng):
        x = rng.standard_normal((2, 2, 4, 6))
        r = rng.standard_normal((2, 2, 2, 3))
        y, cache = MaxPool2d.forward(x)
        dx, _ = MaxPool2d.backward(r, cache)
        numeric, _ = _numeric_grad(lambda: float((MaxPool2d.forward(x)[0] * r).sum()), x)
        assert _rel_err(dx, numeric) < 1e-6
        with pytest.raises(ValueError):
            MaxPool2d.forward(np.zeros((1, 1, 3, 4)))

    def test_linear_and_pool_gradients(self, rng):
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((4, 5))
        b = rng.standard_normal(4)
        r = rng.standard_normal((3, 4))
        _, cache = Linear.forward(x, w, b)
        dx, (dw, db) = Linear.backward(r, cache, w, b)
        for analytic, array in ((dx, x), (dw, w), (db, b)):
            numeric, _ = _numeric_grad(lambda: float((Linear.forward(x, w, b)[0] * r).sum()), array)
            assert _rel_err(analytic, numeric) < 1e-6

        feats = rng.standard_normal((2, 3, 4, 4))
        up = rng.standard_normal((2, 3))
        _, shape = GlobalAvgPool.forward(feats)
        dfeats, _ = GlobalAvgPool.backward(up, shape)
        numeric, _ = _numeric_grad(
            lambda: float((GlobalAvgPool.forward(feats)[0] * up).sum()), feats
        )
        assert _rel_err(dfeats, numeric) < 1e-6

    def test_softmax_cross_entropy_gradient(self, rng):
        logits = rng.standard_normal((5, 4))
        labels = np.array([0, 1, 2, 3, 0])
        _, dlogits = softmax_cross_entropy(logits, labels)
        numeric, _ = _numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
        assert _rel_err(dlogits, numeric) < 1e-6


class TestNetworkGradients:
    def test_density_path_end_to_end(self, tiny_net, rng):
        x = rng.uniform(0, 1, (2, 1, 16, 16))
        out = tiny_net.forward_density(x)
        assert out.shape == (2, 4, 4)
        r = rng.standard_normal(out.shape)
        grads = tiny_net.backward(r)

        def loss():
            return float((tiny_net.forward_density(x) * r).sum())

        for name in ("fen.block1.conv1.w", "fen.block2.conv2.w", "density.conv1.w",
                     "density.conv2.b"):
            numeric, idx = _numeric_grad(loss, tiny_net.params[name], limit=12, rng=rng)
            analytic = grads[name].reshape(-1)[idx]
            assert _rel_err(analytic, numeric.reshape(-1)[idx]) < 1e-4

    def test_rotation_path_end_to_end(self, tiny_net, rng):
        x = rng.uniform(0, 1, (2, 1, 16, 16))
        logits = tiny_net.forward_rotation(x)
        assert logits.shape == (2, 4)
        r = rng.standard_normal(logits.shape)
        grads = tiny_net.backward(r)
        assert not any(name.startswith("density.") for name in grads)

        def loss():
            return float((tiny_net.forward_rotation(x) * r).sum())

        for name in ("fen.block1.conv2.w", "fen.block3.conv1.w", "rot.conv1.w", "rot.fc.w"):
            numeric, idx = _numeric_grad(loss, tiny_net.params[name], limit=12, rng=rng)
            analytic = grads[name].reshape(-1)[idx]
            assert _rel_err(analytic, numeric.reshape(-1)[idx]) < 1e-4

    def test_backward_is_linear_in_upstream(self, tiny_net, rng):
        x = rng.uniform(0, 1, (1, 1, 16, 16))
        out = tiny_net.forward_density(x)
        r = rng.standard_normal(out.shape)
        once = tiny_net.backward(r)
        twice = tiny_net.backward(2 * r)
        for name, grad in once.items():
            np.testing.assert_allclose(twice[name], 2 * grad, rtol=1e-12, atol=1e-14)


def test_backward_without_forward_is_stale(tiny_net):
    with pytest.raises(StaleTapeError):
        tiny_net.backward(np.zeros((1, 4, 4)))


def test_backward_after_update_is_stale(tiny_net, rng):
    tiny_net.forward_density(rng.uniform(0, 1, (1, 1, 16, 16)))
    tiny_net.sgd_step({}, lr=0.1)
    with pytest.raises(StaleTapeError):
        tiny_net.backward(np.zeros((1, 4, 4)))


def test_backward_rejects_wrong_upstream_shape(tiny_net, rng):
    tiny_net.forward_density(rng.uniform(0, 1, (1, 1, 16, 16)))
    with pytest.raises(ValueError):
        tiny_net.backward(np.zeros((1, 8, 8)))


def test_frozen_fen_gets_no_gradients(tiny_net, rng):
    tiny_net.freeze(FEN_PREFIX)
    out = tiny_net.forward_density(rng.uniform(0, 1, (1, 1, 16, 16)))
    grads = tiny_net.backward(np.ones_like(out))
    assert grads
    assert all(name.startswith("density.") for name in grads)


def test_sgd_zero_lr_changes_nothing(tiny_net):
    before = parameter_digest(tiny_net, tiny_net.names())
    grads = {name: np.ones_like(p) for name, p in tiny_net.params.items()}
    tiny_net.sgd_step(grads, lr=0.0)
    assert parameter_digest(tiny_net, tiny_net.names()) == before
    assert tiny_net.version == 1


def test_sgd_minimizes_quadratic(tiny_net):
    name = "density.conv1.w"
    start = np.linalg.norm(tiny_net.params[name])
    for _ in range(100):
        # gradient of 0.5 * ||w||^2
        tiny_net.sgd_step({name: tiny_net.params[name].copy()}, lr=0.1)
    assert np.linalg.norm(tiny_net.params[name]) == pytest.approx(start * 0.9**100, rel=1e-9)


def test_sgd_momentum_accumulates(tiny_net):
    name = "rot.fc.b"
    start = tiny_net.params[name].copy()
    g = np.ones_like(start)
    tiny_net.sgd_step({name: g}, lr=0.1, momentum=0.9)
    tiny_net.sgd_step({name: g}, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(tiny_net.params[name], start - 0.1 * 2.9 * g)


def test_sgd_skips_frozen_and_rejects_unknown(tiny_net):
    tiny_net.freeze(FEN_PREFIX)
    name = "fen.block1.conv1.b"
    before = tiny_net.params[name].copy()
    tiny_net.sgd_step({name: np.ones_like(before)}, lr=1.0)
    np.testing.assert_array_equal(tiny_net.params[name], before)
    with pytest.raises(ValueError):
        tiny_net.sgd_step({"nope.w": np.ones(1)}, lr=1.0)
    with pytest.raises(ValueError):
        tiny_net.sgd_step({name: np.ones(7)}, lr=1.0)


def test_default_network_shapes_and_non_negativity(rng):
    net = Network.initialize(seed=1)
    crops = rng.uniform(0, 1, (2, 96, 96)).astype(np.float32)
    density = net.forward_density(crops)
    assert density.shape == (2, 24, 24)
    assert np.all(density >= 0)
    assert net.forward_rotation(crops).shape == (2, 4)
    with pytest.raises(ValueError):
        net.forward_density(rng.uniform(0, 1, (1, 30, 30)))


def test_two_rotation_classes(rng):
    net = Network.initialize(
        seed=3, width1=4, width2=4, width3=4, rot_width=4, head_width=4, rotation_classes=2
    )
    logits = net.forward_rotation(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
    assert logits.shape == (3, 2)
    grads = net.backward(np.ones_like(logits))
    assert grads["rot.fc.w"].shape == (2, 4)


def test_zeroed_final_layer_predicts_zero(rng):
    net = Network.initialize(seed=2, width1=4, width2=4, width3=4, rot_width=4, head_width=4)
    net.params["density.conv2.w"][:] = 0
    net.params["density.conv2.b"][:] = 0
    img = GrayImage(rng.integers(0, 256, (32, 32), dtype=np.uint8))
    assert forward_density(net, img).count == 0.0


def test_density_head_is_small():
    net = Network.initialize(seed=0)
    assert parameter_count(net, "density.") < 0.1 * parameter_count(net)


def test_initialize_is_seeded():
    a = Network.initialize(seed=5, width1=4, width2=4, width3=4, rot_width=4, head_width=4)
    b = Network.initialize(seed=5, width1=4, width2=4, width3=4, rot_width=4, head_width=4)
    assert parameter_digest(a, a.names()) == parameter_digest(b, b.names())


def test_no_skip_variant_uses_block3_only(rng):
    net = Network.initialize(seed=0, width1=2, width2=3, width3=5, head_width=2, use_skip=False)
    assert net.params["density.conv1.w"].shape[1] == 5
    assert net.forward_density(rng.uniform(0, 1, (1, 16, 16))).shape == (1, 4, 4)


def test_mean_feature_maps_shapes(rng):
    net = Network.initialize(seed=0, width1=2, width2=2, width3=2, rot_width=2, head_width=2)
    img = GrayImage(rng.integers(0, 256, (32, 32), dtype=np.uint8))
    maps = mean_feature_maps(net, img)
    assert [m.shape for m in maps] == [(16, 16), (8, 8), (8, 8)]


def _small_net(seed, dtype=np.float32):
    return Network.initialize(
        seed=seed, width1=8, width2=8, width3=8, rot_width=8, head_width=4, dtype=dtype
    )


def test_functional_surface_steps_in_place(rng):
    net = _small_net(1)
    crop = GrayImage(rng.integers(0, 256, (16, 16), dtype=np.uint8))
    assert forward_rotation(net, crop).shape == (4,)
    grads = backward(net, np.ones((1, 4)))
    np.testing.assert_allclose(grads["rot.fc.b"], np.ones(4))
    before = net.params["rot.fc.b"].copy()
    version = net.version
    assert sgd_step(net, grads, lr=0.1) is net
    assert net.version == version + 1
    np.testing.assert_allclose(net.params["rot.fc.b"], before - 0.1, rtol=1e-6)
    with pytest.raises(StaleTapeError):
        backward(net, np.ones((1, 4)))


def test_rotation_logits_are_deterministic(rng):
    net = _small_net(2)
    crop = GrayImage(rng.integers(0, 256, (16, 16), dtype=np.uint8))
    batch = net.forward_rotation([crop, crop])
    np.testing.assert_array_equal(batch[0], batch[1])
    np.testing.assert_array_equal(forward_rotation(net, crop), forward_rotation(net, crop))


def test_rotation_head_overfits_two_images(rng):
    net = _small_net(4, dtype=np.float64)
    images = [GrayImage(rng.integers(0, 256, (16, 16), dtype=np.uint8)) for _ in range(2)]
    x = np.stack([rotate90(img, k).as_float() for img in images for k in range(4)])
    labels = np.tile(np.arange(4), 2)
    for _ in range(2000):
        logits = net.forward_rotation(x)
        if np.all(logits.argmax(axis=1) == labels):
            break
        _, dlogits = softmax_cross_entropy(logits, labels)
        net.sgd_step(net.backward(dlogits), lr=0.02, momentum=0.9)
    logits = net.forward_rotation(x)
    true = logits[np.arange(8), labels]
    assert np.all(true[:, None] >= logits)
