import numpy as np
import pytest

from covernet import net, nn, optim
from covernet.errors import InvalidParameterError, ShapeError, UnknownTensorError, WeightShapeError

from conftest import central_difference, rel_err

# Independent shape/parameter oracle: (kind, filters/units, kernel, stride, pad, groups)
ALEXNET_PLAN = [
    ("conv", 96, 11, 4, 0, 1), ("pool", 3, 2),
    ("conv", 256, 5, 1, 2, 2), ("pool", 3, 2),
    ("conv", 384, 3, 1, 1, 1), ("conv", 384, 3, 1, 1, 2), ("conv", 256, 3, 1, 1, 2), ("pool", 3, 2),
    ("fc", 4096), ("fc", 4096), ("fc", 30),
]
LENET_PLAN = [
    ("conv", 32, 5, 1, 0, 1), ("pool", 2, 2), ("conv", 64, 5, 1, 0, 1), ("pool", 2, 2),
    ("conv", 128, 5, 1, 0, 1), ("pool", 2, 2), ("fc", 1024), ("fc", 30),
]


def plan_oracle(plan, h, c):
    """Walk a layer plan with the floor shape formula; return (shapes, param total)."""
    shapes, total, flat = [], 0, None
    for step in plan:
        if step[0] == "conv":
            _, f, k, s, p, g = step
            total += f * k * k * (c // g) + f
            h = (h + 2 * p - k) // s + 1
            c = f
            shapes.append((h, h, c))
        elif step[0] == "pool":
            _, k, s = step
            h = (h - k) // s + 1
            shapes.append((h, h, c))
        else:
            fan_in = flat if flat is not None else h * h * c
            total += fan_in * step[1] + step[1]
            flat = step[1]
            shapes.append((step[1],))
    return shapes, total


def main_shapes(spec):
    return [s for (name, s), layer in zip(spec.layer_shapes(), spec.layers)
            if isinstance(layer, (net.Conv, net.MaxPool, net.Dense))]


# -- architectures ---------------------------------------------------------

def test_alexnet_shape_chain():
    spec = net.build_alexnet30()
    expected = [(55, 55, 96), (27, 27, 96), (27, 27, 256), (13, 13, 256), (13, 13, 384), (13, 13, 384),
                (13, 13, 256), (6, 6, 256), (4096,), (4096,), (30,)]
    assert main_shapes(spec) == expected
    assert plan_oracle(ALEXNET_PLAN, 227, 3)[0] == expected


def test_alexnet_param_count_matches_oracle():
    spec = net.build_alexnet30()
    assert spec.param_count() == plan_oracle(ALEXNET_PLAN, 227, 3)[1] == 56_991_134
    assert spec.param_shapes()["conv1.w"] == (96, 11, 11, 3)


def test_lenet_shape_chain_and_count():
    spec = net.build_lenet_variant()
    expected = [(52, 52, 32), (26, 26, 32), (22, 22, 64), (11, 11, 64), (7, 7, 128), (3, 3, 128), (1024,), (30,)]
    shapes, total = plan_oracle(LENET_PLAN, 56, 3)
    assert main_shapes(spec) == expected == shapes
    assert spec.param_count() == total
    assert [l.filters for l in spec.layers if isinstance(l, net.Conv)] == [32, 64, 128]


def test_lenet_literal_pool_stride():
    spec = net.build_lenet_variant(pool_stride_literal=True)
    before_fc = [s for (n, s) in spec.layer_shapes() if n == "pool3"][0]
    assert before_fc == (41, 41, 128)
    plan = [("pool", 2, 1) if s[0] == "pool" else s for s in LENET_PLAN]
    assert spec.param_count() == plan_oracle(plan, 56, 3)[1]


@pytest.mark.parametrize("builder,size", [(net.build_lenet_variant, 56), (net.build_mini, 8)])
def test_off_by_one_inputs_raise(builder, size):
    spec = builder()
    params = net.init_params(spec, np.random.default_rng(0))
    c = spec.input_shape[2]
    net.forward(spec, params, np.zeros((1, size, size, c), np.float32))
    for bad in ((size - 1, size), (size, size + 1)):
        with pytest.raises(ShapeError) as e:
            net.forward(spec, params, np.zeros((1, *bad, c), np.float32))
        assert e.value.layer == spec.layers[0].name


def test_spec_validation():
    with pytest.raises(InvalidParameterError):
        net.NetworkSpec("x", (4, 4, 1), (net.Flatten("f"), net.Dense("d", 3)), 3)
    with pytest.raises(ShapeError):
        net.NetworkSpec("x", (4, 4, 1), (net.Flatten("f"), net.Dense("d", 3), net.Softmax()), 4)
    with pytest.raises(InvalidParameterError):
        net.build_network("vgg")


# -- init / weights --------------------------------------------------------

def test_init_he_normal_statistics():
    spec = net.build_lenet_variant()
    p = net.init_params(spec, np.random.default_rng(0))
    assert p["fc4.w"].std() == pytest.approx(np.sqrt(2 / 1152), rel=0.01)
    assert p["conv2.w"].std() == pytest.approx(np.sqrt(2 / (25 * 32)), rel=0.02)
    assert not p["conv1.b"].any()
    assert p["conv1.w"].dtype == np.float32


def test_check_params_errors():
    spec = net.build_mini()
    p = net.init_params(spec, np.random.default_rng(0))
    bad = dict(p, **{"conv2.w": np.zeros((4, 3, 3, 3))})
    with pytest.raises(WeightShapeError) as e:
        net.check_params(spec, bad)
    assert e.value.layer == "conv2"
    with pytest.raises(UnknownTensorError):
        net.check_params(spec, dict(p, extra=np.zeros(1)))


# -- forward ---------------------------------------------------------------

def test_zero_weights_give_uniform_output(rng):
    spec = net.build_lenet_variant()
    p = {k: np.zeros_like(v) for k, v in net.init_params(spec, rng).items()}
    probs = net.forward(spec, p, rng.random((2, 56, 56, 3), dtype=np.float32))
    np.testing.assert_allclose(probs, 1 / 30, rtol=1e-6)


def test_infer_pure_and_batch_consistent(rng):
    spec = net.build_lenet_variant()
    p = net.init_params(spec, rng)
    snapshot = {k: v.copy() for k, v in p.items()}
    x = rng.random((2, 56, 56, 3), dtype=np.float32)
    a = net.forward(spec, p, x)
    b = net.forward(spec, p, x)
    assert a.tobytes() == b.tobytes()
    assert all(np.array_equal(p[k], snapshot[k]) for k in p)
    with nn.float64_mode():
        p64 = {k: v.astype(np.float64) for k, v in p.items()}
        x64 = x.astype(np.float64)
        joint = net.forward(spec, p64, x64)
        single = np.concatenate([net.forward(spec, p64, x64[i : i + 1]) for i in range(2)])
    np.testing.assert_allclose(joint, single, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)


# -- head replacement ------------------------------------------------------

@pytest.fixture(scope="module")
def alexnet1000():
    spec = net.build_alexnet30(class_count=1000)
    return spec, net.init_params(spec, np.random.default_rng(1))


def test_replace_head_carries_trunk(alexnet1000):
    spec, old = alexnet1000
    new_spec, params = net.replace_head(spec, old, 30, np.random.default_rng(2))
    assert new_spec.class_count == 30
    assert params["fc8.w"].shape == (4096, 30)
    for name, t in old.items():
        if not name.startswith("fc8"):
            assert params[name] is t or params[name].tobytes() == t.tobytes()
    x = np.random.default_rng(3).random((1, 227, 227, 3), dtype=np.float32)
    probs = net.forward(new_spec, params, x)
    assert probs.shape == (1, 30)
    assert probs.sum() == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_array_equal(net.penultimate(new_spec, params, x), net.penultimate(spec, old, x))


def test_replace_head_deterministic():
    spec = net.build_mini()
    p = net.init_params(spec, np.random.default_rng(0))
    _, a = net.replace_head(spec, p, 3, np.random.default_rng(9))
    _, b = net.replace_head(spec, p, 3, np.random.default_rng(9))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_replace_head_rejects_trunk_mismatch():
    spec = net.build_mini()
    p = net.init_params(spec, np.random.default_rng(0))
    p["conv1.w"] = np.zeros((4, 3, 3, 2))
    with pytest.raises(WeightShapeError) as e:
        net.replace_head(spec, p, 5, np.random.default_rng(0))
    assert e.value.layer == "conv1"


# -- training --------------------------------------------------------------

def test_train_step_zero_lr(rng):
    spec = net.build_mini()
    p = net.init_params(spec, rng)
    before = {k: v.copy() for k, v in p.items()}
    x = rng.random((4, 8, 8, 2), dtype=np.float32)
    y = np.array([0, 1, 2, 0])
    expected, _ = net.loss_and_grads(spec, p, x, y, np.random.default_rng(5))
    loss = net.train_step(spec, p, optim.SgdMomentum(), x, y, 0, optim.LrSchedule(), np.random.default_rng(5), lr=0.0)
    assert loss == expected
    assert all(np.array_equal(p[k], before[k]) for k in p)


def test_single_example_loss_non_increasing():
    spec = net.build_lenet_variant(keep_prob=1.0)
    p = net.init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).random((1, 56, 56, 3), dtype=np.float32)
    y = np.array([7])
    opt = optim.SgdMomentum(momentum=0.0)
    losses = [net.train_step(spec, p, opt, x, y, i, optim.LrSchedule.constant(1e-3)) for i in range(50)]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_end_to_end_gradient_matches_finite_difference():
    with nn.float64_mode():
        spec = net.build_mini()
        p = net.init_params(spec, np.random.default_rng(4))
        p = {k: v + 0.1 * np.random.default_rng(5).standard_normal(v.shape) if k.endswith(".b") else v
             for k, v in p.items()}
        x = np.random.default_rng(6).standard_normal((3, 8, 8, 2))
        y = np.array([0, 2, 1])

        def loss():
            return net.loss_and_grads(spec, p, x, y, np.random.default_rng(8))[0]

        _, grads = net.loss_and_grads(spec, p, x, y, np.random.default_rng(8))
        for name in ("conv1.w", "conv2.b", "fc3.w", "fc4.b"):
            assert rel_err(grads[name], central_difference(loss, p[name])) < 1e-4, name
