import numpy as np
import pytest

from replaylab import autodiff as ad
from replaylab.autodiff import Graph, Tensor, backward, check_gradients
from replaylab.errors import ArtifactError, ConfigError, ShapeError
from replaylab.objectives import dice_loss
from replaylab.segnet import (
    ModelConfig, build_model, checkpoint_bytes, load_checkpoint, model_from_bytes,
    normalized_relu, pre_activation, predict, save_checkpoint,
)


def test_normalized_relu_examples():
    y = normalized_relu(Tensor(np.array([[-1.0, 0.0, 2.0, 4.0]]))).data
    np.testing.assert_array_equal(y, [[0.0, 0.0, 0.5, 1.0]])
    assert not normalized_relu(Tensor(-np.ones((1, 5)))).data.any()
    np.testing.assert_array_equal(normalized_relu(Tensor(np.array([[2.0, 2.0]]))).data, [[1.0, 1.0]])


def test_normalized_relu_is_per_sample():
    x = np.array([[[1.0, 2.0]], [[10.0, 5.0]]])
    np.testing.assert_array_equal(normalized_relu(Tensor(x)).data, [[[0.5, 1.0]], [[1.0, 0.5]]])


def test_reference_scale_widths():
    assert ModelConfig(levels=3, base_features=32, spatial_rank=3, patch_size=64).widths() == [32, 64, 128]


def test_levels_too_deep_for_patch():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(levels=4, patch_size=8), 0)
    build_model(ModelConfig(levels=3, patch_size=8), 0)


def test_same_seed_same_parameters():
    a, b = build_model(ModelConfig(), 3), build_model(ModelConfig(), 3)
    assert list(a.params) == list(b.params)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = build_model(ModelConfig(), 4)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params if k.endswith(".w"))


@pytest.mark.parametrize("cfg", [
    ModelConfig(),
    ModelConfig(levels=3, base_features=4, patch_size=16),
    ModelConfig(levels=1, base_features=4, patch_size=8),
    ModelConfig(residual=False),
    ModelConfig(levels=2, base_features=2, spatial_rank=3, patch_size=8),
])
def test_parameter_count_is_function_of_config(cfg):
    counts = {build_model(cfg, s).n_parameters() for s in range(3)}
    assert len(counts) == 1


def test_clone_is_independent():
    m = build_model(ModelConfig(), 0)
    c = m.clone()
    c.params["head.w"].data += 1.0
    assert not np.array_equal(m.params["head.w"].data, c.params["head.w"].data)


@pytest.mark.parametrize("cfg,shape", [
    (ModelConfig(), (32, 32)),
    (ModelConfig(), (64, 48)),
    (ModelConfig(levels=3, base_features=4, patch_size=16), (16, 16)),
    (ModelConfig(levels=2, base_features=2, spatial_rank=3, patch_size=8), (8, 8, 8)),
])
def test_predict_shape_and_range(cfg, shape):
    m = build_model(cfg, 1)
    x = np.random.default_rng(0).normal(size=shape)
    y = predict(m, x)
    assert y.shape == shape
    assert y.min() >= 0.0 and y.max() <= 1.0
    if (pre_activation(m, Tensor(x[None, None])).data > 0).any():
        assert y.max() == 1.0
    assert y.tobytes() == predict(m, x).tobytes()


def test_zeroed_head_gives_empty_mask():
    m = build_model(ModelConfig(), 0)
    m.params["head.w"].data[...] = 0.0
    m.params["head.b"].data[...] = 0.0
    assert not predict(m, np.random.default_rng(0).normal(size=(32, 32))).any()


def test_indivisible_patch():
    with pytest.raises(ShapeError):
        predict(build_model(ModelConfig(levels=3, patch_size=32), 0), np.zeros((30, 30)))


def _lesion_batch(rng, n=2, size=16):
    y = np.zeros((n, 1, size, size))
    y[:, :, 4:9, 5:10] = 1.0
    y[:, :, 3, 5:10] = 0.4
    x = rng.normal(size=y.shape) * 0.3 + 1.5 * y
    return x, y


def jitter_biases(model, rng, scale=0.1):
    # zero biases plus dead ReLUs put pre-activations exactly on the kink
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(scale=scale, size=p.shape)


@pytest.mark.parametrize("cfg", [
    ModelConfig(levels=2, base_features=4, patch_size=16),
    ModelConfig(levels=3, base_features=2, patch_size=16, residual=False),
])
def test_full_model_gradient_check(cfg):
    rng = np.random.default_rng(0)
    m = build_model(cfg, 0)
    jitter_biases(m, rng)
    x, y = _lesion_batch(rng)
    report = check_gradients(lambda: dice_loss(m.forward(Tensor(x)), y), m.params, tolerance=1e-4)
    assert report.ok, {k: v for k, v in report.max_rel_error.items() if v > 1e-4}


def test_default_model_gradient_flow():
    rng = np.random.default_rng(1)
    m = build_model(ModelConfig(), 0)
    x, y = _lesion_batch(rng, n=4, size=32)
    with Graph() as g:
        loss = dice_loss(m.forward(Tensor(x)), y)
    backward(g, loss)
    groups = {}
    for name, p in m.params.items():
        groups.setdefault(name.split(".")[0], []).append(np.abs(p.grad).sum())
    assert all(sum(v) > 0 for v in groups.values()), groups


def test_checkpoint_round_trip(tmp_path):
    m = build_model(ModelConfig(levels=3, base_features=4, patch_size=16, residual=False), 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == m.config and back.seed == 9
    assert back.encoder_names == m.encoder_names
    assert checkpoint_bytes(back) == path.read_bytes()
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ArtifactError):
        model_from_bytes(b"not a checkpoint at all")
    raw = checkpoint_bytes(build_model(ModelConfig(), 0))
    with pytest.raises(ArtifactError):
        model_from_bytes(raw + b"\0" * 8)
