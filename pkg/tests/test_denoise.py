import json

import numpy as np
import pytest

from lungfuse import denoise as dn
from lungfuse import nnet
from lungfuse.errors import ContractError, DataError, FormatError


def _blobs(n, size, seed):
    """Smooth unit-range test images: a few gaussian bumps each."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    imgs = []
    for _ in range(n):
        img = np.zeros((size, size))
        for _ in range(3):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            amp = rng.uniform(0.3, 0.7)
            s2 = rng.uniform(0.01, 0.05)
            img += amp * np.exp(-(((xx - cx) ** 2) + (yy - cy) ** 2) / (2 * s2))
        imgs.append(np.clip(img, 0.0, 1.0))
    return imgs


def _loss(w, img, target):
    return dn.loss_mse(dn.forward(w, img), target)


# --- nnet pieces ---


def test_adam_first_step_matches_hand_calc():
    # after one step the bias-corrected update is lr * g / (|g| + eps)
    p = np.array([1.0])
    opt = nnet.Adam([p], lr=0.001)
    opt.step([p], [np.array([0.5])])
    assert abs(p[0] - 0.999) < 1e-8


def test_adam_updates_in_place_and_counts_steps():
    p = np.zeros(3)
    opt = nnet.Adam([p], lr=0.01)
    for _ in range(5):
        opt.step([p], [np.ones(3)])
    assert opt.t == 5
    assert np.all(p < 0)


def test_softmax_rows_normalized():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 7)) * 30
    s = nnet.softmax(z)
    assert np.allclose(s.sum(axis=1), 1.0)
    assert np.all(s > 0)


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = nnet.glorot_uniform(rng, (100, 100), 100, 100)
    s = np.sqrt(6.0 / 200)
    assert np.all(np.abs(w) <= s)
    assert np.abs(w).max() > 0.8 * s


def test_train_config_validation():
    with pytest.raises(ContractError):
        nnet.TrainConfig(learning_rate=0.0)
    with pytest.raises(ContractError):
        nnet.TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        nnet.TrainConfig(epochs=0)
    with pytest.raises(ContractError):
        nnet.TrainConfig(noise_kind="salt")


# --- ConvNetSpec / weights plumbing ---


def test_convnet_spec_validates_chain():
    dn.ConvNetSpec()  # default is valid
    with pytest.raises(ContractError):
        dn.ConvNetSpec(channels=((1, 8), (8, 16)))
    with pytest.raises(ContractError):
        dn.ConvNetSpec(channels=((1, 8), (4, 16), (16, 16), (16, 8), (8, 1)))
    with pytest.raises(ContractError):
        dn.ConvNetSpec(channels=((2, 8), (8, 16), (16, 16), (16, 8), (8, 1)))
    with pytest.raises(ContractError):
        dn.ConvNetSpec(kernel_size=5)


def test_init_weights_shapes_and_determinism():
    w1 = dn.init_weights(dn.ConvNetSpec(), seed=7)
    w2 = dn.init_weights(dn.ConvNetSpec(), seed=7)
    assert [k.shape for k in w1.kernels] == [
        (8, 1, 3, 3),
        (16, 8, 3, 3),
        (16, 16, 3, 3),
        (8, 16, 3, 3),
        (1, 8, 3, 3),
    ]
    for a, b in zip(w1.kernels, w2.kernels):
        assert np.array_equal(a, b)
    for b in w1.biases:
        assert np.all(b == 0)


def test_zero_weights_give_half_output():
    w = dn.init_weights(dn.ConvNetSpec(), seed=0)
    for k in w.kernels:
        k[:] = 0
    y = dn.forward(w, np.random.default_rng(1).uniform(size=(16, 16)))
    assert np.allclose(y, 0.5)


def test_forward_shape_contract():
    w = dn.init_weights(dn.ConvNetSpec(), seed=0)
    y = dn.forward(w, np.zeros((16, 24)))
    assert y.shape == (16, 24)
    with pytest.raises(ContractError):
        dn.forward(w, np.zeros((10, 12)))
    with pytest.raises(ContractError):
        dn.forward(w, np.zeros((4, 4)))
    with pytest.raises(ContractError):
        dn.forward(w, np.zeros((16, 16, 1)))


def test_loss_mse_hand_value():
    pred = np.array([[0.0, 0.5], [1.0, 0.0]])
    assert dn.loss_mse(pred, np.zeros((2, 2))) == pytest.approx(0.3125)
    with pytest.raises(ContractError):
        dn.loss_mse(pred, np.zeros(3))


# --- gradients ---


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(42)
    w = dn.init_weights(dn.ConvNetSpec(), seed=5)
    img = rng.uniform(0.1, 0.9, (8, 8))
    target = rng.uniform(0.1, 0.9, (8, 8))
    grads = dn.backward(w, img, target)
    # h small enough that no relu pre-activation crosses zero inside the
    # central-difference interval; at 1e-4 a few coords straddle a kink
    h = 1e-5
    worst = 0.0
    for li in range(5):
        for arr, g in ((w.kernels[li], grads[li][0]), (w.biases[li], grads[li][1])):
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            take = min(50, flat.size)
            for ix in rng.choice(flat.size, size=take, replace=False):
                old = flat[ix]
                flat[ix] = old + h
                lp = _loss(w, img, target)
                flat[ix] = old - h
                lm = _loss(w, img, target)
                flat[ix] = old
                fd = (lp - lm) / (2 * h)
                rel = abs(gflat[ix] - fd) / max(abs(gflat[ix]), abs(fd), 1e-6)
                worst = max(worst, rel)
    assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"


def test_backward_rejects_shape_mismatch():
    w = dn.init_weights(dn.ConvNetSpec(), seed=0)
    with pytest.raises(ContractError):
        dn.backward(w, np.zeros((8, 8)), np.zeros((8, 12)))


# --- noise ---


def test_add_noise_gaussian_zero_sigma_is_identity():
    img = np.random.default_rng(0).uniform(size=(9, 9))
    assert np.array_equal(dn.add_noise(img, "gaussian", 0.0, rng=1), img)


def test_add_noise_clips_and_is_seeded():
    img = np.full((32, 32), 0.95)
    a = dn.add_noise(img, "gaussian", 0.3, rng=7)
    b = dn.add_noise(img, "gaussian", 0.3, rng=7)
    assert np.array_equal(a, b)
    assert a.max() <= 1.0 and a.min() >= 0.0
    assert not np.array_equal(a, img)


def test_add_noise_poisson_scale():
    img = np.full((64, 64), 0.5)
    heavy = dn.add_noise(img, "poisson", 10.0, rng=0)
    light = dn.add_noise(img, "poisson", 10000.0, rng=0)
    assert np.std(heavy) > np.std(light)
    assert abs(np.mean(light) - 0.5) < 0.01
    with pytest.raises(ContractError):
        dn.add_noise(img, "poisson", 0.0)
    with pytest.raises(ContractError):
        dn.add_noise(img, "speckle", 0.1)


# --- training ---


def test_train_requires_enough_images():
    imgs = _blobs(5, 8, 0)
    with pytest.raises(DataError):
        dn.train_denoiser(imgs, nnet.TrainConfig(epochs=1))


def test_train_rejects_mixed_shapes():
    imgs = _blobs(8, 8, 0)
    imgs[3] = np.zeros((12, 8))
    with pytest.raises(ContractError):
        dn.train_denoiser(imgs, nnet.TrainConfig(epochs=1))


def test_train_is_bit_deterministic():
    imgs = _blobs(8, 8, 1)
    cfg = nnet.TrainConfig(epochs=2, batch_size=4, rng_seed=11)
    w1, log1 = dn.train_denoiser(imgs, cfg)
    w2, log2 = dn.train_denoiser(imgs, cfg)
    assert log1 == log2
    for a, b in zip(w1.kernels + w1.biases, w2.kernels + w2.biases):
        assert np.array_equal(a, b)


def test_train_loss_decreases():
    imgs = _blobs(16, 16, 2)
    cfg = nnet.TrainConfig(epochs=30, batch_size=4, rng_seed=3, noise_param=0.08)
    w, log = dn.train_denoiser(imgs, cfg)
    assert len(log) == 30
    assert log[-1] < 0.7 * log[0]
    assert w.epochs_trained == 30


def test_autoencode_noiseless_converges():
    # sigma 0 turns the task into plain reconstruction
    imgs = _blobs(16, 16, 4)
    cfg = nnet.TrainConfig(epochs=50, batch_size=4, rng_seed=0, noise_param=0.0)
    _, log = dn.train_denoiser(imgs, cfg)
    assert log[-1] < 0.01
    assert log[-1] < log[0]


# --- denoise wrapper ---


def test_denoise_preserves_arbitrary_shape():
    w = dn.init_weights(dn.ConvNetSpec(), seed=2)
    for shape in ((13, 9), (8, 8), (5, 31), (1, 1)):
        out = dn.denoise(w, np.random.default_rng(0).uniform(size=shape))
        assert out.shape == shape
        assert out.min() > 0.0 and out.max() < 1.0


def test_denoise_matches_forward_on_valid_dims():
    w = dn.init_weights(dn.ConvNetSpec(), seed=2)
    img = np.random.default_rng(5).uniform(size=(16, 16))
    assert np.array_equal(dn.denoise(w, img), dn.forward(w, img))


# --- weights file ---


def test_weights_round_trip(tmp_path):
    w = dn.init_weights(dn.ConvNetSpec(), seed=9)
    w.epochs_trained = 17
    w.rng_seed = 9
    path = tmp_path / "w.json"
    dn.save_weights(path, w)
    w2 = dn.load_weights(path)
    assert w2.spec == w.spec
    assert w2.epochs_trained == 17
    assert w2.rng_seed == 9
    img = np.random.default_rng(1).uniform(size=(16, 16))
    # float32 storage perturbs weights slightly but not meaningfully
    assert np.allclose(dn.forward(w, img), dn.forward(w2, img), atol=1e-5)
    # a second save of the loaded weights is byte identical
    path2 = tmp_path / "w2.json"
    dn.save_weights(path2, w2)
    path3 = tmp_path / "w3.json"
    dn.save_weights(path3, dn.load_weights(path2))
    assert path2.read_bytes() == path3.read_bytes()


def test_load_weights_rejects_garbage(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("not json at all {")
    with pytest.raises(FormatError):
        dn.load_weights(p)
    p.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(FormatError):
        dn.load_weights(p)


def test_load_weights_rejects_wrong_payload(tmp_path):
    w = dn.init_weights(dn.ConvNetSpec(), seed=0)
    path = tmp_path / "w.json"
    dn.save_weights(path, w)
    doc = json.loads(path.read_text())
    doc["layers"][2]["kernel"] = doc["layers"][2]["kernel"][:-8]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        dn.load_weights(path)
    doc = json.loads(path.read_text())
    doc["layers"][0]["kernel_shape"] = [8, 2, 3, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        dn.load_weights(path)
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        dn.load_weights(path)
