import numpy as np
import pytest

from mindkit import autoencoder as ae
from mindkit import checks
from mindkit.errors import BadResolution, ShapeMismatch
from mindkit.tensor import Tensor


def test_shapes(models, rng):
    x = rng.random((2, 32, 32, 3)).astype(np.float32)
    z = ae.encode(x, models.autoencoder)
    assert z.shape == (2, 256)
    assert ae.decode(z, models.autoencoder).shape == (2, 32, 32, 3)
    assert ae.encode(x[0], models.autoencoder).shape == (256,)


def test_decode_range(models, rng):
    y = ae.decode(rng.standard_normal((3, 256)) * 5, models.autoencoder)
    assert y.min() >= 0 and y.max() <= 1


def test_decode_tensor_roundtrip_keeps_type(models):
    assert isinstance(ae.decode(Tensor(np.zeros((1, 256), np.float32)), models.autoencoder), Tensor)


def test_bad_resolution(models):
    with pytest.raises(BadResolution):
        ae.encode(np.zeros((1, 16, 16, 3)), models.autoencoder)


def test_bad_latent(models):
    with pytest.raises(ShapeMismatch):
        ae.decode(np.zeros((1, 100)), models.autoencoder)


def test_layout_and_decode_gradient(models):
    ctx = checks.SuiteContext(_models=models)
    assert checks.REGISTRY["autoencoder.latent_layout"][1](ctx).passed
    assert checks.REGISTRY["autoencoder.decode_gradcheck"][1](ctx).passed


def test_training_improves_psnr(rng):
    from mindkit.neurosim import generate_scenes, render_all

    train, _ = generate_scenes(3, 96, 0)
    x = render_all(train)
    p0 = ae.init_autoencoder(ae.AEConfig(seed=2))
    p1, curve = ae.train_autoencoder(x, p0, ae.AEHyper(epochs=3, batch_size=16))
    assert curve[-1] < curve[0]
    assert ae.psnr(ae.decode(ae.encode(x, p1), p1), x) > ae.psnr(ae.decode(ae.encode(x, p0), p0), x)


def test_latent_scale_gives_unit_spread(rng):
    from mindkit.neurosim import generate_scenes, render_all

    x = render_all(generate_scenes(4, 64, 0)[0])
    p = ae.init_autoencoder()
    p.latent_scale = ae.fit_latent_scale(x, p)
    assert np.std(ae.encode(x, p)) == pytest.approx(1.0, rel=1e-3)


def test_psnr_identity():
    assert ae.psnr(np.ones(4), np.ones(4)) == float("inf")
