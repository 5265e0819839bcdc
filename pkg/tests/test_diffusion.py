import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mindkit import checks
from mindkit import diffusion as df
from mindkit.errors import BadRange, ShapeMismatch, StepOutOfRange
from mindkit.tensor import Tensor


def test_schedule_endpoints():
    s = df.make_schedule()
    assert s.T == 300 and s.alpha_bar[0] == 1.0
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)
    # independent product
    assert s.abar(150) == pytest.approx(math.prod(1 - b for b in np.linspace(1e-4, 0.02, 300)[:150]), rel=1e-12)


def test_schedule_strictly_decreasing():
    assert np.all(np.diff(df.make_schedule().alpha_bar) < 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.03, 0.02), (10, 0.0, 0.02)])
def test_bad_schedules_rejected(args):
    with pytest.raises(BadRange):
        df.make_schedule(*args)


def test_step_out_of_range():
    with pytest.raises(StepOutOfRange):
        df.make_schedule().abar(301)


def test_forward_noise_closed_form(rng):
    s = df.make_schedule()
    z, e = rng.standard_normal(8), rng.standard_normal(8)
    np.testing.assert_allclose(df.forward_noise(z, 100, e, s),
                               math.sqrt(s.alpha_bar[100]) * z + math.sqrt(1 - s.alpha_bar[100]) * e)


def test_forward_noise_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        df.forward_noise(np.zeros(3), 5, np.zeros(4), df.make_schedule())


def test_forward_noise_moments_within_three_standard_errors():
    rows = checks.forward_noise_moments(0)
    assert all(r["mean_ok"] and r["var_ok"] for r in rows)


def test_chain_timesteps():
    assert df.chain_timesteps(240, 8)[:3] == [240, 232, 224]
    assert df.chain_timesteps(240, 8)[-2:] == [8, 0]
    assert len(df.chain_timesteps(240, 8)) == 31
    assert df.chain_timesteps(5) == [5, 4, 3, 2, 1, 0]
    assert df.chain_timesteps(0) == [0]


def test_noise_stream_depends_on_seed_and_counter():
    a = df._gaussian(1, 0, 16)
    assert np.array_equal(a, df._gaussian(1, 0, 16))
    assert not np.array_equal(a, df._gaussian(1, 1, 16))
    assert not np.array_equal(a, df._gaussian(2, 0, 16))


def test_chain_noise_row_selection():
    n = df.draw_chain_noise([3, 4, 5], 40, 8)
    sub = n.select([2, 0])
    assert np.array_equal(sub.eps0[0], n.eps0[2]) and np.array_equal(sub.steps[1][1], n.steps[1][0])


def test_chain_rows_are_independent_of_batch(models, rng):
    z = rng.standard_normal((3, 256)).astype(np.float32)
    c = rng.standard_normal((3, 6, 32)).astype(np.float32)
    s = df.make_schedule()
    both = df.sample_img2img(z, c, 60, s, models.denoiser, seed=[7, 8, 9], stride=8)
    one = df.sample_img2img(z[1], c[1], 60, s, models.denoiser, seed=8, stride=8)
    np.testing.assert_allclose(both[1], one, rtol=1e-5, atol=1e-6)


def test_t_start_zero_returns_input(models, rng):
    z = rng.standard_normal((2, 256)).astype(np.float32)
    out = df.sample_img2img(z, np.zeros((2, 6, 32)), 0, df.make_schedule(), models.denoiser, seed=0)
    assert np.array_equal(out, z)


def test_denoiser_output_shape(models, rng):
    eps = df.predict_eps(rng.standard_normal((2, 256)).astype(np.float32), [5, 200],
                         rng.standard_normal((2, 6, 32)).astype(np.float32), models.denoiser)
    assert eps.shape == (2, 256)


def test_denoiser_training_reduces_loss(rng):
    p = df.init_denoiser(df.DenoiserConfig(seed=1))
    z = rng.standard_normal((64, 256)).astype(np.float32)
    c = np.repeat(rng.standard_normal((64, 1, 32)).astype(np.float32), 6, axis=1)
    _, curve = df.train_denoiser(z, c, p, df.make_schedule(), df.DenoiserHyper(epochs=4, batch_size=16))
    assert curve[-1] < curve[0]


@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_forward_noise_is_linear_in_inputs(t, seed):
    s = df.make_schedule()
    r = np.random.default_rng(seed)
    z, e = r.standard_normal(4), r.standard_normal(4)
    x = df.forward_noise(z, t, e, s)
    np.testing.assert_allclose(df.forward_noise(2 * z, t, 2 * e, s), 2 * x, rtol=1e-12, atol=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_eps_loss_nonnegative_and_zero_only_at_target(vals):
    e = Tensor(np.array([[1.0, 2.0, 3.0]]))
    p = Tensor(np.array([vals]))
    loss = float(df.semantic_loss(p, e).data)
    assert loss >= 0
    assert (loss == 0) == np.array_equal(p.data, e.data)
