import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from spgat.errors import ShapeError
from spgat.losses import (LossWeights, d_ra, loss_adv_disc, loss_adv_gen, loss_image,
                          loss_structure, loss_total, metric_ssim, psnr, ssim)
from spgat.tensor import Tape, Tensor, finite_diff_check

C1, C2 = 0.01 ** 2, 0.03 ** 2


def t(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype))


def test_ssim_identical_is_one(rng):
    x = rng.random((2, 16, 16, 3))
    assert abs(float(ssim(t(x), t(x)).data) - 1.0) < 1e-7
    assert abs(float(ssim(t(x, np.float32), t(x, np.float32)).data) - 1.0) < 1e-7
    assert float(loss_image(t(x), t(x)).data) == 0.0


def test_ssim_symmetric(rng):
    x, y = rng.random((1, 16, 16, 3)), rng.random((1, 16, 16, 3))
    assert float(ssim(t(x), t(y)).data) == pytest.approx(float(ssim(t(y), t(x)).data), abs=1e-15)


def test_ssim_constant_images_closed_form():
    x = np.full((1, 16, 16, 3), 0.5)
    y = np.full((1, 16, 16, 3), 0.6)
    ref = (2 * 0.5 * 0.6 + C1) * C2 / ((0.25 + 0.36 + C1) * C2)
    assert abs(float(ssim(t(x), t(y)).data) - ref) < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(11, 24), st.integers(11, 24), st.integers(0, 10_000))
def test_ssim_matches_skimage(h, w, seed):
    r = np.random.default_rng(seed)
    x = r.random((h, w, 3))
    y = np.clip(x + 0.2 * r.standard_normal((h, w, 3)), 0, 1)
    ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0, channel_axis=-1)
    assert abs(float(ssim(t(x[None]), t(y[None])).data) - ref) < 1e-6


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(ShapeError):
        ssim(t(np.zeros((1, 8, 8, 3))), t(np.zeros((1, 8, 8, 3))))
    with pytest.raises(ShapeError):
        ssim(t(np.zeros((1, 16, 16, 3))), t(np.zeros((1, 16, 17, 3))))


def test_loss_image_range_and_gradcheck(rng):
    x = rng.random((1, 16, 16, 3))
    y = 1 - x
    v = float(loss_image(t(x), t(y)).data)
    assert 0 <= v < 2
    rep = finite_diff_check(lambda a: loss_image(a, Tensor(y.astype(a.dtype))),
                            x.astype(np.float32), max_checks=60)
    assert rep.passed, rep


def test_loss_structure_examples(rng):
    p = rng.random((1, 4, 4, 3))
    assert float(loss_structure(t(p), t(p)).data) == 0.0
    assert float(loss_structure(t(p + 0.5), t(p)).data) == pytest.approx(0.5, abs=1e-12)
    a = Tensor(p.copy(), requires_grad=True)
    with Tape() as tape:
        loss = loss_structure(a, t(p))
    tape.backward(loss)
    assert not a.grad.any()  # subgradient 0 at zero


def test_d_ra_examples():
    v = t([[0.2, 0.2], [0.2, 0.2]])
    np.testing.assert_allclose(d_ra(v, v).data, 0.5, atol=1e-7)
    vv = np.array([0.1, -0.3, 0.8, 0.4])
    out = float(d_ra(t([vv.mean() + math.log(3)]), t(vv)).data[0])
    assert out == pytest.approx(0.75, abs=1e-12)
    us = np.linspace(-3, 3, 20)
    assert np.all(np.diff(d_ra(t(us), t(vv)).data) > 0)


def test_equal_logits_give_2ln2(rng):
    z = np.full((2, 4, 4, 1), rng.standard_normal())
    for f in (loss_adv_disc, loss_adv_gen):
        assert abs(float(f(t(z), t(z)).data) - 2 * math.log(2)) < 1e-6
    zero = np.zeros((2, 4, 4, 1), np.float32)
    for f in (loss_adv_disc, loss_adv_gen):
        assert abs(float(f(t(zero, np.float32), t(zero, np.float32)).data) - 2 * math.log(2)) < 1e-6


def test_disc_loss_vanishes_when_separated():
    real = np.full((1, 2, 2, 1), 10.0)
    fake = np.full((1, 2, 2, 1), -10.0)
    assert float(loss_adv_disc(t(real), t(fake)).data) < 0.01
    # generator loss is large in the same situation
    assert float(loss_adv_gen(t(real), t(fake)).data) > 10


def test_gen_loss_decreases_as_fake_rises():
    real = np.zeros((1, 2, 2, 1))
    vals = [float(loss_adv_gen(t(real), t(np.full((1, 2, 2, 1), s))).data) for s in (-2, 0, 2, 4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_adv_gradchecks(rng):
    real = rng.standard_normal((2, 2, 2, 1))
    fake = rng.standard_normal((2, 2, 2, 1))
    c = lambda v, a: Tensor(v.astype(a.dtype))
    assert finite_diff_check(lambda a: loss_adv_disc(a, c(fake, a)), real.astype(np.float32)).passed
    assert finite_diff_check(lambda a: loss_adv_disc(c(real, a), a), fake.astype(np.float32)).passed
    assert finite_diff_check(lambda a: loss_adv_gen(c(real, a), a), fake.astype(np.float32)).passed
    with pytest.raises(ShapeError):
        loss_adv_disc(t(real), t(fake[:1]))


def test_loss_total_weights_and_linearity():
    w = LossWeights()
    assert (w.alpha, w.beta) == (0.1, 0.001)
    li, ls, ae, ad = 0.3, 0.7, 1.2, 1.5
    tot = float(loss_total(t(li), t(ls), t(ae), t(ad), w).data)
    assert tot == pytest.approx(li + 0.1 * ls + 0.001 * (ae + ad), abs=1e-12)
    # linear in each component
    for i in range(4):
        comps = [li, ls, ae, ad]
        comps[i] += 1.0
        bumped = float(loss_total(*(t(v) for v in comps), w).data)
        assert bumped - tot == pytest.approx([1.0, 0.1, 0.001, 0.001][i], abs=1e-12)
    assert float(loss_total(t(0.0), t(0.0), t(0.0), t(0.0), w).data) == 0.0
    x = t(0.123456789)
    out = loss_total(x, t(5.0), t(3.0), t(2.0), LossWeights(0.0, 0.0))
    assert out.data.tobytes() == x.data.tobytes()
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)


def test_psnr_examples(rng):
    x = np.full((4, 4, 3), 0.3)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=0.01)
    assert psnr(x, x) == 100.0
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    mse = 0.0
    for v, u in zip(a.reshape(-1), b.reshape(-1)):
        mse += (v - u) ** 2
    mse /= a.size
    assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-6


def test_metric_ssim_is_loss_code_path(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert metric_ssim(a, b) == float(ssim(t(a[None]), t(b[None])).data)
