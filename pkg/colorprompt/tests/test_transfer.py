import numpy as np
import pytest
from numpy.testing import assert_allclose

from .. import conf
from ..colorspace import srgb_to_lab
from ..colorstats import ColorStats, Region, image_stats
from ..exceptions import InvalidStatsError
from ..transfer import transfer_lab, transfer_to_stats, object_agnostic_transfer


def random_stats(rng):
    return ColorStats(rng.uniform(-1, 0, 3) * [1, 0.1, 0.1],
                      rng.uniform(0.01, 0.3, 3))


def test_two_pixel_transfer():
    lab = np.zeros((2, 1, 3))
    lab[:, 0, 0] = [0, 1]
    source = ColorStats([0.5, 0, 0], [0.5, 1, 1])
    target = ColorStats([0.4, 0, 0], [0.2, 1, 1])

    out = transfer_lab(lab, source, target)
    assert_allclose(out[:, 0, 0], [0.2, 0.6])
    assert_allclose(out[..., 1:], 0)


def test_identity_transfer():
    rng = np.random.default_rng(0)
    img = rng.uniform(1 / 255, 1, size=(12, 8, 3))
    own = image_stats(srgb_to_lab(img))

    assert np.max(np.abs(transfer_to_stats(img, None, own) - img)) <= 1e-4
    assert np.max(np.abs(transfer_to_stats(img, own, own) - img)) <= 1e-4


def test_constant_image_takes_target_mean():
    lab = srgb_to_lab(np.full((4, 4, 3), 0.6))
    target = ColorStats([-0.4, 0.02, -0.01], [0.2, 0.05, 0.05])

    out = transfer_lab(lab, image_stats(lab), target)
    assert_allclose(out.reshape(-1, 3), np.tile(target.mean, (16, 1)),
                    atol=1e-9)


def test_statistics_match_target():
    rng = np.random.default_rng(1)
    for _ in range(100):
        lab = srgb_to_lab(rng.uniform(size=(6, 5, 3)))
        target = random_stats(rng)

        out = image_stats(transfer_lab(lab, image_stats(lab), target))
        assert_allclose(out.mean, target.mean, atol=1e-6)
        assert_allclose(out.std, target.std, atol=1e-6)


def test_transfer_is_idempotent():
    rng = np.random.default_rng(2)
    lab = srgb_to_lab(rng.uniform(size=(8, 8, 3)))
    target = random_stats(rng)

    once = transfer_lab(lab, image_stats(lab), target)
    twice = transfer_lab(once, image_stats(once), target)
    assert np.max(np.abs(twice - once)) <= 1e-6


def test_transfer_preserves_channel_order():
    rng = np.random.default_rng(3)
    lab = srgb_to_lab(rng.uniform(size=(10, 10, 3)))
    out = transfer_lab(lab, image_stats(lab), random_stats(rng))

    for c in range(3):
        order = np.argsort(lab[..., c].ravel(), kind='stable')
        assert np.all(np.diff(out[..., c].ravel()[order]) >= 0)


def test_sigma_floor_from_config():
    lab = np.zeros((2, 1, 3))
    lab[:, 0, 0] = [0, 1e-3]
    source = ColorStats([0, 0, 0], [0, 0, 0])
    target = ColorStats([0, 0, 0], [1, 1, 1])

    with conf.set_temp('sigma_floor', 1e-2):
        out = transfer_lab(lab, source, target)
    assert_allclose(out[:, 0, 0], [0, 0.1])


def test_invalid_statistics():
    lab = np.zeros((2, 2, 3))
    with pytest.raises(InvalidStatsError):
        transfer_lab(lab, (0, 1), ColorStats([0, 0, 0], [1, 1, 1]))

    stats = ColorStats([0, 0, 0], [1, 1, 1])
    stats.mean[0] = np.inf
    with pytest.raises(InvalidStatsError):
        transfer_lab(lab, ColorStats([0, 0, 0], [1, 1, 1]), stats)


def framed_image():
    # noisy gray frame around a saturated red center
    rng = np.random.default_rng(4)
    img = np.clip(0.5 + 0.05 * rng.normal(size=(16, 16, 3)), 0, 1)
    img[4:12, 4:12] = [0.9, 0.1, 0.1]
    return img


def test_object_agnostic_keeps_frame():
    img = framed_image()
    frame = Region.frame(0.5).mask(16, 16)
    target = image_stats(srgb_to_lab(img), Region.frame(0.5))

    agnostic = object_agnostic_transfer(img, target, 0.5)
    plain = transfer_to_stats(img, None, target)

    agnostic_error = np.max(np.abs(agnostic - img)[frame])
    plain_error = np.max(np.abs(plain - img)[frame])
    assert agnostic_error < 1e-4
    assert agnostic_error < plain_error
    # the red center keeps its hue
    assert np.all(agnostic[8, 8, 0] > agnostic[8, 8, 1:])


@pytest.mark.parametrize('crop_fraction', [0.2, 0.5, 0.8])
def test_object_agnostic_on_uniform_image(crop_fraction):
    img = np.full((10, 10, 3), [0.3, 0.5, 0.7])
    target = ColorStats([-0.6, 0.05, 0.02], [0.1, 0.02, 0.02])

    assert_allclose(object_agnostic_transfer(img, target, crop_fraction),
                    transfer_to_stats(img, None, target), atol=1e-9)


def test_object_agnostic_zero_crop_is_plain_transfer():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(10, 6, 3))
    target = random_stats(rng)

    assert np.array_equal(object_agnostic_transfer(img, target, 0),
                          transfer_to_stats(img, None, target))
