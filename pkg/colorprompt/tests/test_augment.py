import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ..augment import color_resample, color_shuffle, GeometricAugment
from ..colorspace import srgb_to_lab
from ..colorstats import image_stats, batch_stat_model
from ..exceptions import EmptySelectionError


def tinted_batch(n, seed=0, shape=(16, 8)):
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(n):
        base = rng.uniform(0.35, 0.65) + rng.uniform(-0.05, 0.05, 3)
        batch.append(np.clip(base + 0.03 * rng.normal(size=shape + (3,)),
                             0, 1))
    return batch


def lab_stats(img):
    return image_stats(srgb_to_lab(img))


def test_resample_identical_batch():
    img = tinted_batch(1)[0]
    pairs = color_resample([img] * 4, np.random.default_rng(0))

    assert len(pairs) == 4
    originals = [stats for _, stats in pairs]
    assert all(stats == originals[0] for stats in originals)
    for out, _ in pairs:
        assert out.shape == img.shape
        assert not np.allclose(out, img, atol=1e-3)


def test_resample_is_deterministic():
    batch = tinted_batch(6, seed=1)

    first = color_resample(batch, np.random.default_rng(5))
    second = color_resample(batch, np.random.default_rng(5))
    for (a, sa), (b, sb) in zip(first, second):
        assert_array_equal(a, b)
        assert sa == sb


def test_resample_shift_band():
    batch = tinted_batch(64, seed=2)
    originals = [lab_stats(img) for img in batch]
    spread = batch_stat_model(originals).spread[0]

    pairs = color_resample(batch, np.random.default_rng(3))
    shifts = [abs(lab_stats(out).mean[0] - stats.mean[0])
              for out, stats in pairs]
    assert 0.5 * spread <= np.mean(shifts) <= 3 * spread


def test_resample_keeps_batch_mean():
    batch = tinted_batch(64, seed=4)
    model = batch_stat_model([lab_stats(img) for img in batch])

    drawn = np.array([model.sample(np.random.default_rng(seed), 64)[0].mean
                      for seed in range(200)])
    bound = 5 * model.spread[:3] / np.sqrt(len(drawn))
    assert np.all(np.abs(drawn.mean(axis=0) - model.mean[:3]) < bound)


def test_resample_empty_batch():
    with pytest.raises(EmptySelectionError):
        color_resample([], np.random.default_rng(0))


def test_shuffle_needs_two_images():
    with pytest.raises(EmptySelectionError):
        color_shuffle(tinted_batch(1), np.random.default_rng(0))


@pytest.mark.parametrize('seed', range(6))
def test_shuffle_pair(seed):
    rng = np.random.default_rng(seed)
    a = np.clip([0.3, 0.4, 0.5] + 0.02 * rng.normal(size=(12, 6, 3)), 0, 1)
    b = np.clip([0.6, 0.5, 0.4] + 0.02 * rng.normal(size=(12, 6, 3)), 0, 1)
    stats = [lab_stats(a), lab_stats(b)]

    perm = np.random.default_rng(seed).permutation(2)
    out = color_shuffle([a, b], np.random.default_rng(seed))

    for i in range(2):
        assert_allclose(lab_stats(out[i]).to_vector(),
                        stats[perm[i]].to_vector(), atol=1e-4)
    if perm[0] == 0:
        assert_allclose(out[0], a, atol=1e-4)
        assert_allclose(out[1], b, atol=1e-4)


def test_shuffle_permutes_styles():
    colors = [[0.2, 0.3, 0.4], [0.5, 0.5, 0.5], [0.7, 0.4, 0.3],
              [0.3, 0.6, 0.3]]
    batch = [np.full((6, 4, 3), c) for c in colors]

    out = color_shuffle(batch, np.random.default_rng(8))
    before = sorted(lab_stats(img).mean[0] for img in batch)
    after = sorted(lab_stats(img).mean[0] for img in out)
    assert_allclose(after, before, atol=1e-3)
    assert all(img.shape == (6, 4, 3) for img in out)


def test_geometric_augment_is_replayable():
    aug = GeometricAugment(flip=True, crop_padding=2, erase_probability=1.0)
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 8, 3))
    twin = 1 - img

    params = aug.draw(np.random.default_rng(1), img.shape)
    again = aug.draw(np.random.default_rng(1), img.shape)
    out = aug.apply(img, params)

    assert aug.enabled
    assert out.shape == img.shape
    assert_array_equal(out, aug.apply(img, again))

    # the twin receives the same flip, crop and erased rectangle
    top, left, h, w, fill = params['erase']
    twin_out = aug.apply(twin, params)
    assert_array_equal(out[top:top + h, left:left + w],
                       twin_out[top:top + h, left:left + w])
    region = out[top:top + h, left:left + w]
    assert_allclose(region, np.broadcast_to(fill, region.shape))


def test_flip_only():
    aug = GeometricAugment(flip=True)
    img = np.random.default_rng(2).uniform(size=(4, 6, 3))

    assert_array_equal(aug.apply(img, {'flip': True, 'offset': (0, 0),
                                       'erase': None}), img[:, ::-1])
    assert not GeometricAugment(flip=False).enabled
