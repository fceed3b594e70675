import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from astropy.io import fits

from ..augment import color_resample
from ..colorspace import srgb_to_lab
from ..colorstats import ColorStats, image_stats
from ..exceptions import PoolFormatError
from ..ingest import SynthSpec, synth_generate
from ..memory import EmbedNet, embed_save
from ..network import MLP, finite_difference_gradient
from ..prompter import (PrompterNet, PrompterPool, prompter_forward,
                        prompter_inputs, prompter_predict, prompter_loss,
                        prompter_batch_loss, prompter_train_step,
                        prompter_recover, pool_save, pool_load,
                        recovery_experiment)
from ..transfer import transfer_to_stats
from .test_network import relative_error


def random_images(n, seed=0, shape=(32, 16)):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0.1, 0.9, size=shape + (3,)) for _ in range(n)]


def one_camera_images(n_identities=8, seed=0):
    spec = SynthSpec({1: ColorStats([-0.5, 0.06, 0.02], [0.2, 0.04, 0.04])},
                     n_identities=n_identities, images_per_identity=4,
                     height=32, width=16)
    return [s.image for s in synth_generate(spec, seed)]


def four_camera_images(n_identities, seed, eval_identities=0):
    cameras = {1: ColorStats([-0.95, 0.05, 0.00], [0.15, 0.04, 0.04]),
               2: ColorStats([-0.75, -0.06, 0.05], [0.15, 0.04, 0.04]),
               3: ColorStats([-0.55, 0.08, -0.05], [0.15, 0.04, 0.04]),
               4: ColorStats([-0.40, -0.03, -0.03], [0.15, 0.04, 0.04])}
    spec = SynthSpec(cameras, n_identities=n_identities, images_per_identity=4,
                     eval_identities=eval_identities, height=32, width=16)
    return synth_generate(spec, seed)


def test_architecture():
    net = PrompterNet.initialize(np.random.default_rng(0))

    assert net.mlp.layer_sizes == [384, 128, 64, 6]
    assert net.grid == (16, 8)
    with pytest.raises(ValueError):
        PrompterNet(MLP.initialize([10, 6], np.random.default_rng(0)))


def test_forward_std_is_positive():
    net = PrompterNet.initialize(np.random.default_rng(1))

    for img in random_images(5):
        stats = prompter_forward(net, img)
        assert isinstance(stats, ColorStats)
        assert np.all(stats.std > 0)


def test_zero_weight_net():
    bias = np.array([0.1, -0.2, 0.3, -1.0, 0.0, 0.5])
    sizes = [384, 128, 64, 6]
    mlp = MLP([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
              [np.zeros(128), np.zeros(64), bias])

    stats = prompter_forward(PrompterNet(mlp), random_images(1)[0])
    assert_allclose(stats.mean, bias[:3])
    assert_allclose(stats.std, np.exp(bias[3:]))


def test_forward_is_invariant_within_cells():
    net = PrompterNet.initialize(np.random.default_rng(2))
    img = random_images(1, seed=3)[0]
    swapped = img.copy()
    swapped[30, 14], swapped[31, 15] = img[31, 15], img[30, 14]

    assert_allclose(prompter_forward(net, swapped).to_vector(),
                    prompter_forward(net, img).to_vector(), rtol=1e-12)


def test_input_ignores_color_transfer():
    img = random_images(1, seed=30)[0]
    own = image_stats(srgb_to_lab(img))
    darker = transfer_to_stats(img, None,
                               ColorStats(own.mean - [0.1, 0, 0], own.std))
    assert 0 < darker.min() and darker.max() < 1

    assert_allclose(prompter_inputs([darker]), prompter_inputs([img]),
                    atol=1e-8)
    net = PrompterNet.initialize(np.random.default_rng(31))
    assert_allclose(net.features([darker]), net.features([img]), atol=1e-8)


def test_loss_values():
    target = ColorStats([0, 0, 0], [1, 1, 1])
    pred = ColorStats([1, 0, 0], [1, 1, 1])

    assert prompter_loss(target, target) == 0
    assert_allclose(prompter_loss(pred, target), 1 / 6)
    assert prompter_loss(pred, target) == prompter_loss(target, pred)


def test_batch_loss_matches_single_loss():
    net = PrompterNet.initialize(np.random.default_rng(4))
    images = random_images(3, seed=5)
    targets = np.array([[-0.5, 0.1, 0.0, 0.2, 0.05, 0.04],
                        [-0.3, 0.0, 0.1, 0.1, 0.03, 0.06],
                        [-0.7, -0.1, 0.0, 0.3, 0.02, 0.02]])

    loss, _ = prompter_batch_loss(net, images, targets)
    singles = [prompter_loss(pred, ColorStats.from_vector(t))
               for pred, t in zip(prompter_predict(net, images), targets)]
    assert_allclose(loss, np.mean(singles))


def test_gradient():
    rng = np.random.default_rng(6)
    net = PrompterNet.initialize(rng)
    images = random_images(3, seed=7)
    targets = np.column_stack([rng.uniform(-0.8, 0, 3),
                               rng.uniform(-0.1, 0.1, (3, 2)),
                               rng.uniform(0.05, 0.3, (3, 3))])

    def loss(params):
        return prompter_batch_loss(net, images, targets, params)[0]

    _, grads = prompter_batch_loss(net, images, targets)
    params = net.mlp.parameters()
    coordinates = [(i, int(rng.integers(params[i].size)))
                   for i in rng.integers(len(params), size=20)]

    numeric = finite_difference_gradient(loss, params, coordinates, h=1e-5)
    analytic = np.array([grads[i].flat[j] for i, j in coordinates])
    assert np.all(relative_error(analytic, numeric) < 1e-4)


def test_train_step_with_zero_learning_rate():
    net = PrompterNet.initialize(np.random.default_rng(8))
    updated, loss = prompter_train_step(net, random_images(4, seed=9),
                                        np.random.default_rng(0), lr=0.0)

    assert np.isfinite(loss)
    for p, q in zip(net.mlp.parameters(), updated.mlp.parameters()):
        assert_array_equal(p, q)


def test_train_step_is_deterministic():
    images = random_images(4, seed=10)

    def train(seed):
        net = PrompterNet.initialize(np.random.default_rng(seed))
        rng = np.random.default_rng(seed)
        for _ in range(3):
            net, _ = prompter_train_step(net, images, rng)
        return net

    first, second = train(11), train(11)
    for p, q in zip(first.mlp.parameters(), second.mlp.parameters()):
        assert_array_equal(p, q)
    # the input network is never modified in place
    net = PrompterNet.initialize(np.random.default_rng(12))
    before = [p.copy() for p in net.mlp.parameters()]
    prompter_train_step(net, images, np.random.default_rng(0), lr=1e-2)
    for p, q in zip(before, net.mlp.parameters()):
        assert_array_equal(p, q)


def test_untrained_recovery_is_valid():
    net = PrompterNet.initialize(np.random.default_rng(13))

    for object_agnostic in (False, True):
        out = prompter_recover(net, random_images(1, seed=14)[0],
                               object_agnostic=object_agnostic,
                               crop_fraction=0.5)
        assert out.shape == (32, 16, 3)
        assert np.all(np.isfinite(out))
        assert np.all((out >= 0) & (out <= 1))


def test_pool_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    pool = PrompterPool()
    for task in ('market', 'cuhk'):
        pool.append(task, PrompterNet.initialize(rng))
    path = str(tmp_path / 'pool.fits')
    pool_save(pool, path)

    loaded = pool_load(path)
    assert loaded.task_ids == ['market', 'cuhk']
    img = random_images(1, seed=16)[0]
    for task in pool.task_ids:
        assert_array_equal(prompter_forward(loaded.get(task), img).to_vector(),
                           prompter_forward(pool.get(task), img).to_vector())

    # identical weights give identical bytes
    again = str(tmp_path / 'again.fits')
    pool_save(loaded, again)
    with open(path, 'rb') as a, open(again, 'rb') as b:
        assert a.read() == b.read()


def test_empty_pool_round_trip(tmp_path):
    path = str(tmp_path / 'empty.fits')
    pool_save(PrompterPool(), path)

    loaded = pool_load(path)
    assert len(loaded) == 0
    assert loaded.layer_sizes == [384, 128, 64, 6]


def test_truncated_pool(tmp_path):
    path = str(tmp_path / 'pool.fits')
    pool_save(PrompterPool([('a', PrompterNet.initialize(
        np.random.default_rng(17)))]), path)
    with open(path, 'rb') as f:
        data = f.read()
    with open(path, 'wb') as f:
        f.write(data[:len(data) - 1000])

    with pytest.raises(PoolFormatError):
        pool_load(path)


def test_corrupt_pool(tmp_path):
    path = str(tmp_path / 'pool.fits')
    pool_save(PrompterPool([('a', PrompterNet.initialize(
        np.random.default_rng(18)))]), path)
    with fits.open(path, mode='update') as hdul:
        hdul[1].data[0, 0] += 1.0

    with pytest.raises(PoolFormatError, match='digest'):
        pool_load(path)


def test_pool_version_and_kind(tmp_path):
    path = str(tmp_path / 'pool.fits')
    pool_save(PrompterPool(), path)
    fits.setval(path, 'CPVERS', value=99)
    with pytest.raises(PoolFormatError, match='version'):
        pool_load(path)

    embed_path = str(tmp_path / 'embed.fits')
    embed_save(EmbedNet.initialize(np.random.default_rng(19)), embed_path)
    with pytest.raises(PoolFormatError):
        pool_load(embed_path)
    with pytest.raises(PoolFormatError):
        pool_load(str(tmp_path / 'missing.fits'))


def test_pool_entries():
    rng = np.random.default_rng(20)
    pool = PrompterPool([('a', PrompterNet.initialize(rng))])

    with pytest.raises(ValueError):
        pool.append('a', PrompterNet.initialize(rng))
    with pytest.raises(ValueError):
        pool.append('b', PrompterNet.initialize(rng, hidden=(32,)))
    with pytest.raises(KeyError):
        pool.get('b')
    with pytest.raises(ValueError):
        PrompterPool().draw(rng)


def test_pool_draw_is_uniform():
    rng = np.random.default_rng(21)
    pool = PrompterPool([(task, PrompterNet.initialize(rng))
                         for task in ('a', 'b', 'c')])

    draws = [pool.draw(rng)[0] for _ in range(10000)]
    for task in pool.task_ids:
        assert 0.30 <= draws.count(task) / len(draws) <= 0.37


@pytest.mark.slow
def test_training_reduces_loss():
    images = one_camera_images()
    rng = np.random.default_rng(0)
    net = PrompterNet.initialize(rng)

    losses = []
    for step in range(500):
        batch = [images[i] for i in rng.choice(len(images), 16,
                                               replace=False)]
        net, loss = prompter_train_step(net, batch, rng, lr=1e-3)
        losses.append(loss)
    assert np.mean(losses[-20:]) < 0.1 * losses[0]


@pytest.mark.slow
def test_recovery_trend():
    samples = four_camera_images(8, seed=1, eval_identities=4)
    images = [s.image for s in samples if s.split == 'train']
    held_out = [s.image for s in samples if s.split == 'eval']
    rng = np.random.default_rng(1)
    net = PrompterNet.initialize(rng)
    for epoch in range(80):
        order = rng.permutation(len(images))
        for start in range(0, len(order), 16):
            net, _ = prompter_train_step(
                net, [images[i] for i in order[start:start + 16]], rng,
                lr=1e-3)

    table = recovery_experiment(net, held_out, np.random.default_rng(3))
    assert np.all(table['recovered_gap'] <= 0.1 * table['corrupted_gap'])
    assert np.all(table['recovered_w1'] <= 0.5 * table['corrupted_w1'])

    # an in-distribution image moves less than a corrupted one
    corrupted = [img for img, _ in color_resample(held_out,
                                                  np.random.default_rng(4))]
    own = np.mean([np.abs(prompter_recover(net, img) - img).mean()
                   for img in held_out])
    shifted = np.mean([np.abs(prompter_recover(net, img) - img).mean()
                       for img in corrupted])
    assert own < shifted
