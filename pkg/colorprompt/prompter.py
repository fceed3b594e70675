# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
The prompter: a light regressor that predicts the original color
statistics of an image from its content, and the pool that keeps one
prompter per completed task.
"""
import numpy as np

from astropy import log
from astropy.table import Table

from . import conf
from .augment import color_resample
from .colorspace import srgb_to_lab
from .colorstats import ColorStats, channel_wasserstein, image_stats
from .exceptions import TrainingError
from .network import DEFAULT_GRID, MLP, Adam, grid_pool
from .serialization import read_networks, write_networks
from .transfer import object_agnostic_transfer, transfer_to_stats

__all__ = ['PROMPTER_HIDDEN', 'PrompterNet', 'PrompterPool', 'prompter_inputs',
           'prompter_forward', 'prompter_predict', 'prompter_loss',
           'prompter_batch_loss', 'prompter_train_step', 'prompter_recover',
           'prompter_recover_batch', 'pool_save', 'pool_load',
           'recovery_experiment']

PROMPTER_HIDDEN = (128, 64)

# log-sigma outputs are clipped here so that the prediction stays finite
LOG_SIGMA_LIMIT = 20.0

_objective_logged = False


def prompter_inputs(images, grid=DEFAULT_GRID):
    """
    Network input of a batch of sRGB images.

    Every image is converted to lαβ, standardized per channel with its own
    statistics (standard deviations floored at ``conf.sigma_floor``) and
    mean-pooled onto the grid. A color transfer leaves this input unchanged
    up to clamping.

    Returns
    -------
    x : `~numpy.ndarray`
        Array of shape ``(N, grid[0] * grid[1] * 3)``.
    """
    labs = [srgb_to_lab(img) for img in images]
    stats = [image_stats(lab) for lab in labs]
    mean = np.array([s.mean for s in stats])
    std = np.maximum(np.array([s.std for s in stats]), conf.sigma_floor)
    pooled = grid_pool(labs, grid).reshape(len(labs), -1, 3)
    return ((pooled - mean[:, None]) / std[:, None]).reshape(len(labs), -1)


class PrompterNet(object):
    """
    Regressor from the standardized lαβ grid of an image (see
    `prompter_inputs`) to lαβ statistics.

    The six outputs are three channel means and three log standard
    deviations.
    """
    def __init__(self, mlp, grid=DEFAULT_GRID, optimizer=None):
        """
        Parameters
        ----------
        mlp : `~colorprompt.MLP`
            Layers ``[grid_h * grid_w * 3, ..., 6]``.
        grid : tuple of int
            Pooling grid.
        optimizer : `~colorprompt.Adam`, optional
            Optimizer state carried between training steps.
        """
        if mlp.layer_sizes[0] != grid[0] * grid[1] * 3:
            raise ValueError('input layer size {0} does not match a {1}x{2} '
                             'grid'.format(mlp.layer_sizes[0], *grid))
        if mlp.layer_sizes[-1] != 6:
            raise ValueError('the prompter must have six outputs')
        self.mlp = mlp
        self.grid = tuple(grid)
        self.optimizer = Adam() if optimizer is None else optimizer

    @classmethod
    def initialize(cls, rng, grid=DEFAULT_GRID, hidden=PROMPTER_HIDDEN):
        """
        Randomly initialized prompter.

        Parameters
        ----------
        rng : `~numpy.random.Generator`
            Seeded generator.
        grid : tuple of int
            Pooling grid.
        hidden : tuple of int
            Hidden layer sizes.
        """
        global _objective_logged
        if not _objective_logged:
            log.info('prompter objective: minimize the mean squared error '
                     'between predicted and original (mean, std)')
            _objective_logged = True
        sizes = [grid[0] * grid[1] * 3] + list(hidden) + [6]
        return cls(MLP.initialize(sizes, rng, output_scale=0.1), grid)

    def copy(self):
        return PrompterNet(self.mlp.copy(), self.grid, self.optimizer.copy())

    def predict(self, images):
        """
        Predicted means and standard deviations, each ``(N, 3)``.
        """
        self.mlp.check_finite()
        out = self.mlp.forward(prompter_inputs(images, self.grid))
        log_sigma = np.clip(out[:, 3:], -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)
        return out[:, :3], np.exp(log_sigma)

    def features(self, images):
        """
        Penultimate activations.
        """
        return self.mlp.hidden(prompter_inputs(images, self.grid))


def prompter_forward(net, img):
    """
    Predict the lαβ statistics of one sRGB image.

    Parameters
    ----------
    net : `~colorprompt.PrompterNet`
    img : `~numpy.ndarray`
        sRGB image of shape ``(H, W, 3)``.

    Returns
    -------
    stats : `~colorprompt.ColorStats`
    """
    return prompter_predict(net, [img])[0]


def prompter_predict(net, images):
    """
    `prompter_forward` over a stack of same-sized images.
    """
    mean, std = net.predict(images)
    return [ColorStats(m, s) for m, s in zip(mean, std)]


def prompter_loss(pred, target):
    """
    Mean squared error over the six components ``(mean[3], std[3])``.
    """
    return float(np.mean((pred.to_vector() - target.to_vector()) ** 2))


def prompter_batch_loss(net, images, targets, params=None):
    """
    Batch objective and its analytic gradient.

    The objective is the average of `prompter_loss` over the batch.

    Parameters
    ----------
    net : `~colorprompt.PrompterNet`
    images : list of `~numpy.ndarray`
        Input images (the corrupted ones during training).
    targets : `~numpy.ndarray`
        Target six-vectors of shape ``(N, 6)``.
    params : list of `~numpy.ndarray`, optional
        Parameters to evaluate at instead of the network's own.

    Returns
    -------
    loss : float
    grads : list of `~numpy.ndarray`
        Gradients in the order of `~colorprompt.MLP.parameters`.
    """
    mlp = net.mlp if params is None else MLP.from_parameters(params)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    out, cache = mlp.forward(prompter_inputs(images, net.grid), cache=True)
    log_sigma = out[:, 3:]
    sigma = np.exp(np.clip(log_sigma, -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT))
    diff_mean = out[:, :3] - targets[:, :3]
    diff_std = sigma - targets[:, 3:]
    loss = (np.sum(diff_mean ** 2) + np.sum(diff_std ** 2)) / (6 * n)

    grad_out = np.empty_like(out)
    grad_out[:, :3] = 2 * diff_mean / (6 * n)
    grad_out[:, 3:] = (2 * diff_std * sigma / (6 * n) *
                       (np.abs(log_sigma) < LOG_SIGMA_LIMIT))
    grads, _ = mlp.backward(cache, grad_out)
    return float(loss), grads


def prompter_train_step(net, batch, rng, lr=None):
    """
    One training step: corrupt the batch with Color Re-sampling and regress
    the original statistics from the corrupted images.

    Parameters
    ----------
    net : `~colorprompt.PrompterNet`
    batch : list of `~numpy.ndarray`
        sRGB images of the current task.
    rng : `~numpy.random.Generator`
        Seeded generator driving the re-sampling.
    lr : float, optional
        Learning rate. Default is ``conf.prompter_lr``.

    Returns
    -------
    net : `~colorprompt.PrompterNet`
        Updated copy; the input network is left untouched.
    loss : float
        Objective before the update.
    """
    if lr is None:
        lr = conf.prompter_lr
    pairs = color_resample(batch, rng)
    corrupted = [img for img, _ in pairs]
    targets = np.array([stats.to_vector() for _, stats in pairs])

    loss, grads = prompter_batch_loss(net, corrupted, targets)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingError('prompter step produced a non-finite loss ({0}); '
                            'batch of {1} images, learning rate {2}'
                            .format(loss, len(batch), lr))

    updated = net.copy()
    params = updated.optimizer.step(updated.mlp.parameters(), grads, lr)
    updated.mlp = MLP.from_parameters(params)
    return updated, loss


def prompter_recover(net, img, object_agnostic=False, crop_fraction=None):
    """
    Transfer an image to the statistics the prompter predicts for it.

    Parameters
    ----------
    net : `~colorprompt.PrompterNet`
    img : `~numpy.ndarray`
        sRGB image.
    object_agnostic : bool
        Measure the source statistics on the image frame only.
    crop_fraction : float, optional
        Frame crop used when ``object_agnostic`` is set.

    Returns
    -------
    img : `~numpy.ndarray`
    """
    return prompter_recover_batch(net, [img], object_agnostic,
                                  crop_fraction)[0]


def prompter_recover_batch(net, images, object_agnostic=False,
                           crop_fraction=None):
    """
    `prompter_recover` over a list of same-sized images.
    """
    guidance = prompter_predict(net, images)
    if object_agnostic:
        return [object_agnostic_transfer(img, stats, crop_fraction)
                for img, stats in zip(images, guidance)]
    return [transfer_to_stats(img, None, stats)
            for img, stats in zip(images, guidance)]


class PrompterPool(object):
    """
    Ordered collection of ``(task_id, PrompterNet)``, one per completed
    task.
    """
    def __init__(self, entries=None, grid=DEFAULT_GRID,
                 hidden=PROMPTER_HIDDEN):
        self.grid = tuple(grid)
        self.layer_sizes = [grid[0] * grid[1] * 3] + list(hidden) + [6]
        self.entries = []
        for task_id, net in entries or []:
            self.append(task_id, net)

    def append(self, task_id, net):
        """
        Add the prompter of a completed task.
        """
        task_id = str(task_id)
        if task_id in self.task_ids:
            raise ValueError('task {0!r} is already in the pool'
                             .format(task_id))
        if net.mlp.layer_sizes != self.layer_sizes or net.grid != self.grid:
            raise ValueError('prompter architecture does not match the pool')
        self.entries.append((task_id, net))

    @property
    def task_ids(self):
        return [task_id for task_id, _ in self.entries]

    def get(self, task_id):
        for tid, net in self.entries:
            if tid == str(task_id):
                return net
        raise KeyError('task {0!r} is not in the pool'.format(task_id))

    def draw(self, rng):
        """
        Uniformly draw one ``(task_id, net)`` entry.
        """
        if len(self.entries) == 0:
            raise ValueError('cannot draw from an empty prompter pool')
        return self.entries[int(rng.integers(len(self.entries)))]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        yield from self.entries

    def __repr__(self):
        return '<PrompterPool tasks={0}>'.format(self.task_ids)


def pool_save(pool, path):
    """
    Write a prompter pool to a versioned FITS container.
    """
    write_networks(path, 'PROMPTER',
                   [(task_id, net.mlp) for task_id, net in pool],
                   pool.grid, pool.layer_sizes)


def pool_load(path):
    """
    Read a prompter pool written by `pool_save`.

    Raises
    ------
    `~colorprompt.PoolFormatError`
        If the file is truncated, corrupt or of another version.
    """
    info, entries = read_networks(path, 'PROMPTER')
    hidden = tuple(info['layer_sizes'][1:-1])
    pool = PrompterPool(grid=info['grid'], hidden=hidden)
    for task_id, mlp in entries:
        pool.append(task_id, PrompterNet(mlp, info['grid']))
    return pool


def recovery_experiment(net, images, rng, object_agnostic=False):
    """
    Corrupt images with Color Re-sampling, recover them with the prompter
    and compare both against the originals.

    Parameters
    ----------
    net : `~colorprompt.PrompterNet`
    images : list of `~numpy.ndarray`
        In-distribution sRGB images.
    rng : `~numpy.random.Generator`
        Seeded generator driving the corruption.
    object_agnostic : bool
        Recover with frame-derived source statistics.

    Returns
    -------
    table : `~astropy.table.Table`
        One row per sRGB channel: mean absolute per-image channel-mean gap
        of the corrupted and of the recovered images, and the Wasserstein-1
        distance of each image's channel distribution to its original,
        averaged over the images.
    """
    corrupted = [img for img, _ in color_resample(images, rng)]
    recovered = prompter_recover_batch(net, corrupted, object_agnostic)

    def channel_means(batch):
        return np.array([img.reshape(-1, 3).mean(axis=0) for img in batch])

    original_means = channel_means(images)
    corrupted_gap = np.abs(channel_means(corrupted) - original_means).mean(0)
    recovered_gap = np.abs(channel_means(recovered) - original_means).mean(0)

    def mean_w1(batch, channel):
        return float(np.mean([channel_wasserstein([img], [original], channel)
                              for img, original in zip(batch, images)]))

    table = Table(names=['channel', 'corrupted_gap', 'recovered_gap',
                         'corrupted_w1', 'recovered_w1'],
                  dtype=['U1', float, float, float, float])

    for i, channel in enumerate('RGB'):
        table.add_row([channel, corrupted_gap[i], recovered_gap[i],
                       mean_w1(corrupted, channel),
                       mean_w1(recovered, channel)])
    return table
