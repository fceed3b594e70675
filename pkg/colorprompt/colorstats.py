# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Per-image and per-camera color statistics in lαβ space, batch statistics
models for re-sampling, and sRGB channel histograms for gap analysis.
"""
import json
from collections import OrderedDict

import numpy as np
import matplotlib.pyplot as plt
from scipy.stats import wasserstein_distance

from astropy.table import Table

from . import conf
from .colorspace import validate_image
from .exceptions import EmptySelectionError, InvalidStatsError

__all__ = ['NO_CAMERA', 'ColorStats', 'Region', 'CameraStats',
           'StatDistribution', 'ChannelHistogram', 'image_stats',
           'merge_stats', 'camera_summary', 'batch_stat_model',
           'channel_histogram', 'channel_wasserstein', 'stats_table',
           'stats_from_table', 'camera_summary_to_json',
           'camera_summary_from_json', 'count_distinct_guidance']

# Camera id used for samples that carry no camera label
NO_CAMERA = 'none'

STAT_COLUMNS = ['l_mean', 'a_mean', 'b_mean', 'l_std', 'a_std', 'b_std']

CHANNELS = {'R': 0, 'G': 1, 'B': 2}


class ColorStats(object):
    """
    Per-channel mean and standard deviation of an lαβ pixel population.
    """
    def __init__(self, mean, std):
        """
        Parameters
        ----------
        mean : array-like
            Three channel means.
        std : array-like
            Three channel standard deviations, all non-negative.
        """
        mean = np.array(mean, dtype=np.float64).reshape(3)
        std = np.array(std, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise InvalidStatsError('color statistics must be finite, got '
                                    'mean={0} std={1}'.format(mean, std))
        if np.any(std < 0):
            raise InvalidStatsError('standard deviations must be '
                                    'non-negative, got {0}'.format(std))
        self.mean = mean
        self.std = std

    @classmethod
    def from_vector(cls, vector):
        """
        Build from the six-vector ``(mean[3], std[3])``.
        """
        vector = np.asarray(vector, dtype=np.float64).reshape(6)
        return cls(vector[:3], vector[3:])

    def to_vector(self):
        """
        Six-vector ``(mean[3], std[3])``.
        """
        return np.concatenate([self.mean, self.std])

    def __eq__(self, other):
        if not isinstance(other, ColorStats):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())

    __hash__ = None

    def __repr__(self):
        return '<ColorStats mean={0} std={1}>'.format(
            np.array2string(self.mean, precision=4),
            np.array2string(self.std, precision=4))


class Region(object):
    """
    Pixel selection used when computing image statistics.

    ``'full'`` selects every pixel; ``'frame'`` drops the centered box of
    size ``crop_fraction * H`` by ``crop_fraction * W``, which is where a
    detected person usually sits.
    """
    FULL = 'full'
    FRAME = 'frame'

    def __init__(self, kind=FULL, crop_fraction=None):
        if kind not in (self.FULL, self.FRAME):
            raise ValueError("region kind must be 'full' or 'frame', got "
                             "{0!r}".format(kind))
        if kind == self.FRAME:
            if crop_fraction is None:
                crop_fraction = conf.crop_fraction
            if not 0 < crop_fraction < 1:
                raise ValueError('crop_fraction must lie in (0, 1), got '
                                 '{0}'.format(crop_fraction))
        self.kind = kind
        self.crop_fraction = crop_fraction

    @classmethod
    def full(cls):
        return cls(cls.FULL)

    @classmethod
    def frame(cls, crop_fraction=None):
        """
        Frame region; ``crop_fraction=0`` degenerates to the full image.
        """
        if crop_fraction is not None and crop_fraction == 0:
            return cls.full()
        return cls(cls.FRAME, crop_fraction)

    @classmethod
    def parse(cls, text):
        """
        Parse ``'full'``, ``'frame'`` or ``'frame:<fraction>'``.
        """
        kind, _, value = text.strip().lower().partition(':')
        if kind == cls.FULL and not value:
            return cls.full()
        if kind == cls.FRAME:
            return cls.frame(float(value) if value else None)
        raise ValueError('cannot parse region {0!r}'.format(text))

    def mask(self, height, width):
        """
        Boolean ``(height, width)`` mask of the selected pixels.
        """
        keep = np.ones((height, width), dtype=bool)
        if self.kind == self.FRAME:
            crop_h = int(round(self.crop_fraction * height))
            crop_w = int(round(self.crop_fraction * width))
            top = (height - crop_h) // 2
            left = (width - crop_w) // 2
            keep[top:top + crop_h, left:left + crop_w] = False
        return keep

    def __repr__(self):
        if self.kind == self.FULL:
            return '<Region full>'
        return '<Region frame crop_fraction={0}>'.format(self.crop_fraction)


class CameraStats(object):
    """
    Camera Summary entry: statistics pooled over one camera's images.
    """
    def __init__(self, camera_id, stats, image_count, pixel_count=None):
        if image_count < 1:
            raise ValueError('image_count must be positive')
        self.camera_id = camera_id
        self.stats = stats
        self.image_count = int(image_count)
        self.pixel_count = pixel_count

    def __repr__(self):
        return '<CameraStats camera={0!r} images={1} {2!r}>'.format(
            self.camera_id, self.image_count, self.stats)


def _region_pixels(lab, region):
    lab = validate_image(lab, name='lαβ image')
    if region is None:
        region = Region.full()
    keep = region.mask(*lab.shape[:2])
    pixels = lab[keep]
    if len(pixels) == 0:
        raise EmptySelectionError('{0!r} selects no pixels of a {1}x{2} '
                                  'image'.format(region, *lab.shape[:2]))
    return pixels


def image_stats(lab, region=None):
    """
    Population mean and standard deviation of each lαβ channel.

    Parameters
    ----------
    lab : `~numpy.ndarray`
        lαβ image of shape ``(H, W, 3)``.
    region : `~colorprompt.Region`, optional
        Pixel selection. Default is the full image.

    Returns
    -------
    stats : `~colorprompt.ColorStats`
    """
    pixels = _region_pixels(lab, region)
    return ColorStats(pixels.mean(axis=0), pixels.std(axis=0))


def merge_stats(parts):
    r"""
    Combine statistics of disjoint pixel populations.

    Means are weighted by pixel count; variances are combined with the
    parallel-axis rule,

    .. math::

        \sigma^2 = \frac{1}{N}\sum_k n_k\left(\sigma_k^2 +
        (\mu_k - \mu)^2\right).

    Parameters
    ----------
    parts : iterable of (`~colorprompt.ColorStats`, int)
        Statistics and pixel count of each population.

    Returns
    -------
    stats : `~colorprompt.ColorStats`
    """
    parts = list(parts)
    if len(parts) == 0:
        raise EmptySelectionError('nothing to merge')
    counts = np.array([n for _, n in parts], dtype=np.float64)
    means = np.array([s.mean for s, _ in parts])
    stds = np.array([s.std for s, _ in parts])
    total = counts.sum()
    mean = (counts[:, None] * means).sum(axis=0) / total
    var = (counts[:, None] * (stds ** 2 + (means - mean) ** 2)).sum(axis=0)
    return ColorStats(mean, np.sqrt(np.maximum(var / total, 0)))


def camera_summary(samples):
    """
    Camera Summary (CaS): pooled lαβ statistics per camera.

    Parameters
    ----------
    samples : list of (`~numpy.ndarray`, camera id)
        lαβ images with their camera labels. A camera of `None` is grouped
        under `NO_CAMERA`.

    Returns
    -------
    summary : list of `~colorprompt.CameraStats`
        One entry per distinct camera, ordered by camera id.
    """
    if len(samples) == 0:
        raise EmptySelectionError('camera_summary needs at least one image')

    groups = OrderedDict()
    for lab, camera in samples:
        camera = NO_CAMERA if camera is None else camera
        pixels = _region_pixels(lab, None)
        groups.setdefault(camera, []).append(
            (ColorStats(pixels.mean(axis=0), pixels.std(axis=0)), len(pixels)))

    summary = []
    for camera in sorted(groups, key=str):
        parts = groups[camera]
        summary.append(CameraStats(camera, merge_stats(parts), len(parts),
                                   pixel_count=sum(n for _, n in parts)))
    return summary


class StatDistribution(object):
    """
    Independent Gaussian model over the six components of `ColorStats`.
    """
    def __init__(self, mean, spread):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(6)
        self.spread = np.asarray(spread, dtype=np.float64).reshape(6)

    def sample(self, rng, size):
        """
        Draw ``size`` statistics in one pass; negative spreads are truncated
        to zero.

        Parameters
        ----------
        rng : `~numpy.random.Generator`
            Seeded generator.
        size : int
            Number of draws.

        Returns
        -------
        draws : list of `~colorprompt.ColorStats`
        """
        draws = rng.normal(self.mean, self.spread, size=(size, 6))
        draws[:, 3:] = np.maximum(draws[:, 3:], 0)
        return [ColorStats.from_vector(d) for d in draws]

    def __repr__(self):
        return '<StatDistribution mean={0} spread={1}>'.format(
            np.array2string(self.mean, precision=4),
            np.array2string(self.spread, precision=4))


def batch_stat_model(batch, jitter=None):
    """
    Fit the Gaussian re-sampling model to a batch of statistics.

    Spreads are sample standard deviations (``n - 1`` convention) floored
    at ``jitter``, so that a homogeneous or singleton batch still produces
    diverse draws.

    Parameters
    ----------
    batch : list of `~colorprompt.ColorStats`
    jitter : float, optional
        Spread floor. Default is ``conf.stat_jitter``.

    Returns
    -------
    model : `~colorprompt.StatDistribution`
    """
    if len(batch) == 0:
        raise EmptySelectionError('batch_stat_model needs at least one entry')
    if jitter is None:
        jitter = conf.stat_jitter
    vectors = np.array([s.to_vector() for s in batch])
    if len(vectors) > 1:
        spread = vectors.std(axis=0, ddof=1)
    else:
        spread = np.zeros(6)
    return StatDistribution(vectors.mean(axis=0), np.maximum(spread, jitter))


class ChannelHistogram(object):
    """
    Normalized histogram of one sRGB channel over a set of images.
    """
    def __init__(self, channel, edges, frequencies):
        self.channel = channel
        self.edges = edges
        self.frequencies = frequencies

    @property
    def peak_bin(self):
        return int(np.argmax(self.frequencies))

    def to_table(self):
        """
        Histogram as an `~astropy.table.Table` with bin edges and
        frequencies.
        """
        return Table([self.edges[:-1], self.edges[1:], self.frequencies],
                     names=['bin_low', 'bin_high', 'frequency'],
                     meta={'channel': self.channel})

    def plot(self, ax=None, **kwargs):
        """
        Plot the histogram.

        Parameters
        ----------
        ax : `~matplotlib.axes.Axes`
            Matplotlib axis instance on which to build the plot
        kwargs : dict
            Further keyword arguments to pass to
            `~matplotlib.axes.Axes.stairs`.

        Returns
        -------
        ax : `~matplotlib.axes.Axes`
            Matplotlib axis instance with the histogram plotted on it.
        """
        if ax is None:
            ax = plt.gca()

        ax.stairs(self.frequencies, self.edges, **kwargs)
        ax.set(xlabel='{0} intensity'.format(self.channel),
               ylabel='Frequency')
        return ax


def _channel_values(images, channel):
    if len(images) == 0:
        raise EmptySelectionError('no images given')
    index = CHANNELS[channel.upper()] if isinstance(channel, str) else channel
    return np.concatenate([validate_image(img)[..., index].ravel()
                           for img in images])


def channel_histogram(images, channel, bins=64):
    """
    Equal-width histogram of an sRGB channel over :math:`[0, 1]`.

    Parameters
    ----------
    images : list of `~numpy.ndarray`
        sRGB images.
    channel : {'R', 'G', 'B'}
        Channel to histogram.
    bins : int
        Number of bins, at least two.

    Returns
    -------
    hist : `~colorprompt.ChannelHistogram`
        Frequencies sum to one.
    """
    if bins < 2:
        raise ValueError('bins must be at least 2, got {0}'.format(bins))
    values = _channel_values(images, channel)
    counts, edges = np.histogram(values, bins=bins, range=(0, 1))
    name = channel.upper() if isinstance(channel, str) else 'RGB'[channel]
    return ChannelHistogram(name, edges, counts / counts.sum())


def channel_wasserstein(images_a, images_b, channel):
    """
    Wasserstein-1 distance between the pixel distributions of one sRGB
    channel in two image sets.
    """
    return wasserstein_distance(_channel_values(images_a, channel),
                                _channel_values(images_b, channel))


def stats_table(stats, names=None):
    """
    Tabulate statistics, one row per entry.

    Parameters
    ----------
    stats : list of `~colorprompt.ColorStats`
    names : list of str, optional
        Row labels (file names, camera ids...).

    Returns
    -------
    table : `~astropy.table.Table`
    """
    vectors = np.array([s.to_vector() for s in stats]).reshape(-1, 6)
    columns = [vectors[:, i] for i in range(6)]
    table = Table(columns, names=STAT_COLUMNS)
    if names is not None:
        table.add_column([str(n) for n in names], name='name', index=0)
    return table


def stats_from_table(table, row=0):
    """
    Read one `~colorprompt.ColorStats` back from a table written by
    `stats_table`.
    """
    return ColorStats.from_vector([table[col][row] for col in STAT_COLUMNS])


def camera_summary_to_json(summary, path=None):
    """
    Serialize a camera summary as a JSON document keyed by camera id.

    Returns the document as a string; also writes it to ``path`` if given.
    """
    document = {}
    for entry in summary:
        document[str(entry.camera_id)] = {
            'mean': entry.stats.mean.tolist(),
            'std': entry.stats.std.tolist(),
            'image_count': entry.image_count,
        }
    text = json.dumps(document, indent=2, sort_keys=True)
    if path is not None:
        with open(path, 'w') as f:
            f.write(text + '\n')
    return text


def camera_summary_from_json(path):
    """
    Load a camera summary written by `camera_summary_to_json`.
    """
    with open(path, 'r') as f:
        document = json.load(f)

    summary = []
    for key in sorted(document):
        entry = document[key]
        camera = int(key) if key.lstrip('-').isdigit() else key
        summary.append(CameraStats(camera,
                                   ColorStats(entry['mean'], entry['std']),
                                   entry['image_count']))
    return summary


def count_distinct_guidance(stats, decimals=4):
    """
    Number of distinct guidance statistics after rounding.
    """
    rounded = {tuple(np.round(s.to_vector(), decimals)) for s in stats}
    return len(rounded)
