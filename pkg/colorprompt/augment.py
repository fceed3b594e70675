# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Batch-level color augmentations (Color Re-sampling, Color Shuffling) and
the geometric augmentations of the training recipe.
"""
import numpy as np

from .colorspace import srgb_to_lab, lab_to_srgb
from .colorstats import image_stats, batch_stat_model
from .exceptions import EmptySelectionError
from .transfer import transfer_lab

__all__ = ['color_resample', 'color_shuffle', 'GeometricAugment']


def color_resample(batch, rng, jitter=None):
    """
    Color Re-sampling: move every image to statistics drawn from a model
    fitted over the batch's own statistics.

    The draws are made in a single pass, so a fixed seed gives
    bit-identical output.

    Parameters
    ----------
    batch : list of `~numpy.ndarray`
        sRGB images.
    rng : `~numpy.random.Generator`
        Seeded generator.
    jitter : float, optional
        Spread floor of the statistics model. Default is
        ``conf.stat_jitter``.

    Returns
    -------
    pairs : list of (`~numpy.ndarray`, `~colorprompt.ColorStats`)
        Corrupted image and the ORIGINAL statistics of that image, which is
        the regression target of the prompter.
    """
    if len(batch) == 0:
        raise EmptySelectionError('color_resample needs a non-empty batch')
    labs = [srgb_to_lab(img) for img in batch]
    originals = [image_stats(lab) for lab in labs]
    drawn = batch_stat_model(originals, jitter=jitter).sample(rng, len(labs))
    return [(lab_to_srgb(transfer_lab(lab, source, target)), source)
            for lab, source, target in zip(labs, originals, drawn)]


def color_shuffle(batch, rng):
    """
    Color Shuffling: transfer image ``i`` to the statistics of image
    ``perm[i]`` for one uniform random permutation of the batch.

    Parameters
    ----------
    batch : list of `~numpy.ndarray`
        sRGB images, at least two.
    rng : `~numpy.random.Generator`
        Seeded generator; the permutation is its first draw.

    Returns
    -------
    images : list of `~numpy.ndarray`
    """
    if len(batch) < 2:
        raise EmptySelectionError('color_shuffle needs at least two images')
    perm = rng.permutation(len(batch))
    labs = [srgb_to_lab(img) for img in batch]
    stats = [image_stats(lab) for lab in labs]
    return [lab_to_srgb(transfer_lab(lab, stats[i], stats[j]))
            for i, (lab, j) in enumerate(zip(labs, perm))]


class GeometricAugment(object):
    """
    Random flip, padded crop and erasing.

    Parameters are drawn once per image with `draw` and replayed with
    `apply`, so an image and its transferred twin receive the same
    geometry.
    """
    def __init__(self, flip=True, crop_padding=0, erase_probability=0.0):
        """
        Parameters
        ----------
        flip : bool
            Mirror horizontally with probability one half.
        crop_padding : int
            Zero padding (pixels) before cropping back to the input size.
        erase_probability : float
            Probability of blanking a random rectangle.
        """
        self.flip = flip
        self.crop_padding = int(crop_padding)
        self.erase_probability = erase_probability

    @property
    def enabled(self):
        return self.flip or self.crop_padding > 0 or self.erase_probability > 0

    def draw(self, rng, shape):
        """
        Draw augmentation parameters for an image of ``shape``.
        """
        height, width = shape[:2]
        pad = self.crop_padding
        params = {
            'flip': bool(self.flip and rng.random() < 0.5),
            'offset': (tuple(rng.integers(0, 2 * pad + 1, size=2))
                       if pad > 0 else (0, 0)),
            'erase': None,
        }
        if self.erase_probability > 0 and rng.random() < self.erase_probability:
            area = rng.uniform(0.02, 0.2) * height * width
            aspect = rng.uniform(0.3, 3.3)
            h = int(min(height, max(1, round(np.sqrt(area * aspect)))))
            w = int(min(width, max(1, round(np.sqrt(area / aspect)))))
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            params['erase'] = (top, left, h, w, rng.random(3))
        return params

    def apply(self, img, params):
        """
        Apply parameters from `draw` to an sRGB image.
        """
        out = img[:, ::-1] if params['flip'] else img
        pad = self.crop_padding
        if pad > 0:
            height, width = img.shape[:2]
            padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)))
            dy, dx = params['offset']
            out = padded[dy:dy + height, dx:dx + width]
        if params['erase'] is not None:
            top, left, h, w, fill = params['erase']
            out = np.array(out)
            out[top:top + h, left:left + w] = fill
        return np.ascontiguousarray(out)
