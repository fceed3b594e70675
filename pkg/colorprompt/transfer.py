# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Color style transfer: re-target the lαβ statistics of an image.
"""
import numpy as np

from . import conf
from .colorspace import srgb_to_lab, lab_to_srgb, validate_image
from .colorstats import ColorStats, Region, image_stats
from .exceptions import InvalidStatsError

__all__ = ['transfer_lab', 'transfer_to_stats', 'object_agnostic_transfer']


def _check_stats(stats, name):
    if not isinstance(stats, ColorStats):
        raise InvalidStatsError('{0} must be a ColorStats instance'
                                .format(name))
    if not (np.all(np.isfinite(stats.mean)) and
            np.all(np.isfinite(stats.std))):
        raise InvalidStatsError('{0} statistics are not finite'.format(name))


def transfer_lab(lab, source, target, sigma_floor=None):
    r"""
    Move lαβ pixels from ``source`` to ``target`` statistics.

    Per channel,

    .. math::

        x' = \frac{x - \mu_s}{\max(\sigma_s, \epsilon_\sigma)}\,\sigma_t +
        \mu_t.

    No clamping happens here; the result may leave the sRGB gamut.

    Parameters
    ----------
    lab : `~numpy.ndarray`
        lαβ image of shape ``(H, W, 3)``.
    source, target : `~colorprompt.ColorStats`
        Statistics to normalize with and to re-target to.
    sigma_floor : float, optional
        Floor :math:`\epsilon_\sigma` on the source standard deviation.
        Default is ``conf.sigma_floor``.

    Returns
    -------
    lab : `~numpy.ndarray`
        Transferred lαβ image.
    """
    lab = validate_image(lab, name='lαβ image')
    _check_stats(source, 'source')
    _check_stats(target, 'target')
    if sigma_floor is None:
        sigma_floor = conf.sigma_floor
    scale = target.std / np.maximum(source.std, sigma_floor)
    return (lab - source.mean) * scale + target.mean


def transfer_to_stats(img, source, target):
    """
    Transfer an sRGB image to the ``target`` color style.

    Parameters
    ----------
    img : `~numpy.ndarray`
        sRGB image of shape ``(H, W, 3)``.
    source : `~colorprompt.ColorStats` or None
        lαβ statistics the image is normalized with. `None` uses the
        image's own full-image statistics.
    target : `~colorprompt.ColorStats`
        lαβ statistics of the target style.

    Returns
    -------
    img : `~numpy.ndarray`
        Transferred sRGB image, clamped to :math:`[0, 1]`.
    """
    lab = srgb_to_lab(img)
    if source is None:
        source = image_stats(lab)
    return lab_to_srgb(transfer_lab(lab, source, target))


def object_agnostic_transfer(img, target, crop_fraction=None):
    """
    Transfer with source statistics measured on the image frame only.

    The centered person box dominates the full-image statistics; taking
    the source statistics from the border avoids over-compensating the
    clothing color. The transfer itself is applied to every pixel.

    Parameters
    ----------
    img : `~numpy.ndarray`
        sRGB image.
    target : `~colorprompt.ColorStats`
        Target lαβ statistics.
    crop_fraction : float, optional
        Fraction of height and width removed from the center. Zero means
        the full image. Default is ``conf.crop_fraction``.

    Returns
    -------
    img : `~numpy.ndarray`
        Transferred sRGB image.
    """
    if crop_fraction is None:
        crop_fraction = conf.crop_fraction
    lab = srgb_to_lab(img)
    source = image_stats(lab, Region.frame(crop_fraction))
    return lab_to_srgb(transfer_lab(lab, source, target))
