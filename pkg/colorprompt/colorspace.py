# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Conversions between gamma-encoded sRGB and the decorrelated lαβ space.
"""
import numpy as np

from .exceptions import InvalidImageError

__all__ = ['RGB_TO_LMS', 'LOGLMS_TO_LAB', 'CLAMP_FLOOR', 'validate_image',
           'srgb_to_lab', 'lab_to_srgb']

# Cone-response matrix of the lαβ transfer method, applied directly to
# gamma-encoded sRGB values.
RGB_TO_LMS = np.array([[0.3811, 0.5783, 0.0402],
                       [0.1967, 0.7244, 0.0782],
                       [0.0241, 0.1288, 0.8444]])

# Principal axes of the log cone responses: achromatic, yellow-blue and
# red-green, each row scaled to unit length.
LOGLMS_TO_LAB = (np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @
                 np.array([[1, 1, 1],
                           [1, 1, -2],
                           [1, -1, 0]]))

LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LAB_TO_LOGLMS = np.linalg.inv(LOGLMS_TO_LAB)

# One quantization step of an 8-bit image; keeps the logarithm finite.
CLAMP_FLOOR = 1 / 255


def validate_image(img, name='image'):
    """
    Check that ``img`` is a finite ``(H, W, 3)`` array with ``H * W >= 1``.

    Parameters
    ----------
    img : array-like
        Image (sRGB or lαβ) to check.
    name : str
        Name used in the error message.

    Returns
    -------
    img : `~numpy.ndarray`
        The input as a float64 array.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise InvalidImageError('{0} must have shape (H, W, 3), got {1}'
                                .format(name, img.shape))
    if img.shape[0] * img.shape[1] < 1:
        raise InvalidImageError('{0} has no pixels'.format(name))
    if not np.all(np.isfinite(img)):
        raise InvalidImageError('{0} contains non-finite values'.format(name))
    return img


def srgb_to_lab(img):
    r"""
    Convert an sRGB image to lαβ.

    Each channel is clamped to :math:`[1/255, 1]`, mapped to cone space,
    compressed with :math:`\log_{10}` and rotated onto the decorrelated
    axes,

    .. math::

        (l, \alpha, \beta)^{\rm T} = {\bf A}\,\log_{10}\left({\bf M}\,
        (R, G, B)^{\rm T}\right).

    Parameters
    ----------
    img : `~numpy.ndarray`
        sRGB image of shape ``(H, W, 3)`` with values in :math:`[0, 1]`.

    Returns
    -------
    lab : `~numpy.ndarray`
        lαβ image of the same shape.
    """
    img = validate_image(img)
    rgb = np.clip(img, CLAMP_FLOOR, 1)
    lms = rgb @ RGB_TO_LMS.T
    return np.log10(lms) @ LOGLMS_TO_LAB.T


def lab_to_srgb(lab):
    """
    Convert an lαβ image back to sRGB.

    This is the algebraic inverse of `srgb_to_lab`, followed by clamping to
    :math:`[0, 1]`.

    Parameters
    ----------
    lab : `~numpy.ndarray`
        lαβ image of shape ``(H, W, 3)``.

    Returns
    -------
    img : `~numpy.ndarray`
        sRGB image with values in :math:`[0, 1]`.
    """
    lab = validate_image(lab, name='lαβ image')
    with np.errstate(over='ignore'):
        lms = 10 ** (lab @ LAB_TO_LOGLMS.T)
        rgb = lms @ LMS_TO_RGB.T
    # very large lαβ values overflow to inf; clamping maps them to white
    rgb = np.nan_to_num(rgb, nan=1.0, posinf=1.0, neginf=0.0)
    return np.clip(rgb, 0, 1)
