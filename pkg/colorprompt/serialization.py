# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Versioned FITS container for lists of named networks (prompter pools and
embedding checkpoints).

The primary header describes the container (kind, format version, grid,
layer sizes, entry count); every weight and bias array is stored in its own
image extension together with a SHA-256 digest of its bytes, so that the
file is self-describing and byte-for-byte reproducible.
"""
import hashlib
import os
import warnings

import numpy as np

from astropy.io import fits
from astropy.utils.exceptions import AstropyUserWarning

from .exceptions import PoolFormatError
from .network import MLP

__all__ = ['CONTAINER_VERSION', 'write_networks', 'read_networks']

CONTAINER_VERSION = 1


def _digest(array):
    return hashlib.sha256(np.ascontiguousarray(array, dtype='>f8')
                          .tobytes()).hexdigest()


def write_networks(path, kind, entries, grid, layer_sizes, meta=None):
    """
    Write networks to a FITS container.

    Parameters
    ----------
    path : str
        Output file, overwritten if present.
    kind : str
        Container kind, e.g. ``'PROMPTER'`` or ``'EMBED'``.
    entries : list of (str, `~colorprompt.MLP`)
        Entry ids (task ids) and their networks.
    grid : tuple of int
        Input pooling grid shared by all entries.
    layer_sizes : list of int
        Architecture shared by all entries.
    meta : dict, optional
        Extra primary header cards (short upper-case keys).
    """
    primary = fits.PrimaryHDU()
    header = primary.header
    header['CPKIND'] = (kind, 'container kind')
    header['CPVERS'] = (CONTAINER_VERSION, 'container format version')
    header['GRIDH'] = (grid[0], 'pooling grid height')
    header['GRIDW'] = (grid[1], 'pooling grid width')
    header['LAYERS'] = (','.join(str(n) for n in layer_sizes), 'layer sizes')
    header['NENTRY'] = (len(entries), 'number of networks')
    for key, value in (meta or {}).items():
        header[key] = value

    hdus = [primary]
    for n, (entry_id, mlp) in enumerate(entries):
        if mlp.layer_sizes != list(layer_sizes):
            raise ValueError('entry {0!r} has layer sizes {1}, expected {2}'
                             .format(entry_id, mlp.layer_sizes, layer_sizes))
        for k, param in enumerate(mlp.parameters()):
            hdu = fits.ImageHDU(np.asarray(param, dtype=np.float64),
                                name='E{0}P{1}'.format(n, k))
            hdu.header['ENTRYID'] = (str(entry_id), 'task id')
            hdu.header['ENTRY'] = n
            hdu.header['PARAM'] = k
            hdu.header['SHA256'] = _digest(param)
            hdus.append(hdu)

    fits.HDUList(hdus).writeto(path, overwrite=True, output_verify='exception')


def read_networks(path, kind):
    """
    Read a container written by `write_networks`.

    Parameters
    ----------
    path : str
        Container file.
    kind : str
        Expected container kind.

    Returns
    -------
    info : dict
        ``grid``, ``layer_sizes`` and the remaining primary header cards.
    entries : list of (str, `~colorprompt.MLP`)
    """
    if not os.path.isfile(path):
        raise PoolFormatError('no such file: {0}'.format(path))
    if os.path.getsize(path) % 2880 != 0:
        raise PoolFormatError('{0} is not a whole number of FITS blocks; '
                              'the file is truncated'.format(path))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('error', AstropyUserWarning)
            with fits.open(path, memmap=False) as hdul:
                header = hdul[0].header
                info = {key: header[key] for key in header
                        if key not in ('SIMPLE', 'BITPIX', 'NAXIS', 'EXTEND')}
                arrays = [(hdu.header['ENTRYID'], hdu.header['ENTRY'],
                           hdu.header['PARAM'], hdu.header['SHA256'],
                           np.array(hdu.data, dtype=np.float64))
                          for hdu in hdul[1:]]
    except PoolFormatError:
        raise
    except (OSError, ValueError, KeyError, TypeError, Warning) as err:
        raise PoolFormatError('cannot read {0}: {1}'.format(path, err))

    if info.get('CPKIND') != kind:
        raise PoolFormatError('{0} holds a {1!r} container, expected {2!r}'
                              .format(path, info.get('CPKIND'), kind))
    if info.get('CPVERS') != CONTAINER_VERSION:
        raise PoolFormatError('{0} has container version {1}, this library '
                              'reads version {2}'.format(
                                  path, info.get('CPVERS'), CONTAINER_VERSION))

    layer_sizes = [int(n) for n in str(info['LAYERS']).split(',') if n]
    n_params = 2 * (len(layer_sizes) - 1)
    n_entries = int(info['NENTRY'])
    if len(arrays) != n_entries * n_params:
        raise PoolFormatError('{0} holds {1} arrays, expected {2}'.format(
            path, len(arrays), n_entries * n_params))

    entries = []
    for n in range(n_entries):
        chunk = arrays[n * n_params:(n + 1) * n_params]
        params = []
        for k, (entry_id, entry, param, digest, data) in enumerate(chunk):
            if entry != n or param != k:
                raise PoolFormatError('{0}: extensions out of order'
                                      .format(path))
            if _digest(data) != digest:
                raise PoolFormatError('{0}: digest mismatch in entry {1!r}'
                                      .format(path, entry_id))
            params.append(data)
        entries.append((chunk[0][0], MLP.from_parameters(params)))
        if entries[-1][1].layer_sizes != layer_sizes:
            raise PoolFormatError('{0}: entry {1!r} does not match the '
                                  'declared architecture'.format(path, n))

    info['grid'] = (int(info['GRIDH']), int(info['GRIDW']))
    info['layer_sizes'] = layer_sizes
    return info, entries
