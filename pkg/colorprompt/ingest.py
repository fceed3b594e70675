# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Dataset loading: raster I/O, directory and manifest loaders, the synthetic
multi-camera generator and the access audit behind the data-free contract.
"""
import os
import re
import warnings

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from astropy import log
from astropy.io import ascii
from astropy.io.ascii import InconsistentTableError
from astropy.table import Table

from .colorspace import validate_image
from .colorstats import ColorStats
from .exceptions import (ConfigError, DataAccessError, ManifestError,
                         UnreadableFileWarning)
from .transfer import transfer_to_stats

__all__ = ['RASTER_EXTENSIONS', 'Sample', 'read_image', 'write_image',
           'parse_market_name', 'market_name', 'load_directory',
           'SynthSpec', 'synth_generate', 'write_samples', 'AccessAudit',
           'TaskDataset', 'split_query_gallery']

RASTER_EXTENSIONS = ('.png', '.ppm', '.jpg', '.jpeg', '.bmp')

MANIFEST_COLUMNS = ['path', 'identity', 'camera']

_MARKET_NAME = re.compile(r'^(-?\d+)_c(\d+)')


class Sample(object):
    """
    One image with its optional identity and camera labels.
    """
    def __init__(self, image, identity=None, camera=None, source=None,
                 split=None):
        """
        Parameters
        ----------
        image : `~numpy.ndarray`
            sRGB image of shape ``(H, W, 3)`` in ``[0, 1]``.
        identity : int, optional
            Identity label.
        camera : int or str, optional
            Camera label.
        source : str, optional
            File path or synthetic tag.
        split : str, optional
            ``'train'`` or ``'eval'``; `None` is treated as ``'train'``.
        """
        self.image = image
        self.identity = identity
        self.camera = camera
        self.source = source
        self.split = split

    def __repr__(self):
        return '<Sample identity={0} camera={1} source={2!r}>'.format(
            self.identity, self.camera, self.source)


def read_image(path):
    """
    Decode an 8-bit raster into an sRGB array in ``[0, 1]`` (``v / 255``).
    """
    with Image.open(path) as raster:
        data = np.asarray(raster.convert('RGB'), dtype=np.float64)
    return data / 255


def write_image(path, img):
    """
    Encode an sRGB array as an 8-bit raster; values are rounded half to
    even. The format follows the file extension (PNG, PPM, ...).
    """
    img = validate_image(img)
    data = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(data, 'RGB').save(path)


def parse_market_name(filename):
    """
    Identity and camera encoded in a ``<id>_c<cam>s<seq>_<frame>_<k>.<ext>``
    file name, or ``(None, None)`` if the name does not follow it.
    """
    match = _MARKET_NAME.match(os.path.basename(filename))
    if match is None:
        return None, None
    return int(match.group(1)), int(match.group(2))


def market_name(identity, camera, index, extension='.png'):
    return '{0:04d}_c{1}s1_{2:06d}_00{3}'.format(identity, camera, index,
                                                 extension)


def _parse_camera(value):
    text = str(value).strip()
    if text == '':
        return None
    return int(text) if text.lstrip('-').isdigit() else text


def _read_manifest(path):
    if not os.path.isfile(path):
        raise ManifestError('no manifest at {0}'.format(path))
    try:
        table = ascii.read(path, format='csv', guess=False, fast_reader=False)
    except InconsistentTableError as err:
        with open(path) as f:
            lines = f.read().splitlines()
        width = len(lines[0].split(',')) if lines else 0
        for lineno, line in enumerate(lines[1:], start=2):
            if line.strip() and len(line.split(',')) != width:
                raise ManifestError('{0}, line {1}: expected {2} fields, got '
                                    '{3}'.format(path, lineno, width,
                                                 len(line.split(','))))
        raise ManifestError('{0}: {1}'.format(path, err))

    if table.colnames != MANIFEST_COLUMNS:
        raise ManifestError('{0}, line 1: header must be {1}, got {2}'.format(
            path, ','.join(MANIFEST_COLUMNS), ','.join(table.colnames)))

    rows = []
    for lineno, row in enumerate(table, start=2):
        masked = [np.ma.is_masked(row[col]) for col in MANIFEST_COLUMNS]
        if masked[0] or str(row['path']).strip() == '':
            raise ManifestError('{0}, line {1}: empty path'.format(path, lineno))
        identity = None
        if not masked[1]:
            try:
                identity = int(str(row['identity']).strip())
            except ValueError:
                raise ManifestError('{0}, line {1}: identity {2!r} is not an '
                                    'integer'.format(path, lineno,
                                                     str(row['identity'])))
        camera = None if masked[2] else _parse_camera(row['camera'])
        rows.append((str(row['path']).strip(), identity, camera))
    return rows


def load_directory(path, naming='market_style', manifest=None):
    """
    Load every decodable raster of a dataset directory.

    Parameters
    ----------
    path : str
        Dataset directory.
    naming : {'market_style', 'manifest'}
        Read the labels from the file names, or from a CSV manifest with the
        header ``path,identity,camera`` (blank fields allowed).
    manifest : str, optional
        Manifest file; default ``<path>/manifest.csv``. Relative image paths
        are resolved against the manifest's directory.

    Returns
    -------
    samples : list of `~colorprompt.Sample`
        In sorted file order (manifest order in manifest mode).

    Raises
    ------
    `~colorprompt.ManifestError`
        On a malformed manifest row, with its line number.
    """
    if naming == 'manifest':
        manifest = os.path.join(path, 'manifest.csv') if manifest is None \
            else manifest
        base = os.path.dirname(os.path.abspath(manifest))
        entries = [(os.path.join(base, p), identity, camera)
                   for p, identity, camera in _read_manifest(manifest)]
    elif naming == 'market_style':
        names = sorted(name for name in os.listdir(path)
                       if name.lower().endswith(RASTER_EXTENSIONS))
        entries = [(os.path.join(path, name),) + parse_market_name(name)
                   for name in names]
    else:
        raise ValueError("naming must be 'market_style' or 'manifest', got "
                         "{0!r}".format(naming))

    samples, skipped = [], 0
    for filename, identity, camera in entries:
        try:
            image = read_image(filename)
        except (OSError, UnidentifiedImageError, ValueError) as err:
            log.debug('skipping {0}: {1}'.format(filename, err))
            skipped += 1
            continue
        samples.append(Sample(image, identity, camera, source=filename))

    if skipped:
        warnings.warn('skipped {0} unreadable file(s) in {1}'.format(
            skipped, path), UnreadableFileWarning)
    log.debug('loaded {0} images from {1}'.format(len(samples), path))
    return samples


class SynthSpec(object):
    """
    Description of a synthetic multi-camera dataset.
    """
    def __init__(self, cameras, n_identities=8, images_per_identity=3,
                 overlap=1.0, eval_identities=0, texture_seed=0, height=64,
                 width=32):
        """
        Parameters
        ----------
        cameras : dict
            Camera id to target lαβ `~colorprompt.ColorStats`.
        n_identities : int
            Identities of the training split.
        images_per_identity : int
            Images of every identity in every camera it is seen by.
        overlap : float
            Fraction of the cameras that see each identity (at least one).
        eval_identities : int
            Extra identities forming the held-out ``'eval'`` split.
        texture_seed : int
            Seed of the camera scenes and identity appearances.
        height, width : int
            Image size.
        """
        if len(cameras) < 1:
            raise ConfigError('a synthetic dataset needs at least one camera')
        if n_identities < 1 or images_per_identity < 1 or eval_identities < 0:
            raise ConfigError('identity and image counts must be positive')
        if not 0 < overlap <= 1:
            raise ConfigError('overlap must lie in (0, 1], got {0}'
                              .format(overlap))
        if height < 4 or width < 4:
            raise ConfigError('images must be at least 4x4 pixels')
        self.cameras = dict(cameras)
        self.n_identities = int(n_identities)
        self.images_per_identity = int(images_per_identity)
        self.overlap = float(overlap)
        self.eval_identities = int(eval_identities)
        self.texture_seed = int(texture_seed)
        self.height = int(height)
        self.width = int(width)

    @classmethod
    def from_config(cls, section):
        """
        Build a spec from a configobj section whose ``cameras`` subsection
        maps every camera id to six numbers: the lαβ means followed by the
        lαβ standard deviations.
        """
        try:
            cameras = {}
            for key in section['cameras'].scalars:
                values = [float(v) for v in section['cameras'].as_list(key)]
                if len(values) != 6:
                    raise ConfigError('camera {0} needs 3 means and 3 '
                                      'standard deviations, got {1} values'
                                      .format(key, len(values)))
                cameras[_parse_camera(key)] = ColorStats.from_vector(values)

            def get(key, default, convert):
                return convert(key) if key in section else default

            return cls(cameras,
                       n_identities=get('n_identities', 8, section.as_int),
                       images_per_identity=get('images_per_identity', 3,
                                               section.as_int),
                       overlap=get('overlap', 1.0, section.as_float),
                       eval_identities=get('eval_identities', 0, section.as_int),
                       texture_seed=get('texture_seed', 0, section.as_int),
                       height=get('height', 64, section.as_int),
                       width=get('width', 32, section.as_int))
        except ConfigError:
            raise
        except (KeyError, ValueError, TypeError) as err:
            raise ConfigError('invalid synthetic dataset section: {0}'
                              .format(err))

    @property
    def camera_ids(self):
        return sorted(self.cameras, key=str)

    def cameras_of(self, identity):
        """
        Cameras that see ``identity``: a run of consecutive cameras.
        """
        ids = self.camera_ids
        n = max(1, int(round(self.overlap * len(ids))))
        return [ids[(identity + k) % len(ids)] for k in range(n)]

    def __repr__(self):
        return ('<SynthSpec cameras={0} identities={1}+{2} images={3} '
                'size={4}x{5}>'.format(self.camera_ids, self.n_identities,
                                       self.eval_identities,
                                       self.images_per_identity, self.height,
                                       self.width))


def _smooth_noise(rng, shape, cells):
    coarse = rng.random((cells[0], cells[1], 3))
    zoom = (shape[0] / cells[0], shape[1] / cells[1], 1)
    field = ndimage.zoom(coarse, zoom, order=1, mode='nearest')
    return field[:shape[0], :shape[1]]


def _identity_look(texture_seed, identity, shape):
    rng = np.random.default_rng([texture_seed, 2, identity])
    upper, lower = rng.uniform(0.1, 0.9, size=(2, 3))
    texture = 0.15 * (_smooth_noise(rng, shape, (8, 4)) - 0.5)
    split = shape[0] // 2
    look = np.empty(shape + (3,))
    look[:split] = upper
    look[split:] = lower
    return look + texture


def synth_generate(spec, seed):
    """
    Render a synthetic multi-camera dataset.

    Every camera has its own smooth background scene; every identity a
    two-tone textured figure in the central region. Each rendered image is
    then moved to its camera's target lαβ statistics.

    Parameters
    ----------
    spec : `~colorprompt.SynthSpec`
    seed : int
        Seed of the per-image placement and noise.

    Returns
    -------
    samples : list of `~colorprompt.Sample`
        Ordered by identity, camera and image index; identities below
        ``spec.n_identities`` form the ``'train'`` split, the others the
        ``'eval'`` split.
    """
    height, width = spec.height, spec.width
    fig_h, fig_w = (3 * height) // 4, width // 2
    scenes = {}
    for n, camera in enumerate(spec.camera_ids):
        scene_rng = np.random.default_rng([spec.texture_seed, 1, n])
        scenes[camera] = 0.2 + 0.6 * _smooth_noise(scene_rng, (height, width),
                                                   (4, 2))

    rng = np.random.default_rng(seed)
    samples = []
    for identity in range(spec.n_identities + spec.eval_identities):
        look = _identity_look(spec.texture_seed, identity, (fig_h, fig_w))
        split = 'train' if identity < spec.n_identities else 'eval'
        for camera in spec.cameras_of(identity):
            for k in range(spec.images_per_identity):
                img = scenes[camera].copy()
                dy, dx = rng.integers(-2, 3, size=2)
                top = min(max((height - fig_h) // 2 + dy, 0), height - fig_h)
                left = min(max((width - fig_w) // 2 + dx, 0), width - fig_w)
                img[top:top + fig_h, left:left + fig_w] = look
                img = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
                img = transfer_to_stats(img, None, spec.cameras[camera])
                tag = 'synth:{0}:{1}:{2}:{3}'.format(seed, identity, camera, k)
                samples.append(Sample(img, identity, camera, tag, split))
    log.debug('generated {0} synthetic images'.format(len(samples)))
    return samples


def write_samples(samples, directory, extension='.png'):
    """
    Write labeled samples with market-style file names.

    Returns
    -------
    paths : list of str
    """
    os.makedirs(directory, exist_ok=True)
    counters, paths = {}, []
    for sample in samples:
        key = (sample.identity, sample.camera)
        index = counters.get(key, 0)
        counters[key] = index + 1
        path = os.path.join(directory, market_name(sample.identity,
                                                   sample.camera, index,
                                                   extension))
        write_image(path, sample.image)
        paths.append(path)
    return paths


class AccessAudit(object):
    """
    Log of every pixel read, attributed to the task that owns the data and
    to the task that was active when it was read.
    """
    def __init__(self, enforce=False):
        """
        Parameters
        ----------
        enforce : bool
            Raise `~colorprompt.DataAccessError` on a violating read
            instead of only recording it.
        """
        self.enforce = enforce
        self.active_task = None
        self.completed = []
        self.records = []
        self._flags = []

    def begin_task(self, task_id):
        self.active_task = task_id

    def end_task(self, task_id):
        self.completed.append(task_id)
        self.active_task = None

    def _violates(self, owner, active):
        return active is not None and owner != active and \
            owner in self.completed

    def record(self, owner, split, purpose, count):
        """
        Register a read of ``count`` images of task ``owner``.
        """
        active = self.active_task
        violating = self._violates(owner, active)
        if violating:
            message = ('task {0!r} read {1} image(s) of completed task {2!r}'
                       .format(active, count, owner))
            if self.enforce:
                raise DataAccessError(message)
            log.warning(message)
        log.debug('audit: {0} image(s) of {1}/{2} read for {3} during {4}'
                  .format(count, owner, split, purpose, active))
        self.records.append((owner, split, active, purpose, int(count)))
        self._flags.append(violating)

    def violations(self):
        """
        Reads of a completed task's images made while a later task was
        running.
        """
        return [rec for rec, flag in zip(self.records, self._flags) if flag]

    def to_table(self):
        """
        Read counts aggregated per owner, split, active task and purpose.
        """
        totals = {}
        for owner, split, active, purpose, count in self.records:
            key = (str(owner), str(split), str(active), purpose)
            totals[key] = totals.get(key, 0) + count
        table = Table(names=['owner_task', 'split', 'active_task', 'purpose',
                             'count'],
                      dtype=[str, str, str, str, int])
        for key, count in totals.items():
            table.add_row(list(key) + [count])
        return table


class TaskDataset(object):
    """
    The samples of one task, handed out only through audited reads.
    """
    def __init__(self, samples, task_id, audit=None, split=None):
        self._samples = list(samples)
        self.task_id = task_id
        self.audit = audit
        self.split = split

    def __len__(self):
        return len(self._samples)

    @property
    def identities(self):
        return [s.identity for s in self._samples]

    @property
    def cameras(self):
        return [s.camera for s in self._samples]

    @property
    def labeled(self):
        return all(s.identity is not None for s in self._samples)

    def subset(self, split):
        """
        The samples of one split (unsplit samples count as ``'train'``).
        """
        chosen = [s for s in self._samples if (s.split or 'train') == split]
        return TaskDataset(chosen, self.task_id, self.audit, split)

    def images(self, indices=None, purpose='train'):
        """
        Pixel data of the selected samples, recorded in the audit.
        """
        if indices is None:
            indices = range(len(self._samples))
        indices = list(indices)
        if self.audit is not None:
            self.audit.record(self.task_id, self.split or 'train', purpose,
                              len(indices))
        return [self._samples[i].image for i in indices]

    def samples(self, indices, purpose='eval'):
        chosen = [self._samples[i] for i in indices]
        if self.audit is not None:
            self.audit.record(self.task_id, self.split or 'train', purpose,
                              len(chosen))
        return chosen


def split_query_gallery(identities, cameras):
    """
    Evaluation protocol split: the first image of every (identity, camera)
    pair is a query, all other images form the gallery.

    Returns
    -------
    query, gallery : list of int
        Sample indices.
    """
    seen, query, gallery = set(), [], []
    for i, key in enumerate(zip(identities, cameras)):
        if key in seen:
            gallery.append(i)
        else:
            seen.add(key)
            query.append(i)
    return query, gallery
