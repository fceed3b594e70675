# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
The data-free continual adaptation loop: a supervised source task followed
by unsupervised adaptation tasks, with rehearsal through transferred twins
guided by the prompter pool (or one of the comparison sources).
"""
import json
import os
import time

import numpy as np

from astropy import log
from astropy.extern.configobj.configobj import ConfigObj, ConfigObjError
from astropy.table import Table

from . import conf
from .augment import GeometricAugment, color_shuffle
from .colorspace import srgb_to_lab
from .colorstats import camera_summary, camera_summary_to_json, image_stats
from .exceptions import ConfigError, EmptySelectionError, NoClustersError
from .ingest import (SynthSpec, TaskDataset, load_directory,
                     split_query_gallery, synth_generate, AccessAudit)
from .memory import (EmbedNet, OUTLIER, PseudoLabeling, adaptive_pseudo_labels,
                     embed_save, embed_train_step, init_memory_from_clusters,
                     retrieval_metrics)
from .prompter import (PrompterNet, PrompterPool, pool_save,
                       prompter_recover_batch, prompter_train_step)
from .transfer import object_agnostic_transfer, transfer_to_stats

__all__ = ['REHEARSAL_MODES', 'DataSource', 'TaskConfig', 'TaskStream',
           'RunReport', 'ReservoirBuffer', 'PrompterRehearsal',
           'SummaryRehearsal', 'ReplayRehearsal', 'NoRehearsal',
           'make_rehearsal', 'run_source_task', 'run_adaptation_task',
           'few_shot_style_adapt', 'evaluate_dataset', 'run_stream']

REHEARSAL_MODES = ('prompter', 'camera_summary', 'replay', 'none')


class DataSource(object):
    """
    Where the images of a task (or of an unseen evaluation set) come from:
    a dataset directory or a synthetic dataset description.
    """
    def __init__(self, path=None, synth=None, naming='market_style',
                 manifest=None, eval_path=None, seed=None):
        """
        Parameters
        ----------
        path : str, optional
            Dataset directory.
        synth : `~colorprompt.SynthSpec`, optional
            Synthetic dataset used instead of a directory.
        naming : {'market_style', 'manifest'}
            Label source of directory datasets.
        manifest : str, optional
            Manifest file for ``naming='manifest'``.
        eval_path : str, optional
            Directory holding the evaluation split of a directory dataset.
        seed : int, optional
            Seed of the synthetic generator; defaults to the one handed to
            `load`.
        """
        if (path is None) == (synth is None):
            raise ConfigError('a data source needs exactly one of a path and '
                              'a synthetic spec')
        self.path = path
        self.synth = synth
        self.naming = naming
        self.manifest = manifest
        self.eval_path = eval_path
        self.seed = seed

    @classmethod
    def from_config(cls, section, base_dir='.'):
        def resolve(key):
            if key not in section or section[key] in ('', None):
                return None
            return os.path.join(base_dir, section[key])

        synth = (SynthSpec.from_config(section['synth'])
                 if 'synth' in section.sections else None)
        return cls(path=resolve('path'), synth=synth,
                   naming=section.get('naming', 'market_style'),
                   manifest=resolve('manifest'),
                   eval_path=resolve('eval_path'),
                   seed=section.as_int('data_seed')
                   if 'data_seed' in section else None)

    def load(self, owner, audit=None, seed=0):
        """
        Read the samples into an audited `~colorprompt.TaskDataset`.
        """
        if self.synth is not None:
            samples = synth_generate(self.synth,
                                     seed if self.seed is None else self.seed)
        else:
            samples = load_directory(self.path, self.naming, self.manifest)
            if self.eval_path is not None:
                for sample in load_directory(self.eval_path, self.naming):
                    sample.split = 'eval'
                    samples.append(sample)
        return TaskDataset(samples, owner, audit)

    def __repr__(self):
        return '<DataSource {0}>'.format(self.synth if self.synth is not None
                                         else self.path)


class TaskConfig(object):
    """
    Settings of one task of a continual stream.
    """
    def __init__(self, task_id, data=None, supervised=False, epochs=1,
                 batch_size=16, shuffle_pretrain=True, resample=True,
                 object_agnostic=False, lam=None, lr=None, prompter_lr=None,
                 geometric=None, eps=None, min_samples=None,
                 crop_fraction=None):
        """
        Parameters
        ----------
        task_id : str
            Unique task name.
        data : `DataSource`, optional
            Images of the task.
        supervised : bool
            Train with ground-truth identities (first task only).
        epochs : int
            Passes over the task data.
        batch_size : int
            Images per optimization step.
        shuffle_pretrain : bool
            Add Color Shuffling twins on the supervised task.
        resample : bool
            Train the task's prompter with Color Re-sampling.
        object_agnostic : bool
            Use frame statistics as the transfer source.
        lam : float, optional
            Twin weight of the combined objective, default ``conf.lam``.
        lr : float, optional
            Embedding learning rate, default ``conf.source_lr`` on the
            supervised task and ``conf.embed_lr`` otherwise.
        prompter_lr : float, optional
            Prompter learning rate, default ``conf.prompter_lr``.
        geometric : `~colorprompt.GeometricAugment`, optional
            Geometric augmentation shared by an image and its twin.
        eps, min_samples : optional
            Pseudo-label clustering parameters.
        crop_fraction : float, optional
            Frame crop of object-agnostic transfer.
        """
        self.task_id = str(task_id)
        self.data = data
        self.supervised = bool(supervised)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.shuffle_pretrain = bool(shuffle_pretrain)
        self.resample = bool(resample)
        self.object_agnostic = bool(object_agnostic)
        self.lam = conf.lam if lam is None else float(lam)
        self.lr = lr
        self.prompter_lr = prompter_lr
        self.geometric = GeometricAugment(flip=False) if geometric is None \
            else geometric
        self.eps = conf.dbscan_eps if eps is None else float(eps)
        self.min_samples = conf.dbscan_min_samples if min_samples is None \
            else int(min_samples)
        self.crop_fraction = crop_fraction

        if not 0 <= self.lam <= 1:
            raise ConfigError('task {0}: lam must lie in [0, 1], got {1}'
                              .format(self.task_id, self.lam))
        if self.epochs < 1:
            raise ConfigError('task {0}: epochs must be at least 1'
                              .format(self.task_id))
        if self.batch_size < 1:
            raise ConfigError('task {0}: batch_size must be at least 1'
                              .format(self.task_id))

    @property
    def embed_lr(self):
        if self.lr is not None:
            return self.lr
        return conf.source_lr if self.supervised else conf.embed_lr

    @classmethod
    def from_config(cls, task_id, section, defaults=None, base_dir='.'):
        """
        Build a task from its configobj section, falling back on a
        ``[defaults]`` section.
        """
        merged = ConfigObj()
        for source in (defaults, section):
            if source is not None:
                merged.merge({key: source[key] for key in source.scalars})

        def get(key, convert, fallback=None):
            if key not in merged:
                return fallback
            try:
                return getattr(merged, convert)(key)
            except (TypeError, ValueError):
                raise ConfigError('task {0}: invalid value {1!r} for {2}'
                                  .format(task_id, merged[key], key))

        data = DataSource.from_config(section, base_dir) \
            if ('path' in section or 'synth' in section.sections) else None
        geometric = GeometricAugment(
            flip=get('flip', 'as_bool', False),
            crop_padding=get('crop_padding', 'as_int', 0),
            erase_probability=get('erase_probability', 'as_float', 0.0))
        return cls(task_id, data,
                   supervised=get('supervised', 'as_bool', False),
                   epochs=get('epochs', 'as_int', 1),
                   batch_size=get('batch_size', 'as_int', 16),
                   shuffle_pretrain=get('shuffle_pretrain', 'as_bool', True),
                   resample=get('resample', 'as_bool', True),
                   object_agnostic=get('object_agnostic', 'as_bool', False),
                   lam=get('lam', 'as_float'), lr=get('lr', 'as_float'),
                   prompter_lr=get('prompter_lr', 'as_float'),
                   geometric=geometric, eps=get('eps', 'as_float'),
                   min_samples=get('min_samples', 'as_int'),
                   crop_fraction=get('crop_fraction', 'as_float'))

    def __repr__(self):
        return ('<TaskConfig {0} supervised={1} epochs={2} batch={3} lam={4}>'
                .format(self.task_id, self.supervised, self.epochs,
                        self.batch_size, self.lam))


class TaskStream(object):
    """
    Ordered tasks of a continual run with its seed and output directory.
    """
    def __init__(self, tasks, seed=0, output='colorprompt_run',
                 rehearsal='prompter', unseen=None, enforce_audit=False,
                 replay_capacity=None, summary_by_camera=True):
        ids = [task.task_id for task in tasks]
        if len(ids) == 0:
            raise ConfigError('a stream needs at least one task')
        if len(set(ids)) != len(ids):
            raise ConfigError('task ids must be unique, got {0}'.format(ids))
        if rehearsal not in REHEARSAL_MODES:
            raise ConfigError('rehearsal must be one of {0}, got {1!r}'.format(
                ', '.join(REHEARSAL_MODES), rehearsal))
        self.tasks = list(tasks)
        self.seed = int(seed)
        self.output = output
        self.rehearsal = rehearsal
        self.unseen = dict(unseen or {})
        self.enforce_audit = bool(enforce_audit)
        self.replay_capacity = conf.replay_capacity if replay_capacity is None \
            else int(replay_capacity)
        self.summary_by_camera = bool(summary_by_camera)

    @property
    def task_ids(self):
        return [task.task_id for task in self.tasks]

    @classmethod
    def read(cls, path, output=None, seed=None, rehearsal=None):
        """
        Read a stream configuration file.

        The top level holds ``seed``, ``output``, ``rehearsal``,
        ``enforce_audit``, ``replay_capacity`` and ``summary_by_camera``;
        ``[defaults]`` holds task
        settings shared by every ``[tasks]`` subsection; ``[unseen]`` lists
        held-out evaluation sets. Relative paths are resolved against the
        file's directory. Keyword arguments override the file.
        """
        try:
            cfg = ConfigObj(path, file_error=True)
        except (OSError, ConfigObjError) as err:
            raise ConfigError('cannot read stream config {0}: {1}'
                              .format(path, err))
        base_dir = os.path.dirname(os.path.abspath(path))
        if 'tasks' not in cfg.sections:
            raise ConfigError('{0} has no [tasks] section'.format(path))
        defaults = cfg['defaults'] if 'defaults' in cfg.sections else None
        tasks = [TaskConfig.from_config(name, cfg['tasks'][name], defaults,
                                        base_dir)
                 for name in cfg['tasks'].sections]
        for task in tasks:
            if task.data is None:
                raise ConfigError('task {0} has neither a path nor a [synth] '
                                  'section'.format(task.task_id))
        unseen = {}
        if 'unseen' in cfg.sections:
            for name in cfg['unseen'].sections:
                unseen[name] = DataSource.from_config(cfg['unseen'][name],
                                                      base_dir)
        try:
            return cls(tasks,
                       seed=int(cfg.get('seed', 0)) if seed is None else seed,
                       output=(os.path.join(base_dir, cfg.get(
                           'output', 'colorprompt_run'))
                           if output is None else output),
                       rehearsal=(cfg.get('rehearsal', 'prompter')
                                  if rehearsal is None else rehearsal),
                       unseen=unseen,
                       enforce_audit=(cfg.as_bool('enforce_audit')
                                      if 'enforce_audit' in cfg else False),
                       replay_capacity=(cfg.as_int('replay_capacity')
                                        if 'replay_capacity' in cfg else None),
                       summary_by_camera=(cfg.as_bool('summary_by_camera')
                                          if 'summary_by_camera' in cfg
                                          else True))
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError('{0}: {1}'.format(path, err))

    def __repr__(self):
        return '<TaskStream tasks={0} seed={1} rehearsal={2}>'.format(
            self.task_ids, self.seed, self.rehearsal)


class RunReport(object):
    """
    Losses, clustering diagnostics, evaluation matrix and pool manifest of
    a continual run.
    """
    def __init__(self, task_ids=None, unseen=None, seed=0, rehearsal='none'):
        self.task_ids = list(task_ids or [])
        self.unseen = list(unseen or [])
        self.seed = seed
        self.rehearsal = rehearsal
        self.losses = Table(names=['task', 'epoch', 'batch', 'loss',
                                   'original_term', 'twin_term',
                                   'prompter_loss'],
                            dtype=[str, int, int, float, float, float, float])
        self.epochs = Table(names=['task', 'epoch', 'clusters', 'outliers',
                                   'eps', 'guide'],
                            dtype=[str, int, int, int, float, str])
        self.evaluation = Table(names=['trained_task', 'dataset', 'mAP',
                                       'rank1'],
                                dtype=[str, str, float, float])
        self.pool = []
        self.audit = None
        self.status = 'running'

    def add_loss(self, task, epoch, batch, result, prompter_loss):
        self.losses.add_row([task, epoch, batch, result['loss'],
                             result['original_term'], result['twin_term'],
                             np.nan if prompter_loss is None
                             else prompter_loss])

    def add_epoch(self, task, epoch, labeling, guide):
        self.epochs.add_row([task, epoch, labeling.n_clusters,
                             labeling.n_outliers,
                             np.nan if labeling.eps is None else labeling.eps,
                             guide or ''])

    def add_evaluation(self, trained_task, dataset, mAP, rank1):
        self.evaluation.add_row([trained_task, dataset, mAP, rank1])

    def metric(self, trained_task, dataset, name='rank1'):
        for row in self.evaluation:
            if row['trained_task'] == trained_task and row['dataset'] == dataset:
                return float(row[name])
        raise KeyError('no evaluation of {0} after {1}'.format(dataset,
                                                               trained_task))

    def matrix(self, name='rank1'):
        """
        Evaluation matrix, rows are checkpoints (after each task) and columns
        the tasks followed by the unseen sets; missing entries are `nan`.
        """
        columns = self.task_ids + self.unseen
        values = np.full((len(self.task_ids), len(columns)), np.nan)
        for row in self.evaluation:
            if row['trained_task'] in self.task_ids:
                values[self.task_ids.index(row['trained_task']),
                       columns.index(row['dataset'])] = row[name]
        return values

    def summary(self):
        final = {}
        if len(self.evaluation):
            last = self.evaluation['trained_task'][-1]
            for row in self.evaluation[self.evaluation['trained_task'] == last]:
                final[str(row['dataset'])] = {'mAP': float(row['mAP']),
                                              'rank1': float(row['rank1'])}
        return {
            'seed': self.seed,
            'rehearsal': self.rehearsal,
            'tasks': self.task_ids,
            'unseen': self.unseen,
            'status': self.status,
            'pool': self.pool,
            'final': final,
            'audit_violations': (len(self.audit.violations())
                                 if self.audit is not None else 0),
        }

    def write(self, directory):
        """
        Write ``losses.csv``, ``epochs.csv``, ``evaluation.csv``,
        ``audit.csv`` and ``summary.json`` to ``directory``.
        """
        os.makedirs(directory, exist_ok=True)
        self.losses.write(os.path.join(directory, 'losses.csv'),
                          format='ascii.csv', overwrite=True)
        self.epochs.write(os.path.join(directory, 'epochs.csv'),
                          format='ascii.csv', overwrite=True)
        self.evaluation.write(os.path.join(directory, 'evaluation.csv'),
                              format='ascii.csv', overwrite=True)
        if self.audit is not None:
            self.audit.to_table().write(os.path.join(directory, 'audit.csv'),
                                        format='ascii.csv', overwrite=True)
        with open(os.path.join(directory, 'summary.json'), 'w') as f:
            f.write(json.dumps(self.summary(), indent=2, sort_keys=True) + '\n')

    def __repr__(self):
        return '<RunReport tasks={0} status={1}>'.format(self.task_ids,
                                                         self.status)


class ReservoirBuffer(object):
    """
    Fixed-capacity uniform sample of every item offered so far.
    """
    def __init__(self, capacity, rng):
        if capacity < 0:
            raise ValueError('capacity must be non-negative')
        self.capacity = int(capacity)
        self.rng = rng
        self.items = []
        self.seen = 0

    def offer(self, item):
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append(item)
            return
        j = int(self.rng.integers(self.seen))
        if j < self.capacity:
            self.items[j] = item

    def __len__(self):
        return len(self.items)


class _Rehearsal(object):
    name = None
    object_agnostic = False
    crop_fraction = None

    def select(self, rng, cfg=None):
        """
        Guidance for one epoch: ``(label, twin_fn)`` where ``twin_fn(images,
        rng)`` returns transferred twins, or `None` when there is nothing to
        rehearse. The transfer settings of ``cfg``, the current task, take
        precedence over the ones given at construction.
        """
        return None

    def _transfer_settings(self, cfg):
        if cfg is None:
            return self.object_agnostic, self.crop_fraction
        return cfg.object_agnostic, cfg.crop_fraction

    def replay_images(self):
        return []

    def complete_task(self, task_id, prompter, dataset):
        pass

    def save(self, directory):
        pass


class NoRehearsal(_Rehearsal):
    """
    Baseline: adaptation on the current task alone.
    """
    name = 'none'


class PrompterRehearsal(_Rehearsal):
    """
    Transferred twins guided by a prompter drawn from the pool each epoch.
    """
    name = 'prompter'

    def __init__(self, pool=None, object_agnostic=False, crop_fraction=None):
        self.pool = PrompterPool() if pool is None else pool
        self.object_agnostic = object_agnostic
        self.crop_fraction = crop_fraction

    def select(self, rng, cfg=None):
        if len(self.pool) == 0:
            raise EmptySelectionError('the prompter pool is empty')
        task_id, net = self.pool.draw(rng)
        object_agnostic, crop_fraction = self._transfer_settings(cfg)

        def twins(images, rng):
            return prompter_recover_batch(net, images, object_agnostic,
                                          crop_fraction)
        return task_id, twins

    def complete_task(self, task_id, prompter, dataset):
        if prompter is None:
            raise ConfigError('task {0} trained no prompter; prompter '
                              'rehearsal needs resample enabled'
                              .format(task_id))
        self.pool.append(task_id, prompter)

    def save(self, directory):
        pool_save(self.pool, os.path.join(directory, 'pool.fits'))


class SummaryRehearsal(_Rehearsal):
    """
    Camera Summary guidance: per epoch one completed task is drawn, per
    image one of its cameras. With ``by_camera=False`` camera labels are
    ignored and every task has a single pooled summary.
    """
    name = 'camera_summary'

    def __init__(self, object_agnostic=False, crop_fraction=None,
                 by_camera=True):
        self.summaries = []
        self.object_agnostic = object_agnostic
        self.crop_fraction = crop_fraction
        self.by_camera = by_camera

    def select(self, rng, cfg=None):
        if len(self.summaries) == 0:
            raise EmptySelectionError('no camera summary to draw from')
        task_id, summary = self.summaries[int(rng.integers(len(self.summaries)))]
        object_agnostic, crop_fraction = self._transfer_settings(cfg)

        def twins(images, rng):
            picks = rng.integers(len(summary), size=len(images))
            if object_agnostic:
                return [object_agnostic_transfer(img, summary[k].stats,
                                                 crop_fraction)
                        for img, k in zip(images, picks)]
            return [transfer_to_stats(img, None, summary[k].stats)
                    for img, k in zip(images, picks)]
        return task_id, twins

    def complete_task(self, task_id, prompter, dataset):
        images = dataset.images(purpose='summary')
        cameras = (dataset.cameras if self.by_camera
                   else [None] * len(images))
        self.summaries.append((task_id, camera_summary(
            [(srgb_to_lab(img), cam) for img, cam in zip(images, cameras)])))

    def save(self, directory):
        for task_id, summary in self.summaries:
            camera_summary_to_json(summary, os.path.join(
                directory, 'camera_summary_{0}.json'.format(task_id)))


class ReplayRehearsal(_Rehearsal):
    """
    Comparison mode storing real images in a reservoir buffer.
    """
    name = 'replay'

    def __init__(self, capacity, rng):
        self.buffer = ReservoirBuffer(capacity, rng)

    def replay_images(self):
        return list(self.buffer.items)

    def complete_task(self, task_id, prompter, dataset):
        for img in dataset.images(purpose='buffer'):
            self.buffer.offer(img)


def make_rehearsal(mode, object_agnostic=False, crop_fraction=None,
                   capacity=None, rng=None, by_camera=True):
    """
    Rehearsal source for one of `REHEARSAL_MODES`.
    """
    if mode == 'prompter':
        return PrompterRehearsal(None, object_agnostic, crop_fraction)
    if mode == 'camera_summary':
        return SummaryRehearsal(object_agnostic, crop_fraction, by_camera)
    if mode == 'replay':
        return ReplayRehearsal(conf.replay_capacity if capacity is None
                               else capacity,
                               np.random.default_rng(0) if rng is None else rng)
    if mode == 'none':
        return NoRehearsal()
    raise ConfigError('unknown rehearsal mode {0!r}'.format(mode))


def _streams(rng):
    # independent generators so that switching one feature on or off leaves
    # every other draw sequence unchanged
    names = ['init', 'batch', 'twin', 'prompter', 'augment']
    seeds = rng.integers(2 ** 63, size=len(names))
    return {name: np.random.default_rng(int(s)) for name, s in zip(names, seeds)}


def _train_epoch(embed, memory, prompter, images, labels, indices, cfg,
                 streams, twin_fn, report, epoch):
    """
    One pass over ``indices`` in a random order. ``twin_fn(batch, rng)``
    returns ``(twins, twin_index)`` or `None`.
    """
    order = streams['batch'].permutation(np.asarray(indices, dtype=int))
    timing = {'guidance': 0.0, 'training': 0.0}
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        batch = [images[i] for i in idx]
        batch_labels = labels[idx]

        tic = time.perf_counter()
        twins, twin_index = None, None
        if twin_fn is not None and cfg.lam > 0:
            produced = twin_fn(batch, streams['twin'])
            if produced is not None:
                twins, twin_index = produced
        timing['guidance'] += time.perf_counter() - tic

        tic = time.perf_counter()
        if cfg.geometric.enabled:
            params = [cfg.geometric.draw(streams['augment'], img.shape)
                      for img in batch]
            batch = [cfg.geometric.apply(img, p) for img, p in zip(batch, params)]
            if twins is not None:
                twins = [cfg.geometric.apply(img, params[i])
                         for img, i in zip(twins, twin_index)]
        embed, memory, result = embed_train_step(
            embed, memory, batch, batch_labels, lr=cfg.embed_lr, twins=twins,
            twin_index=twin_index, lam=cfg.lam)

        prompter_loss = None
        if prompter is not None:
            prompter, prompter_loss = prompter_train_step(
                prompter, [images[i] for i in idx], streams['prompter'],
                cfg.prompter_lr)
        timing['training'] += time.perf_counter() - tic

        log.debug('{0} epoch {1} batch {2}: loss {3:.5f}'.format(
            cfg.task_id, epoch, b, result['loss']))
        if report is not None:
            report.add_loss(cfg.task_id, epoch, b, result, prompter_loss)
    return embed, memory, prompter, timing


def _class_labels(identities):
    _, labels = np.unique(np.asarray(identities), return_inverse=True)
    return labels


def _supervised_epochs(embed, prompter, images, identities, cfg, streams,
                       twin_fn, report):
    labels = _class_labels(identities)
    labeling = PseudoLabeling(labels)
    totals = {'guidance': 0.0, 'training': 0.0}
    for epoch in range(cfg.epochs):
        memory = init_memory_from_clusters(embed.embed(images), labeling)
        if report is not None:
            report.add_epoch(cfg.task_id, epoch, labeling, None)
        embed, memory, prompter, timing = _train_epoch(
            embed, memory, prompter, images, labels, np.arange(len(images)),
            cfg, streams, twin_fn, report, epoch)
        for key in totals:
            totals[key] += timing[key]
    return embed, prompter, totals


def _load(cfg, dataset):
    if dataset is not None:
        return dataset
    if cfg.data is None:
        raise ConfigError('task {0} has no data source'.format(cfg.task_id))
    return cfg.data.load(cfg.task_id).subset('train')


def _log_timing(task_id, totals):
    log.info('{0}: {1:.2f} s guidance and transfer, {2:.2f} s training'
             .format(task_id, totals['guidance'], totals['training']))


def run_source_task(cfg, rng, dataset=None, report=None):
    """
    Supervised training on the first task.

    The embedding model is trained with the contrastive loss over the
    ground-truth identities, the memory being re-initialized with the class
    means every epoch. With ``shuffle_pretrain`` every batch is paired with
    Color Shuffling twins. The task's prompter is trained on the same
    batches.

    Parameters
    ----------
    cfg : `TaskConfig`
    rng : `~numpy.random.Generator`
        Seeded generator; every random stream of the task derives from it.
    dataset : `~colorprompt.TaskDataset`, optional
        Training images; default is the task's own data source.
    report : `RunReport`, optional
        Receives the loss rows.

    Returns
    -------
    embed : `~colorprompt.EmbedNet`
    prompter : `~colorprompt.PrompterNet` or `None`
        `None` when ``cfg.resample`` is off.
    """
    dataset = _load(cfg, dataset)
    if len(dataset) == 0:
        raise EmptySelectionError('task {0} has no images'.format(cfg.task_id))
    if not dataset.labeled:
        raise ConfigError('task {0} is supervised but has unlabeled images'
                          .format(cfg.task_id))
    streams = _streams(rng)
    embed = EmbedNet.initialize(streams['init'])
    prompter = PrompterNet.initialize(streams['init']) if cfg.resample else None
    images = dataset.images(purpose='train')

    twin_fn = None
    if cfg.shuffle_pretrain:
        def twin_fn(batch, rng):
            if len(batch) < 2:
                return None
            return color_shuffle(batch, rng), np.arange(len(batch))

    embed, prompter, totals = _supervised_epochs(
        embed, prompter, images, dataset.identities, cfg, streams, twin_fn,
        report)
    _log_timing(cfg.task_id, totals)
    return embed, prompter


def _cluster(features, cfg):
    try:
        return adaptive_pseudo_labels(features, cfg.eps, cfg.min_samples)
    except NoClustersError as err:
        raise NoClustersError('task {0}: {1}'.format(cfg.task_id, err))


def run_adaptation_task(model, pool, cfg, rng, dataset=None, report=None):
    """
    Unsupervised adaptation to a new task with rehearsal.

    Every epoch the task images are clustered into pseudo-identities and the
    memory is re-initialized with the cluster means; one guidance source
    (a prompter of a previous task) is drawn for the whole epoch and every
    batch is paired with its transferred twins. Twins share the
    pseudo-label of their original and also update the memory.

    Parameters
    ----------
    model : `~colorprompt.EmbedNet`
        Model after the previous task; left untouched.
    pool : `~colorprompt.PrompterPool` or rehearsal source
        Prompters of the previous tasks, or any rehearsal source built by
        `make_rehearsal`.
    cfg : `TaskConfig`
    rng : `~numpy.random.Generator`
    dataset : `~colorprompt.TaskDataset`, optional
        Training images; default is the task's own data source.
    report : `RunReport`, optional

    Returns
    -------
    model : `~colorprompt.EmbedNet`
    prompter : `~colorprompt.PrompterNet` or `None`
        This task's prompter, to be appended to the pool by the caller.
    """
    rehearsal = pool
    if isinstance(pool, PrompterPool):
        if len(pool) == 0:
            raise EmptySelectionError('adaptation needs a non-empty prompter '
                                      'pool')
        rehearsal = PrompterRehearsal(pool, cfg.object_agnostic,
                                      cfg.crop_fraction)
    dataset = _load(cfg, dataset)
    if len(dataset) == 0:
        raise EmptySelectionError('task {0} has no images'.format(cfg.task_id))
    streams = _streams(rng)
    embed = model.copy(keep_optimizer=False)
    prompter = PrompterNet.initialize(streams['init']) if cfg.resample else None
    images = dataset.images(purpose='train') + rehearsal.replay_images()

    totals = {'guidance': 0.0, 'training': 0.0}
    for epoch in range(cfg.epochs):
        features = embed.embed(images)
        labeling = _cluster(features, cfg)
        memory = init_memory_from_clusters(features, labeling)
        kept = np.flatnonzero(labeling.labels != OUTLIER)

        guide, twin_fn = None, None
        if cfg.lam > 0:
            selected = rehearsal.select(streams['twin'], cfg)
            if selected is not None:
                guide, produce = selected

                def twin_fn(batch, rng, produce=produce):
                    return produce(batch, rng), np.arange(len(batch))
        if report is not None:
            report.add_epoch(cfg.task_id, epoch, labeling, guide)
        log.info('{0} epoch {1}: {2} clusters, {3} outliers, guide {4}'.format(
            cfg.task_id, epoch, labeling.n_clusters, labeling.n_outliers,
            guide))

        embed, memory, prompter, timing = _train_epoch(
            embed, memory, prompter, images, labeling.labels, kept, cfg,
            streams, twin_fn, report, epoch)
        for key in totals:
            totals[key] += timing[key]
    _log_timing(cfg.task_id, totals)
    return embed, prompter


def few_shot_style_adapt(model, reference_images, train_task, cfg, rng,
                         probability=1.0, report=None):
    """
    Generalization through a few unlabeled style references.

    The model is (re)trained on a labeled task; each original image gets,
    with the given probability, a twin transferred to the statistics of a
    randomly drawn reference image. Reference labels are never read.

    Parameters
    ----------
    model : `~colorprompt.EmbedNet`
        Starting point; left untouched.
    reference_images : list of `~numpy.ndarray`
        Unlabeled sRGB style references.
    train_task : `~colorprompt.TaskDataset`
        Labeled training images.
    cfg : `TaskConfig`
    rng : `~numpy.random.Generator`
    probability : float
        Chance that an image is paired with a twin.
    report : `RunReport`, optional

    Returns
    -------
    model : `~colorprompt.EmbedNet`
    """
    if len(reference_images) == 0:
        raise EmptySelectionError('few-shot adaptation needs at least one '
                                  'reference image')
    if not 0 <= probability <= 1:
        raise ValueError('probability must lie in [0, 1]')
    if not train_task.labeled:
        raise ConfigError('the training task must be labeled')
    references = [image_stats(srgb_to_lab(img)) for img in reference_images]
    streams = _streams(rng)

    def twin_fn(batch, rng):
        if probability <= 0:
            return None
        chosen = np.flatnonzero(rng.random(len(batch)) < probability)
        if len(chosen) == 0:
            return None
        picks = rng.integers(len(references), size=len(chosen))
        if cfg.object_agnostic:
            twins = [object_agnostic_transfer(batch[i], references[k],
                                              cfg.crop_fraction)
                     for i, k in zip(chosen, picks)]
        else:
            twins = [transfer_to_stats(batch[i], None, references[k])
                     for i, k in zip(chosen, picks)]
        return twins, chosen

    embed, _, totals = _supervised_epochs(
        model.copy(keep_optimizer=False), None,
        train_task.images(purpose='train'), train_task.identities, cfg,
        streams, twin_fn, report)
    _log_timing(cfg.task_id, totals)
    return embed


def evaluate_dataset(embed, dataset):
    """
    Retrieval metrics on a labeled dataset split into queries (first image
    of every identity and camera) and gallery (all others).

    Returns
    -------
    mAP : float
    rank1 : float
    """
    if not dataset.labeled:
        raise ConfigError('evaluation of {0} needs identity labels'
                          .format(dataset.task_id))
    query, gallery = split_query_gallery(dataset.identities, dataset.cameras)
    if len(query) == 0 or len(gallery) == 0:
        raise EmptySelectionError('{0} is too small to evaluate'
                                  .format(dataset.task_id))
    images = dataset.images(purpose='eval')
    features = embed.embed(images)
    ids = np.asarray(dataset.identities)
    cams = dataset.cameras
    return retrieval_metrics(features[query], features[gallery], ids[query],
                             ids[gallery], [cams[i] for i in query],
                             [cams[i] for i in gallery])


def _eval_split(dataset):
    held_out = dataset.subset('eval')
    return held_out if len(held_out) else dataset.subset('train')


def run_stream(stream):
    """
    Run a continual stream end to end.

    The first task is supervised, the others are adaptation tasks. After
    every task the model is evaluated on every task so far and on the
    unseen sets, and the checkpoint, the rehearsal state and the report are
    written to ``stream.output``. A failing task still leaves the partial
    report on disk.

    Returns
    -------
    report : `RunReport`
    """
    if not stream.tasks[0].supervised:
        raise ConfigError('the first task of a stream must be supervised')
    for task in stream.tasks[1:]:
        if task.supervised:
            raise ConfigError('only the first task may be supervised; {0} is '
                              'marked supervised'.format(task.task_id))

    output = stream.output
    checkpoints = os.path.join(output, 'checkpoints')
    os.makedirs(checkpoints, exist_ok=True)
    audit = AccessAudit(enforce=stream.enforce_audit)
    report = RunReport(stream.task_ids, sorted(stream.unseen), stream.seed,
                       stream.rehearsal)
    report.audit = audit

    root = np.random.SeedSequence(stream.seed)
    task_seeds = root.spawn(len(stream.tasks) + 1)
    rehearsal = make_rehearsal(stream.rehearsal,
                               capacity=stream.replay_capacity,
                               rng=np.random.default_rng(task_seeds[-1]),
                               by_camera=stream.summary_by_camera)

    unseen = [(name, _eval_split(stream.unseen[name].load(
        name, audit, seed=stream.seed))) for name in sorted(stream.unseen)]
    evaluated = []
    model = None
    try:
        for k, cfg in enumerate(stream.tasks):
            log.info('task {0} ({1} of {2})'.format(cfg.task_id, k + 1,
                                                    len(stream.tasks)))
            audit.begin_task(cfg.task_id)
            dataset = cfg.data.load(cfg.task_id, audit, seed=stream.seed + k)
            rng = np.random.default_rng(task_seeds[k])
            train = dataset.subset('train')
            if k == 0:
                model, prompter = run_source_task(cfg, rng, train, report)
            else:
                model, prompter = run_adaptation_task(model, rehearsal, cfg,
                                                      rng, train, report)
            rehearsal.complete_task(cfg.task_id, prompter, train)
            audit.end_task(cfg.task_id)

            evaluated.append((cfg.task_id, _eval_split(dataset)))
            for name, split in evaluated + unseen:
                mAP, rank1 = evaluate_dataset(model, split)
                report.add_evaluation(cfg.task_id, name, mAP, rank1)
                log.info('after {0}: {1} mAP {2:.3f} rank-1 {3:.3f}'.format(
                    cfg.task_id, name, mAP, rank1))

            embed_save(model, os.path.join(
                checkpoints, 'embed_{0}.fits'.format(cfg.task_id)))
            rehearsal.save(checkpoints)
            if isinstance(rehearsal, PrompterRehearsal):
                report.pool = rehearsal.pool.task_ids
        report.status = 'completed'
    except Exception as err:
        report.status = 'failed: {0}: {1}'.format(type(err).__name__, err)
        report.write(output)
        raise
    report.write(output)
    return report
