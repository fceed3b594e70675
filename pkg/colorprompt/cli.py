# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Command-line interface: ``colorprompt <command> ...``.
"""
import argparse
import json
import os
import sys

import numpy as np

from astropy import log
from astropy.extern.configobj.configobj import ConfigObj, ConfigObjError
from astropy.table import Table

from .colorspace import srgb_to_lab
from .colorstats import (Region, camera_summary, channel_histogram,
                         image_stats, stats_from_table, stats_table)
from .exceptions import ColorPromptError, ConfigError, InvalidStatsError
from .augment import GeometricAugment
from .ingest import (SynthSpec, TaskDataset, load_directory, read_image,
                     synth_generate, write_image, write_samples,
                     RASTER_EXTENSIONS, Sample)
from .memory import EmbedNet, embed_load, embed_save, retrieval_metrics
from .pipeline import TaskConfig, TaskStream, few_shot_style_adapt, run_stream
from .prompter import (PrompterNet, PrompterPool, pool_load, pool_save,
                       prompter_predict, prompter_recover,
                       prompter_train_step)
from .transfer import object_agnostic_transfer, transfer_to_stats

__all__ = ['main']


def _load_images(path, naming='market_style'):
    if os.path.isdir(path):
        return load_directory(path, naming)
    return [Sample(read_image(path), source=path)]


def _write_table(table, out):
    if out is None:
        table.write(sys.stdout, format='ascii.csv')
    else:
        table.write(out, format='ascii.csv', overwrite=True)
        log.info('wrote {0}'.format(out))


def _stats(args):
    samples = _load_images(args.path, args.naming)
    if len(samples) == 0:
        raise ColorPromptError('no images in {0}'.format(args.path))
    images = [s.image for s in samples]

    if args.hist is not None:
        table = channel_histogram(images, args.hist, args.bins).to_table()
    elif args.per_camera:
        summary = camera_summary([(srgb_to_lab(s.image), s.camera)
                                  for s in samples])
        table = stats_table([entry.stats for entry in summary],
                            [entry.camera_id for entry in summary])
        table.add_column([entry.image_count for entry in summary],
                         name='image_count', index=1)
    else:
        table = stats_table([image_stats(srgb_to_lab(img), args.region)
                             for img in images],
                            [os.path.basename(s.source) for s in samples])
    _write_table(table, args.out)
    return 0


def _transfer(args):
    img = read_image(args.image)
    if args.target_stats is not None:
        table = Table.read(args.target_stats, format='ascii.csv')
        try:
            target = stats_from_table(table, args.row)
        except (KeyError, IndexError) as err:
            raise InvalidStatsError('{0} holds no statistics row {1}: {2}'
                                    .format(args.target_stats, args.row, err))
    else:
        target = image_stats(srgb_to_lab(read_image(args.target_image)))

    if args.object_agnostic is not None:
        out = object_agnostic_transfer(img, target, args.object_agnostic)
    else:
        out = transfer_to_stats(img, None, target)
    write_image(args.out, out)
    log.info('wrote {0}'.format(args.out))
    return 0


def _prompter_train(args):
    images = [s.image for s in _load_images(args.path)]
    if len(images) == 0:
        raise ColorPromptError('no images in {0}'.format(args.path))
    if args.append and os.path.exists(args.out):
        pool = pool_load(args.out)
    else:
        pool = PrompterPool()
    task = args.task or os.path.basename(os.path.normpath(args.path))

    rng = np.random.default_rng(args.seed)
    net = PrompterNet.initialize(rng, pool.grid)
    for epoch in range(args.epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), args.batch_size):
            batch = [images[i] for i in order[start:start + args.batch_size]]
            net, loss = prompter_train_step(net, batch, rng, args.lr)
            losses.append(loss)
        log.info('epoch {0}: mean prompter loss {1:.6f}'.format(
            epoch, np.mean(losses)))
    pool.append(task, net)
    pool_save(pool, args.out)
    log.info('pool {0} now holds {1}'.format(args.out, pool.task_ids))
    return 0


def _pool_entry(path, task):
    pool = pool_load(path)
    try:
        return pool.get(task)
    except KeyError:
        raise ColorPromptError('{0} holds no prompter for task {1!r}; it has '
                               '{2}'.format(path, task, pool.task_ids))


def _prompter_predict(args):
    net = _pool_entry(args.pool, args.task)
    samples = _load_images(args.image)
    stats = prompter_predict(net, [s.image for s in samples])
    _write_table(stats_table(stats, [os.path.basename(s.source)
                                     for s in samples]), args.out)
    return 0


def _recover(args):
    net = _pool_entry(args.pool, args.task)
    out = prompter_recover(net, read_image(args.image),
                           object_agnostic=args.object_agnostic is not None,
                           crop_fraction=args.object_agnostic)
    write_image(args.out, out)
    log.info('wrote {0}'.format(args.out))
    return 0


def _synth(args):
    try:
        cfg = ConfigObj(args.spec, file_error=True)
    except (OSError, ConfigObjError) as err:
        raise ConfigError('cannot read {0}: {1}'.format(args.spec, err))
    samples = synth_generate(SynthSpec.from_config(cfg), args.seed)
    train = [s for s in samples if s.split == 'train']
    held_out = [s for s in samples if s.split == 'eval']
    write_samples(train, args.out, args.extension)
    if held_out:
        write_samples(held_out, os.path.join(args.out, 'eval'),
                      args.extension)
    log.info('wrote {0} images to {1}'.format(len(samples), args.out))
    return 0


def _continual_run(args):
    stream = TaskStream.read(args.config, output=args.out, seed=args.seed,
                             rehearsal=args.rehearsal)
    report = run_stream(stream)
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return 0


def _few_shot(args):
    train = TaskDataset(load_directory(args.train, args.naming), 'few_shot')
    if len(train) == 0 or not train.labeled:
        raise ColorPromptError('{0} needs labeled training images'
                               .format(args.train))
    references = [s.image for s in _load_images(args.references)]
    rng = np.random.default_rng(args.seed)
    model = embed_load(args.model) if args.model is not None \
        else EmbedNet.initialize(rng)
    cfg = TaskConfig('few_shot', supervised=True, epochs=args.epochs,
                     batch_size=args.batch_size, lam=args.lam, lr=args.lr,
                     object_agnostic=args.object_agnostic is not None,
                     crop_fraction=args.object_agnostic,
                     geometric=GeometricAugment(flip=args.flip))
    log.info('few-shot retraining on {0} images with {1} style references'
             .format(len(train), len(references)))
    model = few_shot_style_adapt(model, references, train, cfg, rng,
                                 probability=args.probability)
    embed_save(model, args.out)
    log.info('wrote {0}'.format(args.out))
    return 0


def _eval(args):
    embed = embed_load(args.model)
    query = load_directory(args.query, args.naming)
    gallery = load_directory(args.gallery, args.naming)
    for name, samples in (('query', query), ('gallery', gallery)):
        if len(samples) == 0 or any(s.identity is None for s in samples):
            raise ColorPromptError('every {0} image needs an identity label'
                                   .format(name))
    mAP, rank1 = retrieval_metrics(
        embed.embed([s.image for s in query]),
        embed.embed([s.image for s in gallery]),
        [s.identity for s in query], [s.identity for s in gallery],
        [s.camera for s in query], [s.camera for s in gallery])
    _write_table(Table(rows=[(mAP, rank1)], names=['mAP', 'rank1']),
                 args.out)
    return 0


def _probability(text):
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError('probability must lie in [0, 1]')
    return value


def _crop_fraction(text):
    value = float(text)
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError('crop fraction must lie in [0, 1)')
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog='colorprompt',
        description='Color statistics, color transfer, prompter pools and '
                    'data-free continual adaptation runs.')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    naming = dict(choices=['market_style', 'manifest'], default='market_style',
                  help='label source of dataset directories')

    stats = commands.add_parser('stats', help='lαβ statistics or channel '
                                              'histograms as CSV')
    stats.add_argument('path', help='image file or dataset directory')
    stats.add_argument('--region', type=Region.parse,
                       help="pixel region, 'full' or "
                            "'frame:<crop fraction>'")
    stats.add_argument('--per-camera', action='store_true',
                       help='pool the statistics per camera')
    stats.add_argument('--hist', choices=['R', 'G', 'B'],
                       help='histogram of an sRGB channel instead')
    stats.add_argument('--bins', type=int, default=64)
    stats.add_argument('--naming', **naming)
    stats.add_argument('--out', help='output CSV (default stdout)')
    stats.set_defaults(func=_stats)

    transfer = commands.add_parser('transfer', help='move an image to target '
                                                    'statistics')
    transfer.add_argument('image')
    target = transfer.add_mutually_exclusive_group(required=True)
    target.add_argument('--target-stats', help='statistics CSV')
    target.add_argument('--target-image', help='image whose statistics are '
                                               'the target')
    transfer.add_argument('--row', type=int, default=0,
                          help='row of the statistics CSV')
    transfer.add_argument('--object-agnostic', type=_crop_fraction,
                          metavar='CROP', help='frame-derived source '
                                               'statistics')
    transfer.add_argument('--out', required=True)
    transfer.set_defaults(func=_transfer)

    train = commands.add_parser('prompter-train', help='train a prompter and '
                                                       'store it in a pool')
    train.add_argument('path', help='dataset directory')
    train.add_argument('--epochs', type=int, default=10)
    train.add_argument('--seed', type=int, default=0)
    train.add_argument('--batch-size', type=int, default=16)
    train.add_argument('--lr', type=float, default=None)
    train.add_argument('--task', help='task id (default: directory name)')
    train.add_argument('--out', required=True, help='pool file')
    train.add_argument('--append', action='store_true',
                       help='add to an existing pool')
    train.set_defaults(func=_prompter_train)

    predict = commands.add_parser('prompter-predict',
                                  help='predicted original statistics as CSV')
    predict.add_argument('pool')
    predict.add_argument('image', help='image file or directory')
    predict.add_argument('--task', required=True)
    predict.add_argument('--out')
    predict.set_defaults(func=_prompter_predict)

    recover = commands.add_parser('recover', help='transfer an image to its '
                                                  'predicted statistics')
    recover.add_argument('pool')
    recover.add_argument('image')
    recover.add_argument('--task', required=True)
    recover.add_argument('--object-agnostic', type=_crop_fraction,
                         metavar='CROP')
    recover.add_argument('--out', required=True)
    recover.set_defaults(func=_recover)

    synth = commands.add_parser('synth', help='render a synthetic dataset')
    synth.add_argument('spec', help='synthetic dataset config')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--out', required=True)
    synth.add_argument('--extension', default='.png',
                       choices=sorted(RASTER_EXTENSIONS))
    synth.set_defaults(func=_synth)

    run = commands.add_parser('continual-run', help='run a continual stream')
    run.add_argument('config', help='stream config')
    run.add_argument('--out', help='report directory (default from config)')
    run.add_argument('--seed', type=int)
    run.add_argument('--rehearsal',
                     choices=['prompter', 'camera_summary', 'replay', 'none'])
    run.set_defaults(func=_continual_run)

    few = commands.add_parser('few-shot', help='retrain on a labeled set '
                                                'with twins styled after '
                                                'unlabeled references')
    few.add_argument('train', help='labeled dataset directory')
    few.add_argument('references', help='style reference image or directory; '
                                        'labels are never read')
    few.add_argument('--model', help='starting embedding checkpoint '
                                     '(default: freshly initialized)')
    few.add_argument('--epochs', type=int, default=10)
    few.add_argument('--batch-size', type=int, default=16)
    few.add_argument('--lr', type=float, default=None)
    few.add_argument('--lam', type=float, default=None,
                     help='twin weight of the combined objective')
    few.add_argument('--probability', type=_probability, default=1.0,
                     help='chance that an image gets a styled twin')
    few.add_argument('--object-agnostic', type=_crop_fraction,
                     metavar='CROP')
    few.add_argument('--flip', action='store_true',
                     help='random horizontal flips')
    few.add_argument('--seed', type=int, default=0)
    few.add_argument('--naming', **naming)
    few.add_argument('--out', required=True, help='embedding checkpoint')
    few.set_defaults(func=_few_shot)

    evaluate = commands.add_parser('eval', help='retrieval metrics of an '
                                                'embedding checkpoint')
    evaluate.add_argument('--model', required=True)
    evaluate.add_argument('--query', required=True)
    evaluate.add_argument('--gallery', required=True)
    evaluate.add_argument('--naming', **naming)
    evaluate.add_argument('--out')
    evaluate.set_defaults(func=_eval)
    return parser


def main(argv=None):
    """
    Entry point; returns the process exit status.
    """
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ColorPromptError, OSError) as err:
        print('colorprompt: error: {0}'.format(err), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
