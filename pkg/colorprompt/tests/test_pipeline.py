import json
import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from astropy.utils.data import get_pkg_data_filename

from .. import conf
from ..colorspace import srgb_to_lab
from ..colorstats import (ColorStats, camera_summary, camera_summary_from_json,
                          count_distinct_guidance)
from ..exceptions import ConfigError, EmptySelectionError
from ..ingest import Sample, SynthSpec, TaskDataset, split_query_gallery
from ..memory import EmbedNet, random_rank1, retrieval_metrics
from ..prompter import PrompterPool, prompter_predict, prompter_recover_batch
from ..pipeline import (DataSource, NoRehearsal, ReservoirBuffer, RunReport,
                        TaskConfig, TaskStream, evaluate_dataset,
                        few_shot_style_adapt, make_rehearsal,
                        run_adaptation_task, run_source_task, run_stream)
from ..transfer import object_agnostic_transfer


def synth_source(texture_seed, l_means=(-0.5, -0.45), n_identities=4,
                 eval_identities=2):
    cameras = {k + 1: ColorStats([l, 0.05, 0.0], [0.2, 0.04, 0.04])
               for k, l in enumerate(l_means)}
    return DataSource(synth=SynthSpec(cameras, n_identities=n_identities,
                                      images_per_identity=2,
                                      eval_identities=eval_identities,
                                      texture_seed=texture_seed, height=32,
                                      width=16))


def small_task(task_id, texture_seed, l_means=(-0.5, -0.45), **kwargs):
    settings = dict(epochs=1, batch_size=8, eps=0.6, min_samples=2)
    settings.update(kwargs)
    return TaskConfig(task_id, synth_source(texture_seed, l_means), **settings)


def train_split(cfg, seed=0):
    return cfg.data.load(cfg.task_id, seed=seed).subset('train')


def assert_same_network(a, b):
    for p, q in zip(a.mlp.parameters(), b.mlp.parameters()):
        assert_array_equal(p, q)


def test_task_config_validation():
    with pytest.raises(ConfigError):
        TaskConfig('a', lam=1.5)
    with pytest.raises(ConfigError):
        TaskConfig('a', epochs=0)
    with pytest.raises(ConfigError):
        TaskConfig('a', batch_size=0)

    assert TaskConfig('a', supervised=True).embed_lr == conf.source_lr
    assert TaskConfig('b').embed_lr == conf.embed_lr
    assert TaskConfig('c', lr=1e-3).embed_lr == 1e-3
    with conf.set_temp('lam', 0.3):
        assert TaskConfig('d').lam == 0.3


def test_task_stream_validation():
    with pytest.raises(ConfigError):
        TaskStream([TaskConfig('a'), TaskConfig('a')])
    with pytest.raises(ConfigError):
        TaskStream([])
    with pytest.raises(ConfigError):
        TaskStream([TaskConfig('a')], rehearsal='generative')
    with pytest.raises(ConfigError):
        DataSource()


def test_read_shipped_stream(tmp_path):
    path = get_pkg_data_filename('data/three_task_stream.cfg',
                                 package='colorprompt')

    stream = TaskStream.read(path, output=str(tmp_path))
    assert stream.task_ids == ['warm', 'cool', 'pale']
    assert stream.rehearsal == 'prompter'
    assert stream.enforce_audit
    assert stream.output == str(tmp_path)
    warm, cool = stream.tasks[:2]
    assert warm.supervised and not cool.supervised
    assert (warm.epochs, cool.epochs) == (30, 12)
    assert cool.lam == 0.5 and cool.eps == 0.3 and cool.min_samples == 3
    assert warm.embed_lr == cool.embed_lr == 1e-3
    assert cool.prompter_lr == 2e-3
    assert stream.summary_by_camera
    assert cool.geometric.flip
    assert cool.data.synth.texture_seed == 23

    overridden = TaskStream.read(path, output=str(tmp_path), seed=5,
                                 rehearsal='none')
    assert (overridden.seed, overridden.rehearsal) == (5, 'none')


def test_stream_config_errors(tmp_path):
    path = tmp_path / 'stream.cfg'
    path.write_text('seed = 0\n[tasks]\n    [[a]]\n    supervised = True\n')
    with pytest.raises(ConfigError, match='neither a path'):
        TaskStream.read(str(path))

    path.write_text('seed = 0\n')
    with pytest.raises(ConfigError, match=r'\[tasks\]'):
        TaskStream.read(str(path))

    path.write_text('[tasks]\n    [[a]]\n    path = x\n    lam = heavy\n')
    with pytest.raises(ConfigError, match='lam'):
        TaskStream.read(str(path))

    with pytest.raises(ConfigError):
        TaskStream.read(str(tmp_path / 'missing.cfg'))


def test_source_task_losses():
    cfg = small_task('market', 1, supervised=True)
    report = RunReport(['market'])

    embed, prompter = run_source_task(cfg, np.random.default_rng(0),
                                      train_split(cfg), report)
    # 16 training images in batches of 8
    assert len(report.losses) == 2
    assert list(report.losses['batch']) == [0, 1]
    assert np.all(np.isfinite(report.losses['prompter_loss']))
    assert prompter is not None
    assert len(report.epochs) == 1
    assert report.epochs['clusters'][0] == 4


def test_source_task_is_deterministic():
    cfg = small_task('market', 2, supervised=True, epochs=2)
    dataset = train_split(cfg)

    first = run_source_task(cfg, np.random.default_rng(3), dataset)
    second = run_source_task(cfg, np.random.default_rng(3), dataset)
    for a, b in zip(first, second):
        assert_same_network(a, b)


def test_source_task_needs_labels():
    cfg = small_task('market', 3, supervised=True)
    unlabeled = TaskDataset([Sample(np.full((32, 16, 3), 0.5))] * 4, 'market')

    with pytest.raises(ConfigError):
        run_source_task(cfg, np.random.default_rng(0), unlabeled)


def test_source_task_without_prompter():
    cfg = small_task('market', 4, supervised=True, resample=False,
                     shuffle_pretrain=False)

    _, prompter = run_source_task(cfg, np.random.default_rng(0),
                                  train_split(cfg))
    assert prompter is None


@pytest.fixture(scope='module')
def source_model():
    cfg = small_task('market', 5, supervised=True)
    embed, prompter = run_source_task(cfg, np.random.default_rng(0),
                                      train_split(cfg))
    return embed, PrompterPool([('market', prompter)])


def test_zero_lambda_matches_baseline(source_model):
    embed, pool = source_model
    cfg = small_task('cuhk', 6, l_means=(-0.7, -0.65), lam=0.0)
    dataset = train_split(cfg)

    guided = run_adaptation_task(embed, pool, cfg, np.random.default_rng(1),
                                 dataset)
    baseline = run_adaptation_task(embed, NoRehearsal(), cfg,
                                   np.random.default_rng(1), dataset)
    for a, b in zip(guided, baseline):
        assert_same_network(a, b)


def test_adaptation_draws_from_pool(source_model):
    embed, pool = source_model
    cfg = small_task('cuhk', 7, l_means=(-0.7, -0.65), epochs=2)
    report = RunReport(['cuhk'])
    before = [p.copy() for p in embed.mlp.parameters()]

    _, prompter = run_adaptation_task(embed, pool, cfg,
                                      np.random.default_rng(2),
                                      train_split(cfg), report)
    assert list(report.epochs['guide']) == ['market', 'market']
    assert prompter is not None
    assert set(report.losses['epoch']) == {0, 1}
    # the input model is left untouched
    for p, q in zip(before, embed.mlp.parameters()):
        assert_array_equal(p, q)

    with pytest.raises(EmptySelectionError):
        run_adaptation_task(embed, PrompterPool(), cfg,
                            np.random.default_rng(2), train_split(cfg))


def test_prompter_guidance_is_diverse(source_model):
    _, pool = source_model
    cfg = small_task('cuhk', 8, l_means=(-0.7, -0.65))
    images = train_split(cfg).images()

    predicted = prompter_predict(pool.get('market'), images)
    summary = camera_summary([(srgb_to_lab(img), cam) for img, cam in
                              zip(images, train_split(cfg).cameras)])
    assert count_distinct_guidance([entry.stats for entry in summary]) == 2
    assert count_distinct_guidance(predicted) >= 0.9 * len(images)

    # without camera labels the summary collapses to a single guidance
    pooled = camera_summary([(srgb_to_lab(img), None) for img in images])
    assert count_distinct_guidance([entry.stats for entry in pooled]) == 1


def test_rehearsal_follows_task_settings(source_model):
    _, pool = source_model
    net = pool.get('market')
    images = train_split(small_task('cuhk', 8, (-0.7, -0.65))).images()[:4]
    rehearsal = make_rehearsal('prompter')
    rehearsal.complete_task('market', net, None)

    twins = {}
    for object_agnostic, crop in ((True, 0.4), (False, None)):
        cfg = small_task('cuhk', 8, object_agnostic=object_agnostic,
                         crop_fraction=crop)
        guide, produce = rehearsal.select(np.random.default_rng(0), cfg)
        twins[object_agnostic] = produce(images, np.random.default_rng(1))
        assert guide == 'market'
        expected = prompter_recover_batch(net, images, object_agnostic, crop)
        for a, b in zip(twins[object_agnostic], expected):
            assert_array_equal(a, b)
    assert not np.array_equal(twins[True][0], twins[False][0])


def test_summary_without_camera_labels():
    dataset = train_split(small_task('market', 5))
    images = train_split(small_task('cuhk', 8, (-0.7, -0.65))).images()[:3]
    rehearsal = make_rehearsal('camera_summary', by_camera=False)
    rehearsal.complete_task('market', None, dataset)

    (task_id, summary), = rehearsal.summaries
    assert task_id == 'market'
    assert len(summary) == 1
    cfg = small_task('cuhk', 8, object_agnostic=True, crop_fraction=0.4)
    _, produce = rehearsal.select(np.random.default_rng(0), cfg)
    for twin, img in zip(produce(images, np.random.default_rng(1)), images):
        assert_array_equal(twin, object_agnostic_transfer(
            img, summary[0].stats, 0.4))


def two_task_stream(output, rehearsal='prompter', unseen=True, **kwargs):
    tasks = [small_task('market', 9, supervised=True),
             small_task('cuhk', 10, l_means=(-0.7, -0.65), lam=0.5)]
    held = {'msmt': synth_source(11, (-0.3, -0.35))} if unseen else None
    return TaskStream(tasks, seed=0, output=str(output), rehearsal=rehearsal,
                      unseen=held, **kwargs)


def test_run_stream(tmp_path):
    report = run_stream(two_task_stream(tmp_path / 'run', enforce_audit=True))

    assert report.status == 'completed'
    assert len(report.evaluation) == 5
    assert list(report.evaluation['trained_task']) == ['market', 'market',
                                                       'cuhk', 'cuhk', 'cuhk']
    assert report.summary()['audit_violations'] == 0
    assert report.pool == ['market', 'cuhk']
    matrix = report.matrix()
    assert matrix.shape == (2, 3)
    assert np.isnan(matrix[0, 1])
    assert np.all(np.isfinite(matrix[1]))

    for name in ('losses.csv', 'epochs.csv', 'evaluation.csv', 'audit.csv',
                 'summary.json', 'checkpoints/embed_market.fits',
                 'checkpoints/embed_cuhk.fits', 'checkpoints/pool.fits'):
        assert os.path.exists(str(tmp_path / 'run' / name))
    with open(str(tmp_path / 'run' / 'summary.json')) as f:
        summary = json.load(f)
    assert summary['status'] == 'completed'
    assert sorted(summary['final']) == ['cuhk', 'market', 'msmt']


def test_run_stream_is_reproducible(tmp_path):
    run_stream(two_task_stream(tmp_path / 'first', unseen=False))
    run_stream(two_task_stream(tmp_path / 'second', unseen=False))

    for name in ('losses.csv', 'evaluation.csv', 'summary.json',
                 'checkpoints/embed_cuhk.fits', 'checkpoints/pool.fits'):
        with open(str(tmp_path / 'first' / name), 'rb') as a, \
                open(str(tmp_path / 'second' / name), 'rb') as b:
            assert a.read() == b.read()


def test_zero_lambda_stream_matches_baseline(tmp_path):
    reports = {}
    for mode in ('prompter', 'none'):
        stream = two_task_stream(tmp_path / mode, rehearsal=mode, unseen=False)
        stream.tasks[1].lam = 0.0
        reports[mode] = run_stream(stream)

    for name in ('mAP', 'rank1'):
        assert_array_equal(reports['prompter'].matrix(name),
                           reports['none'].matrix(name))
    for name in ('embed_market.fits', 'embed_cuhk.fits'):
        guided = tmp_path / 'prompter' / 'checkpoints' / name
        baseline = tmp_path / 'none' / 'checkpoints' / name
        assert guided.read_bytes() == baseline.read_bytes()


def test_failing_task_leaves_partial_report(tmp_path):
    stream = two_task_stream(tmp_path / 'run', unseen=False)
    stream.tasks[1].data = DataSource(path=str(tmp_path / 'missing'))

    with pytest.raises(OSError):
        run_stream(stream)
    with open(str(tmp_path / 'run' / 'summary.json')) as f:
        summary = json.load(f)
    assert summary['status'].startswith('failed')
    assert len(summary['final']) == 1
    assert os.path.exists(str(tmp_path / 'run' / 'checkpoints' /
                              'embed_market.fits'))


def test_first_task_must_be_supervised(tmp_path):
    stream = two_task_stream(tmp_path / 'run')
    stream.tasks[0].supervised = False
    with pytest.raises(ConfigError):
        run_stream(stream)

    stream = two_task_stream(tmp_path / 'run')
    stream.tasks[1].supervised = True
    with pytest.raises(ConfigError):
        run_stream(stream)


def test_camera_summary_mode(tmp_path):
    report = run_stream(two_task_stream(tmp_path / 'run',
                                        rehearsal='camera_summary',
                                        unseen=False))

    assert report.status == 'completed'
    assert report.pool == []
    summary = camera_summary_from_json(str(tmp_path / 'run' / 'checkpoints' /
                                           'camera_summary_market.json'))
    assert [entry.camera_id for entry in summary] == [1, 2]
    assert list(report.epochs['guide'][report.epochs['task'] == 'cuhk']) == \
        ['market']


@pytest.mark.parametrize('rehearsal', ['replay', 'none'])
def test_comparison_modes(tmp_path, rehearsal):
    report = run_stream(two_task_stream(tmp_path / 'run', rehearsal=rehearsal,
                                        unseen=False, replay_capacity=8))

    assert report.status == 'completed'
    assert report.summary()['audit_violations'] == 0
    assert len(report.evaluation) == 3


def test_make_rehearsal():
    assert make_rehearsal('none').name == 'none'
    assert make_rehearsal('replay', capacity=4).buffer.capacity == 4
    with pytest.raises(ConfigError):
        make_rehearsal('generative')
    with pytest.raises(EmptySelectionError):
        make_rehearsal('prompter').select(np.random.default_rng(0))
    with pytest.raises(ConfigError):
        make_rehearsal('prompter').complete_task('a', None, None)


def test_reservoir_buffer():
    buffer = ReservoirBuffer(3, np.random.default_rng(0))
    for item in range(10):
        buffer.offer(item)
    assert len(buffer) == 3
    assert buffer.seen == 10
    assert set(buffer.items) <= set(range(10))

    empty = ReservoirBuffer(0, np.random.default_rng(0))
    empty.offer(1)
    assert len(empty) == 0
    with pytest.raises(ValueError):
        ReservoirBuffer(-1, np.random.default_rng(0))


def test_reservoir_buffer_is_uniform():
    rng = np.random.default_rng(1)
    kept = 0
    for _ in range(2000):
        buffer = ReservoirBuffer(3, rng)
        for item in range(10):
            buffer.offer(item)
        kept += 0 in buffer.items
    assert abs(kept / 2000 - 0.3) < 0.05


def test_few_shot_without_twins_is_plain_training(source_model):
    embed, _ = source_model
    cfg = small_task('market', 5, supervised=True, lam=0.5)
    dataset = train_split(cfg)
    references = train_split(small_task('msmt', 12, (-0.3, -0.35))).images()

    none_drawn = few_shot_style_adapt(embed, references, dataset, cfg,
                                      np.random.default_rng(4),
                                      probability=0.0)
    zero_weight = few_shot_style_adapt(
        embed, references, dataset,
        small_task('market', 5, supervised=True, lam=0.0),
        np.random.default_rng(4), probability=1.0)
    assert_same_network(none_drawn, zero_weight)

    with pytest.raises(EmptySelectionError):
        few_shot_style_adapt(embed, [], dataset, cfg,
                             np.random.default_rng(4))
    with pytest.raises(ValueError):
        few_shot_style_adapt(embed, references, dataset, cfg,
                             np.random.default_rng(4), probability=2)


def shipped_run(tmp_path, seed, rehearsal='prompter', lam=None, **settings):
    path = get_pkg_data_filename('data/three_task_stream.cfg',
                                 package='colorprompt')
    name = '{0}_{1}_{2}'.format(rehearsal, lam, seed)
    stream = TaskStream.read(path, output=str(tmp_path / name), seed=seed,
                             rehearsal=rehearsal)
    for key, value in settings.items():
        setattr(stream, key, value)
    if lam is not None:
        for task in stream.tasks[1:]:
            task.lam = lam
    report = run_stream(stream)
    assert report.status == 'completed'
    return report


@pytest.mark.slow
def test_adaptation_finds_several_clusters(tmp_path):
    report = shipped_run(tmp_path, 0)

    adapted = report.epochs[report.epochs['task'] != 'warm']
    assert np.all(adapted['clusters'] >= 2)
    losses = report.losses[report.losses['task'] != 'warm']
    assert np.all(losses['loss'] > 0)


@pytest.mark.slow
def test_prompter_rehearsal_reduces_forgetting(tmp_path):
    beats_baseline, near_replay = 0, 0
    for seed in range(5):
        retained = {mode: shipped_run(tmp_path, seed, mode).metric('pale',
                                                                   'warm')
                    for mode in ('prompter', 'none', 'replay')}
        beats_baseline += retained['prompter'] >= retained['none'] + 0.05
        near_replay += retained['prompter'] >= retained['replay'] - 0.02
    assert beats_baseline >= 4
    assert near_replay >= 3


@pytest.mark.slow
def test_twin_only_training_retains_less(tmp_path):
    no_better = 0
    for seed in range(5):
        twin_only = shipped_run(tmp_path, seed, lam=1.0).metric('pale', 'warm')
        mixed = shipped_run(tmp_path, seed, lam=0.5).metric('pale', 'warm')
        no_better += twin_only <= mixed
    assert no_better >= 4


@pytest.mark.slow
def test_prompter_guidance_beats_pooled_summary(tmp_path):
    wins = 0
    for seed in range(5):
        final = {}
        for mode in ('prompter', 'camera_summary'):
            report = shipped_run(tmp_path, seed, mode,
                                 summary_by_camera=False)
            final[mode] = np.mean(report.matrix()[-1, :3])
        wins += final['prompter'] > final['camera_summary']
    assert wins >= 3


def eight_identity_source():
    cameras = {1: ColorStats([-0.45, 0.10, 0.02], [0.22, 0.05, 0.04]),
               2: ColorStats([-0.70, -0.05, 0.06], [0.20, 0.04, 0.05])}
    return DataSource(synth=SynthSpec(cameras, n_identities=8,
                                      images_per_identity=4,
                                      eval_identities=8, texture_seed=3))


def shifted_target():
    cameras = {1: ColorStats([-0.95, -0.15, 0.14], [0.15, 0.04, 0.05]),
               2: ColorStats([-1.00, -0.12, 0.16], [0.15, 0.04, 0.05])}
    return DataSource(synth=SynthSpec(cameras, n_identities=8,
                                      images_per_identity=4,
                                      eval_identities=8, texture_seed=5))


def source_config(**kwargs):
    return TaskConfig('source', eight_identity_source(), supervised=True,
                      epochs=30, lr=1e-3, prompter_lr=2e-3, **kwargs)


@pytest.fixture(scope='module')
def trained_source():
    cfg = source_config()
    dataset = cfg.data.load('source', seed=0)
    embed, prompter = run_source_task(cfg, np.random.default_rng(0),
                                      dataset.subset('train'))
    return embed, prompter, dataset.subset('eval')


@pytest.mark.slow
def test_source_task_reaches_high_rank1(trained_source):
    embed, _, held_out = trained_source

    _, rank1 = evaluate_dataset(embed, held_out)
    assert rank1 >= 0.9


@pytest.mark.slow
def test_prompter_features_do_not_identify(trained_source):
    embed, prompter, held_out = trained_source
    query, gallery = split_query_gallery(held_out.identities,
                                         held_out.cameras)
    ids = np.asarray(held_out.identities)
    cams = held_out.cameras
    images = held_out.images(purpose='eval')
    labels = (ids[query], ids[gallery], [cams[i] for i in query],
              [cams[i] for i in gallery])

    def rank1(features):
        return retrieval_metrics(features[query], features[gallery],
                                 *labels)[1]

    chance = random_rank1(*labels)
    assert rank1(prompter.features(images)) <= chance + 0.15
    assert rank1(embed.embed(images)) >= chance + 0.40


@pytest.mark.slow
def test_few_shot_references_help_on_shifted_domain():
    cfg = source_config()
    source = cfg.data.load('source', seed=0).subset('train')
    target = shifted_target().load('target', seed=1)
    train = target.subset('train')
    # sixteen unlabeled references spread over the target identities
    references = train.images(indices=range(0, len(train), len(train) // 16))
    held_out = target.subset('eval')

    wins = 0
    for seed in range(5):
        start = EmbedNet.initialize(np.random.default_rng(seed))
        plain = few_shot_style_adapt(start, references, source, cfg,
                                     np.random.default_rng(seed),
                                     probability=0.0)
        styled = few_shot_style_adapt(start, references, source, cfg,
                                      np.random.default_rng(seed))
        wins += (evaluate_dataset(styled, held_out)[1] >=
                 evaluate_dataset(plain, held_out)[1] + 0.05)
    assert wins >= 4


@pytest.mark.slow
def test_source_references_match_color_shuffling():
    cfg = source_config()
    dataset = cfg.data.load('source', seed=0)
    train, held_out = dataset.subset('train'), dataset.subset('eval')
    references = train.images(indices=range(0, len(train), 4))

    shuffled, _ = run_source_task(cfg, np.random.default_rng(0), train)
    styled = few_shot_style_adapt(
        EmbedNet.initialize(np.random.default_rng(0)), references, train, cfg,
        np.random.default_rng(0))
    assert abs(evaluate_dataset(styled, held_out)[0] -
               evaluate_dataset(shuffled, held_out)[0]) <= 0.1
