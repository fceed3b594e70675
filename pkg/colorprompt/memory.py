# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Embedding model and cluster-level contrastive machinery: prototype
memory, contrastive loss, pseudo-label clustering and retrieval metrics.
"""
import warnings

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import DBSCAN

from astropy import log

from . import conf
from .exceptions import (ClusterRelaxationWarning, EmptySelectionError,
                         NoClustersError, NoValidPositivesWarning,
                         TrainingError)
from .network import DEFAULT_GRID, MLP, Adam, grid_pool
from .serialization import read_networks, write_networks

__all__ = ['OUTLIER', 'EMBED_HIDDEN', 'EMBED_DIM', 'EmbedNet',
           'PrototypeMemory', 'PseudoLabeling', 'contrastive_loss',
           'contrastive_grad', 'contrastive_batch', 'memory_update',
           'cluster_pseudo_labels', 'adaptive_pseudo_labels',
           'init_memory_from_clusters',
           'combined_objective', 'embed_batch_loss', 'embed_train_step',
           'retrieval_metrics', 'evaluate_retrieval', 'random_rank1',
           'embed_save', 'embed_load']

OUTLIER = -1

EMBED_HIDDEN = (128,)
EMBED_DIM = 64

# pooled sRGB values are shifted to be centered on zero before the first layer
EMBED_INPUT_OFFSET = 0.5

EPS_FACTOR = 1.5
CLUSTER_ATTEMPTS = 12

_NORM_FLOOR = 1e-12


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), _NORM_FLOOR)
    return x / norms


class EmbedNet(object):
    """
    Grid-pooled fully-connected embedding projected onto the unit sphere.
    """
    def __init__(self, mlp, grid=DEFAULT_GRID, optimizer=None):
        if mlp.layer_sizes[0] != grid[0] * grid[1] * 3:
            raise ValueError('input layer size {0} does not match a {1}x{2} '
                             'grid'.format(mlp.layer_sizes[0], *grid))
        self.mlp = mlp
        self.grid = tuple(grid)
        self.optimizer = Adam() if optimizer is None else optimizer

    @classmethod
    def initialize(cls, rng, grid=DEFAULT_GRID, hidden=EMBED_HIDDEN,
                   dim=EMBED_DIM):
        sizes = [grid[0] * grid[1] * 3] + list(hidden) + [dim]
        return cls(MLP.initialize(sizes, rng), grid)

    @property
    def dim(self):
        return self.mlp.layer_sizes[-1]

    def copy(self, keep_optimizer=True):
        """
        Independent copy; ``keep_optimizer=False`` starts the copy with a
        fresh optimizer state.
        """
        optimizer = self.optimizer.copy() if keep_optimizer else Adam()
        return EmbedNet(self.mlp.copy(), self.grid, optimizer)

    def forward(self, images, mlp=None, cache=False):
        """
        Unit-norm embeddings of shape ``(N, dim)``.
        """
        mlp = self.mlp if mlp is None else mlp
        x = grid_pool(images, self.grid) - EMBED_INPUT_OFFSET
        z, mlp_cache = mlp.forward(x, cache=True)
        norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True),
                           _NORM_FLOOR)
        f = z / norms
        if cache:
            return f, (mlp_cache, f, norms)
        return f

    def embed(self, images):
        self.mlp.check_finite()
        return self.forward(images)

    def backward(self, cache, grad_f, mlp=None):
        """
        Gradients of the network parameters given the gradient with respect
        to the unit-norm embeddings.
        """
        mlp = self.mlp if mlp is None else mlp
        mlp_cache, f, norms = cache
        grad_z = (grad_f - f * np.sum(f * grad_f, axis=1, keepdims=True)) / norms
        grads, _ = mlp.backward(mlp_cache, grad_z)
        return grads


class PrototypeMemory(object):
    """
    One unit-norm prototype per (pseudo-)class with momentum updates.
    """
    def __init__(self, prototypes, tau=None, alpha=None, renormalize=True,
                 granularity='batch'):
        """
        Parameters
        ----------
        prototypes : `~numpy.ndarray`
            Array of shape ``(N_c, d)``.
        tau : float, optional
            Temperature. Default is ``conf.tau``.
        alpha : float, optional
            Momentum. Default is ``conf.alpha``.
        renormalize : bool
            Project updated prototypes back onto the unit sphere.
        granularity : {'batch', 'sample'}
            Apply the momentum update once per class and batch with the
            class mean, or sequentially for every sample.
        """
        prototypes = np.array(prototypes, dtype=np.float64, ndmin=2)
        if len(prototypes) < 1:
            raise ValueError('a prototype memory needs at least one class')
        tau = conf.tau if tau is None else tau
        alpha = conf.alpha if alpha is None else alpha
        if tau <= 0:
            raise ValueError('tau must be positive, got {0}'.format(tau))
        if not 0 <= alpha <= 1:
            raise ValueError('alpha must lie in [0, 1], got {0}'.format(alpha))
        if granularity not in ('batch', 'sample'):
            raise ValueError("granularity must be 'batch' or 'sample'")
        self.prototypes = prototypes
        self.tau = tau
        self.alpha = alpha
        self.renormalize = renormalize
        self.granularity = granularity

    @property
    def n_classes(self):
        return len(self.prototypes)

    def copy(self, prototypes=None):
        return PrototypeMemory(self.prototypes.copy() if prototypes is None
                               else prototypes, self.tau, self.alpha,
                               self.renormalize, self.granularity)

    def _check_labels(self, labels):
        labels = np.asarray(labels, dtype=int)
        if np.any(labels < 0) or np.any(labels >= self.n_classes):
            raise ValueError('labels must lie in [0, {0}), got {1}'.format(
                self.n_classes, labels[(labels < 0) |
                                       (labels >= self.n_classes)]))
        return labels

    def __repr__(self):
        return '<PrototypeMemory classes={0} dim={1} tau={2} alpha={3}>'.format(
            self.n_classes, self.prototypes.shape[1], self.tau, self.alpha)


def contrastive_batch(features, memory, labels):
    r"""
    Per-sample contrastive losses and their gradients.

    .. math::

        \mathcal{L}(f) = -\log\frac{\exp(\langle f, c^+\rangle/\tau)}
        {\sum_i \exp(\langle f, c_i\rangle/\tau)}

    Prototypes are constants here; the memory is not differentiated
    through.

    Parameters
    ----------
    features : `~numpy.ndarray`
        Unit-norm features of shape ``(N, d)``.
    memory : `~colorprompt.PrototypeMemory`
    labels : array-like
        Class index of every feature.

    Returns
    -------
    losses : `~numpy.ndarray`
        Shape ``(N,)``.
    grads : `~numpy.ndarray`
        Gradients with respect to the features, shape ``(N, d)``.
    """
    features = np.array(features, dtype=np.float64, ndmin=2)
    labels = memory._check_labels(labels)
    protos = memory.prototypes
    logits = features @ protos.T / memory.tau
    norm = logsumexp(logits, axis=1)
    rows = np.arange(len(features))
    losses = norm - logits[rows, labels]
    probs = np.exp(logits - norm[:, None])
    grads = (probs @ protos - protos[labels]) / memory.tau
    return losses, grads


def contrastive_loss(f, memory, label):
    """
    Contrastive loss of a single unit-norm feature.
    """
    losses, _ = contrastive_batch(np.asarray(f)[None], memory, [label])
    return float(losses[0])


def contrastive_grad(f, memory, label):
    """
    Gradient of `contrastive_loss` with respect to ``f``.
    """
    _, grads = contrastive_batch(np.asarray(f)[None], memory, [label])
    return grads[0]


def memory_update(memory, features, labels):
    r"""
    Momentum update of the prototypes of the classes present in a batch,

    .. math::

        c_i \leftarrow \alpha c_i + (1 - \alpha)\frac{1}{|B_i|}
        \sum_{f_k \in B_i} f_k,

    followed by projection onto the unit sphere when the memory
    renormalizes. Classes absent from the batch are unchanged.

    Returns
    -------
    memory : `~colorprompt.PrototypeMemory`
        Updated copy.
    """
    features = np.asarray(features, dtype=np.float64)
    protos = memory.prototypes.copy()
    if len(features) == 0:
        return memory.copy(protos)
    labels = memory._check_labels(labels)
    alpha = memory.alpha

    def project(c):
        return c / max(np.linalg.norm(c), _NORM_FLOOR) if memory.renormalize else c

    if memory.granularity == 'sample':
        for f, y in zip(features, labels):
            protos[y] = project(alpha * protos[y] + (1 - alpha) * f)
    else:
        for y in np.unique(labels):
            batch_mean = features[labels == y].mean(axis=0)
            protos[y] = project(alpha * protos[y] + (1 - alpha) * batch_mean)
    return memory.copy(protos)


class PseudoLabeling(object):
    """
    Cluster assignment of a feature set; outliers carry `OUTLIER`.
    """
    def __init__(self, labels, eps=None, min_samples=None):
        self.labels = np.asarray(labels, dtype=int)
        self.eps = eps
        self.min_samples = min_samples

    @property
    def n_clusters(self):
        kept = self.labels[self.labels != OUTLIER]
        return int(kept.max()) + 1 if len(kept) else 0

    @property
    def n_outliers(self):
        return int(np.count_nonzero(self.labels == OUTLIER))

    def __repr__(self):
        return '<PseudoLabeling clusters={0} outliers={1}>'.format(
            self.n_clusters, self.n_outliers)


def cluster_pseudo_labels(features, eps=None, min_samples=None):
    """
    Density-based clustering of unit-norm features under cosine distance.

    Parameters
    ----------
    features : `~numpy.ndarray`
        Unit-norm features of shape ``(N, d)``.
    eps : float, optional
        Neighborhood radius in cosine distance. Default is
        ``conf.dbscan_eps``.
    min_samples : int, optional
        Neighbors (the point included) needed for a core point. Default is
        ``conf.dbscan_min_samples``.

    Returns
    -------
    labeling : `~colorprompt.PseudoLabeling`
    """
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        raise EmptySelectionError('no features to cluster')
    eps = conf.dbscan_eps if eps is None else eps
    min_samples = conf.dbscan_min_samples if min_samples is None else min_samples
    features = _unit_rows(features)
    distances = np.clip(1 - features @ features.T, 0, None)
    np.fill_diagonal(distances, 0)
    labels = DBSCAN(eps=eps, min_samples=min_samples,
                    metric='precomputed').fit_predict(distances)
    labeling = PseudoLabeling(labels, eps, min_samples)
    log.debug('clustering: {0} clusters, {1} outliers (eps={2})'.format(
        labeling.n_clusters, labeling.n_outliers, eps))
    return labeling


def adaptive_pseudo_labels(features, eps=None, min_samples=None,
                           attempts=CLUSTER_ATTEMPTS, factor=EPS_FACTOR):
    """
    Clustering with at least two clusters, searching the radius if needed.

    A labeling with no cluster loosens the radius by ``factor`` and a
    labeling with a single cluster, which gives the contrastive loss
    nothing to separate, tightens it. Once both failure modes have been
    seen the radius is bisected geometrically between them. Every retry
    issues a `~colorprompt.ClusterRelaxationWarning`.

    Parameters
    ----------
    features : `~numpy.ndarray`
        Unit-norm features of shape ``(N, d)``.
    eps : float, optional
        Initial radius. Default is ``conf.dbscan_eps``.
    min_samples : int, optional
        Default is ``conf.dbscan_min_samples``.
    attempts : int
        Clusterings tried before giving up.
    factor : float
        Radius step while only one failure mode has been seen.

    Returns
    -------
    labeling : `~colorprompt.PseudoLabeling`

    Raises
    ------
    `~colorprompt.NoClustersError`
        If no radius tried gives two clusters or more.
    """
    eps = conf.dbscan_eps if eps is None else eps
    if eps <= 0:
        raise ValueError('eps must be positive, got {0}'.format(eps))
    too_small, too_large = None, None
    for attempt in range(attempts):
        labeling = cluster_pseudo_labels(features, eps, min_samples)
        if labeling.n_clusters >= 2:
            return labeling
        if labeling.n_clusters == 0:
            too_small = eps if too_small is None else max(too_small, eps)
        else:
            too_large = eps if too_large is None else min(too_large, eps)
        if attempt + 1 == attempts:
            break
        if too_small is not None and too_large is not None:
            new_eps = np.sqrt(too_small * too_large)
        elif labeling.n_clusters == 0:
            new_eps = eps * factor
        else:
            new_eps = eps / factor
        warnings.warn('{0} clusters at eps={1:.4g}, retrying at {2:.4g}'
                      .format(labeling.n_clusters, eps, new_eps),
                      ClusterRelaxationWarning)
        eps = new_eps
    raise NoClustersError('no radius gave two clusters among {0} features '
                          'after {1} attempts (last eps={2:.4g}, '
                          'min_samples={3})'.format(len(features), attempts,
                                                    eps, labeling.min_samples))


def init_memory_from_clusters(features, labeling, **kwargs):
    """
    Prototype memory initialized with the normalized mean feature of every
    cluster; outliers are ignored.

    Parameters
    ----------
    features : `~numpy.ndarray`
        Features of shape ``(N, d)``.
    labeling : `~colorprompt.PseudoLabeling`
    kwargs : dict
        Passed on to `~colorprompt.PrototypeMemory`.

    Raises
    ------
    `~colorprompt.NoClustersError`
        If every sample is an outlier.
    """
    features = np.asarray(features, dtype=np.float64)
    if labeling.n_clusters == 0:
        raise NoClustersError('no cluster to initialize the memory from; '
                              'loosen the clustering radius')
    centers = np.array([features[labeling.labels == k].mean(axis=0)
                        for k in range(labeling.n_clusters)])
    return PrototypeMemory(_unit_rows(centers), **kwargs)


def combined_objective(original_losses, twin_losses, lam):
    r"""
    Combined objective over originals and their transferred twins,

    .. math::

        \mathcal{L} = \sum_i (1 - \lambda)\,\mathcal{L}(f_i) +
        \lambda\,\mathcal{L}(\hat{f}_i).

    ``lam = 0`` keeps only the original images, ``lam = 1`` only the
    transferred ones.
    """
    if not 0 <= lam <= 1:
        raise ValueError('lam must lie in [0, 1], got {0}'.format(lam))
    total = (1 - lam) * np.sum(original_losses)
    if twin_losses is not None and len(twin_losses):
        total = total + lam * np.sum(twin_losses)
    return float(total)


def embed_batch_loss(embed, memory, images, labels, twins=None,
                     twin_index=None, lam=None, params=None):
    """
    Batch objective of the embedding model and its analytic gradient.

    Originals with a twin enter with weight ``1 - lam`` and their twins with
    weight ``lam``; originals without a twin keep weight one.

    Parameters
    ----------
    embed : `~colorprompt.EmbedNet`
    memory : `~colorprompt.PrototypeMemory`
    images : list of `~numpy.ndarray`
        Original images of the batch.
    labels : array-like
        (Pseudo-)labels of the originals.
    twins : list of `~numpy.ndarray`, optional
        Transferred images; `None` trains on the originals alone.
    twin_index : array-like, optional
        Index of the original behind every twin; default is one twin per
        original, in order. Twins share the label of their original.
    lam : float, optional
        Twin weight. Default is ``conf.lam``.
    params : list of `~numpy.ndarray`, optional
        Parameters to evaluate at instead of the network's own.

    Returns
    -------
    result : dict
        ``loss``, ``original_term``, ``twin_term``, ``grads``, and the
        ``features`` and ``feature_labels`` used for the memory update.
    """
    mlp = embed.mlp if params is None else MLP.from_parameters(params)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    lam = conf.lam if lam is None else lam
    if not 0 <= lam <= 1:
        raise ValueError('lam must lie in [0, 1], got {0}'.format(lam))
    use_twins = twins is not None and len(twins) > 0 and lam > 0
    weights = np.ones(n)
    if use_twins:
        twin_index = np.arange(n) if twin_index is None else np.asarray(
            twin_index, dtype=int)
        if len(twin_index) != len(twins):
            raise ValueError('{0} twins but {1} twin indices'.format(
                len(twins), len(twin_index)))
        weights[twin_index] = 1 - lam
        weights = np.concatenate([weights, np.full(len(twins), lam)])
        batch = list(images) + list(twins)
        all_labels = np.concatenate([labels, labels[twin_index]])
    else:
        batch = list(images)
        all_labels = labels

    features, cache = embed.forward(batch, mlp=mlp, cache=True)
    losses, grads_f = contrastive_batch(features, memory, all_labels)
    grads = embed.backward(cache, grads_f * weights[:, None], mlp=mlp)
    return {'loss': float(np.sum(weights * losses)),
            'original_term': float(np.sum(losses[:n])),
            'twin_term': float(np.sum(losses[n:])),
            'grads': grads, 'features': features,
            'feature_labels': all_labels}


def embed_train_step(embed, memory, images, labels, lr=None, twins=None,
                     twin_index=None, lam=None):
    """
    One optimization step of the embedding model followed by the memory
    update with the features of the originals and of the twins.

    Returns
    -------
    embed : `~colorprompt.EmbedNet`
        Updated copy.
    memory : `~colorprompt.PrototypeMemory`
        Updated copy.
    result : dict
        Output of `embed_batch_loss` (without gradients).
    """
    lr = conf.embed_lr if lr is None else lr
    result = embed_batch_loss(embed, memory, images, labels, twins,
                              twin_index, lam)
    grads = result.pop('grads')
    if not np.isfinite(result['loss']) or not all(np.all(np.isfinite(g))
                                                  for g in grads):
        raise TrainingError('embedding step produced a non-finite loss ({0}) '
                            'on a batch of {1} images'.format(result['loss'],
                                                              len(images)))
    updated = embed.copy()
    updated.mlp = MLP.from_parameters(
        updated.optimizer.step(updated.mlp.parameters(), grads, lr))
    memory = memory_update(memory, result['features'],
                           result['feature_labels'])
    return updated, memory, result


def _valid_gallery(query_id, query_camera, gallery_ids, gallery_cameras):
    # unknown cameras never trigger the same-camera exclusion
    if query_camera is None:
        return np.ones(len(gallery_ids), dtype=bool)
    same_camera = np.array([c is not None and c == query_camera
                            for c in gallery_cameras], dtype=bool)
    return ~((gallery_ids == query_id) & same_camera)


def _cameras(cameras, n):
    return [None] * n if cameras is None else list(cameras)


def retrieval_metrics(query_features, gallery_features, query_ids,
                      gallery_ids, query_cameras=None, gallery_cameras=None):
    """
    Mean average precision and rank-1 accuracy of cosine-similarity
    retrieval.

    Gallery entries that share both identity and camera with the query are
    excluded for that query. Ties are broken by gallery order.

    Parameters
    ----------
    query_features, gallery_features : `~numpy.ndarray`
        Features of shape ``(N_q, d)`` and ``(N_g, d)``; any positive scale.
    query_ids, gallery_ids : array-like
        Identity labels.
    query_cameras, gallery_cameras : array-like, optional
        Camera labels; `None` entries never trigger the exclusion.

    Returns
    -------
    mAP : float
    rank1 : float
        Both `nan` if no query has a valid positive.
    """
    sims = _unit_rows(query_features) @ _unit_rows(gallery_features).T
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    query_cameras = _cameras(query_cameras, len(query_ids))
    gallery_cameras = _cameras(gallery_cameras, len(gallery_ids))

    aps, hits, invalid = [], [], 0
    for q, qid in enumerate(query_ids):
        valid = _valid_gallery(qid, query_cameras[q], gallery_ids,
                               gallery_cameras)
        order = np.argsort(-sims[q, valid], kind='stable')
        matches = gallery_ids[valid][order] == qid
        if not np.any(matches):
            invalid += 1
            continue
        hits.append(float(matches[0]))
        positions = np.flatnonzero(matches)
        aps.append(np.mean(np.arange(1, len(positions) + 1) / (positions + 1)))

    if invalid:
        warnings.warn('{0} of {1} queries have no valid positive in the '
                      'gallery and were left out'.format(invalid,
                                                         len(query_ids)),
                      NoValidPositivesWarning)
    if not aps:
        return float('nan'), float('nan')
    return float(np.mean(aps)), float(np.mean(hits))


def random_rank1(query_ids, gallery_ids, query_cameras=None,
                 gallery_cameras=None):
    """
    Expected rank-1 accuracy of a uniformly random ranking under the same
    exclusion rule as `retrieval_metrics`.
    """
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    query_cameras = _cameras(query_cameras, len(query_ids))
    gallery_cameras = _cameras(gallery_cameras, len(gallery_ids))
    chances = []
    for q, qid in enumerate(query_ids):
        valid = _valid_gallery(qid, query_cameras[q], gallery_ids,
                               gallery_cameras)
        positives = np.count_nonzero(gallery_ids[valid] == qid)
        if positives:
            chances.append(positives / np.count_nonzero(valid))
    return float(np.mean(chances)) if chances else float('nan')


def evaluate_retrieval(embed, query, gallery):
    """
    Embed labeled query and gallery samples and score the retrieval.

    Parameters
    ----------
    embed : `~colorprompt.EmbedNet`
    query, gallery : list of `~colorprompt.Sample`
        Samples with identities (and optionally cameras).

    Returns
    -------
    mAP : float
    rank1 : float
    """
    def unpack(samples):
        return (embed.embed([s.image for s in samples]),
                [s.identity for s in samples], [s.camera for s in samples])

    qf, qids, qcams = unpack(query)
    gf, gids, gcams = unpack(gallery)
    return retrieval_metrics(qf, gf, qids, gids, qcams, gcams)


def embed_save(embed, path, meta=None):
    """
    Write an embedding checkpoint to a versioned FITS container.
    """
    write_networks(path, 'EMBED', [('embed', embed.mlp)], embed.grid,
                   embed.mlp.layer_sizes, meta=meta)


def embed_load(path):
    """
    Read an embedding checkpoint written by `embed_save`.
    """
    info, entries = read_networks(path, 'EMBED')
    if len(entries) != 1:
        raise ValueError('{0} holds {1} networks, expected one'
                         .format(path, len(entries)))
    return EmbedNet(entries[0][1], info['grid'])
