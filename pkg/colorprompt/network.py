# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Small fully-connected networks shared by the prompter and the embedding
model: grid mean pooling, dense layers with hand-written backpropagation,
and an adaptive moment optimizer.
"""
import numpy as np

from . import conf
from .exceptions import InvalidImageError, TrainingError

__all__ = ['DEFAULT_GRID', 'grid_pool', 'MLP', 'Adam',
           'finite_difference_gradient']

DEFAULT_GRID = (16, 8)


def _cell_matrix(n, cells):
    # row i averages the pixels falling into cell i; every cell keeps at
    # least one pixel, so images smaller than the grid are upsampled
    matrix = np.zeros((cells, n))
    for i in range(cells):
        lo = (i * n) // cells
        hi = max(lo + 1, ((i + 1) * n) // cells)
        matrix[i, lo:hi] = 1 / (hi - lo)
    return matrix


def grid_pool(images, grid=DEFAULT_GRID):
    """
    Mean-pool images onto a coarse grid and flatten.

    Parameters
    ----------
    images : `~numpy.ndarray` or list
        Stack of images with shape ``(N, H, W, 3)``, or a list of images
        that may differ in size.
    grid : tuple of int
        Grid height and width.

    Returns
    -------
    x : `~numpy.ndarray`
        Array of shape ``(N, grid[0] * grid[1] * 3)``.
    """
    if isinstance(images, (list, tuple)) and len(images) > 0 and \
            len({np.shape(img) for img in images}) > 1:
        return np.vstack([grid_pool(img, grid) for img in images])
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InvalidImageError('expected a stack of (H, W, 3) images, got '
                                'shape {0}'.format(images.shape))
    rows = _cell_matrix(images.shape[1], grid[0])
    cols = _cell_matrix(images.shape[2], grid[1])
    pooled = rows @ images.transpose(0, 3, 1, 2) @ cols.T
    return pooled.transpose(0, 2, 3, 1).reshape(len(images), -1)


class MLP(object):
    """
    Fully-connected network with ``max(0, x)`` between layers and an
    affine output layer.
    """
    def __init__(self, weights, biases):
        """
        Parameters
        ----------
        weights : list of `~numpy.ndarray`
            Weight matrices of shape ``(n_in, n_out)``.
        biases : list of `~numpy.ndarray`
            Bias vectors of shape ``(n_out,)``.
        """
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def initialize(cls, layer_sizes, rng, output_scale=1.0):
        """
        He-normal initialization with zero biases.

        Parameters
        ----------
        layer_sizes : list of int
            Input size followed by every layer's output size.
        rng : `~numpy.random.Generator`
            Seeded generator.
        output_scale : float
            Multiplier on the last layer's initial weights.
        """
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(rng.normal(0, np.sqrt(2 / n_in), size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        weights[-1] *= output_scale
        return cls(weights, biases)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self):
        """
        Flat list ``[W0, b0, W1, b1, ...]``.
        """
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    @classmethod
    def from_parameters(cls, params):
        return cls(params[0::2], params[1::2])

    def copy(self):
        return MLP([w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])

    def check_finite(self):
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise TrainingError('network weights contain non-finite '
                                    'values')

    def forward(self, x, cache=False):
        """
        Run the network.

        Parameters
        ----------
        x : `~numpy.ndarray`
            Inputs of shape ``(N, n_in)``.
        cache : bool
            Also return the intermediate values needed by `backward`.
        """
        inputs, pre_activations = [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre_activations.append(z)
            h = np.maximum(z, 0) if k < last else z
        if cache:
            return h, (inputs, pre_activations)
        return h

    def hidden(self, x):
        """
        Activations of the last hidden layer.
        """
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0)
        return h

    def backward(self, cache, grad_output):
        """
        Backpropagate ``grad_output`` (gradient of the loss with respect to
        the network output).

        Returns
        -------
        grads : list of `~numpy.ndarray`
            Gradients in the order of `parameters`.
        grad_input : `~numpy.ndarray`
            Gradient with respect to the network input.
        """
        inputs, pre_activations = cache
        grads = [None] * (2 * len(self.weights))
        g = grad_output
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                g = g * (pre_activations[k - 1] > 0)
        return grads, g


class Adam(object):
    """
    Adaptive moment estimation with bias-corrected moments.
    """
    def __init__(self, beta1=None, beta2=None, eps=None):
        self.beta1 = conf.adam_beta1 if beta1 is None else beta1
        self.beta2 = conf.adam_beta2 if beta2 is None else beta2
        self.eps = conf.adam_eps if eps is None else eps
        self.t = 0
        self.m = None
        self.v = None

    def copy(self):
        other = Adam(self.beta1, self.beta2, self.eps)
        other.t = self.t
        if self.m is not None:
            other.m = [m.copy() for m in self.m]
            other.v = [v.copy() for v in self.v]
        return other

    def step(self, params, grads, lr):
        """
        One update; returns new parameter arrays and leaves ``params``
        untouched.
        """
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        new_params = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g ** 2
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return new_params


def finite_difference_gradient(func, params, coordinates, h=1e-5):
    """
    Central finite differences of ``func`` at selected coordinates.

    Parameters
    ----------
    func : callable
        Maps a list of parameter arrays to a scalar.
    params : list of `~numpy.ndarray`
        Point at which to differentiate.
    coordinates : list of (int, int)
        Pairs ``(array index, flat index)`` to perturb.
    h : float
        Step size.

    Returns
    -------
    grad : `~numpy.ndarray`
        One derivative per coordinate.
    """
    params = [p.copy() for p in params]
    grad = np.zeros(len(coordinates))
    for n, (i, j) in enumerate(coordinates):
        original = params[i].flat[j]
        params[i].flat[j] = original + h
        f_plus = func(params)
        params[i].flat[j] = original - h
        f_minus = func(params)
        params[i].flat[j] = original
        grad[n] = (f_plus - f_minus) / (2 * h)
    return grad
