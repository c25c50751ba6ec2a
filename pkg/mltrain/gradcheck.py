"""
Central finite-difference checks of the reverse-mode gradients, in 64-bit.
"""

import logging

import numpy as np
from tqdm import tqdm

from mltrain import tensor as T
from mltrain.model import ModelConfig, init_params, loss as model_loss

logger = logging.getLogger(__name__)

# model checked by the suite
GRADCHECK_CONFIG = ModelConfig(vocab_size=16, context_length=8, embed_dim=8, num_blocks=2, num_heads=2)

# central difference step
STEP = 1e-5

# largest accepted relative error
TOLERANCE = 1e-4

# std of the random weights the model is checked at; the 0.02 init scale
# leaves some gradients too small to compare against finite differences
WEIGHT_STD = 0.5


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(f, array, h=STEP):
    """ Central differences of the scalar function f() with respect to every entry of array.
    Args:
        f: callable returning a float; it must read array in place
        array (ndarray): perturbed in place and restored
        h (float): step
    """
    grad = np.zeros_like(array)
    for index in np.ndindex(*array.shape):
        saved = array[index]
        array[index] = saved + h
        f_plus = f()
        array[index] = saved - h
        f_minus = f()
        array[index] = saved
        grad[index] = (f_plus - f_minus) / (2 * h)
    return grad


def _check(build, inputs, h=STEP):
    # analytic vs numeric for every input of a scalar-valued graph
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with T.Tape():
        out = build()
    T.backward(out)
    return [relative_error(t.grad, numerical_gradient(lambda: build().item(), t.data, h)) for t in inputs]


def check_primitives(seed=0):
    """ Each primitive composed with a random linear read-out.
    Returns:
        dict of primitive name -> worst relative error
    """
    rng = np.random.default_rng(seed)
    errors = {}
    with T.precision(64):
        def readout(shape):
            return T.Tensor(rng.normal(size=shape))

        a, b = T.Tensor(rng.normal(size=(3, 4))), T.Tensor(rng.normal(size=(4, 2)))
        w = readout((3, 2))
        errors['matmul'] = max(_check(lambda: T.total(T.mul(T.matmul(a, b), w)), [a, b]))

        x = T.Tensor(rng.normal(size=(3, 5)))
        w = readout((3, 5))
        errors['softmax_rows'] = max(_check(lambda: T.total(T.mul(T.softmax_rows(x), w)), [x]))
        errors['layer_norm'] = max(_check(lambda: T.total(T.mul(T.layer_norm(x, 1e-5), w)), [x]))
        errors['gelu'] = max(_check(lambda: T.total(T.mul(T.gelu(x), w)), [x]))

        targets = rng.integers(0, 5, size=3)
        errors['cross_entropy'] = max(_check(lambda: T.cross_entropy(x, targets), [x]))
    return errors


def randomize(params, rng, std=WEIGHT_STD):
    for t in params.parameters():
        t.data[...] = rng.normal(0.0, std, size=t.shape)


def check_model_gradients(config=GRADCHECK_CONFIG, seed=0, batch_size=2, progress=False):
    """ Gradient of the mean next-token loss with respect to every parameter.
    Returns:
        dict of parameter path -> relative error
    """
    rng = np.random.default_rng(seed)
    with T.precision(64):
        params = init_params(config, seed)
        randomize(params, rng)
        tokens = rng.integers(0, config.vocab_size, size=(batch_size, config.context_length + 1))
        inputs, targets = tokens[:, :-1], tokens[:, 1:]

        params.zero_grad()
        with T.Tape():
            loss = model_loss(params, inputs, targets)
        T.backward(loss)

        def f():
            return model_loss(params, inputs, targets).item()

        errors = {}
        for path, t in tqdm(params.named_parameters(), desc='gradcheck', disable=not progress):
            errors[path] = relative_error(t.grad, numerical_gradient(f, t.data))
    return errors


def run_suite(progress=True):
    """ Primitives plus the full model.
    Returns:
        (dict of name -> relative error, passed)
    """
    errors = {'primitive.%s' % k: v for k, v in check_primitives().items()}
    errors.update(check_model_gradients(progress=progress))
    worst = max(errors, key=errors.get)
    passed = errors[worst] < TOLERANCE
    logger.info('gradient check: worst %s = %.3g (%s)', worst, errors[worst], 'ok' if passed else 'FAILED')
    return errors, passed
