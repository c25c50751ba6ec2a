"""
Dense tensors with tape-based reverse-mode automatic differentiation.

Operations executed while a Tape is active (``with Tape():``) are recorded
in execution order whenever one of their inputs requires a gradient.
``backward(loss)`` walks that record once, in reverse, and accumulates exact
gradients into the ``grad`` field of every leaf tensor that requires one.
Outside a tape nothing is recorded, which is what evaluation and finite
difference checks want.
"""

import contextlib
import logging

import numpy as np
from scipy import special

from mltrain.errors import ConfigError, ContractError, NumericError, ShapeError, TokenIndexError

logger = logging.getLogger(__name__)

# float widths a Tensor may be created with
PRECISIONS = {32: np.float32, 64: np.float64}

# fill value for masked attention scores, large enough to vanish under exp() but finite
MASK_VALUE = -1e9

_state = {'dtype': np.float32}
_tapes = []


def set_precision(bits):
    if bits not in PRECISIONS:
        raise ConfigError('precision must be one of %s, got %r' % (sorted(PRECISIONS), bits))
    _state['dtype'] = PRECISIONS[bits]
    logger.debug('default tensor precision set to %d-bit', bits)


def get_dtype():
    return _state['dtype']


@contextlib.contextmanager
def precision(bits):
    """ Temporarily switch the float width of newly created tensors.
    Args:
        bits (int): 32 for training, 64 for gradient-check mode.
    """
    previous = _state['dtype']
    set_precision(bits)
    try:
        yield
    finally:
        _state['dtype'] = previous


class Tape:
    """
    Ordered record of executed primitives. Each entry holds the output
    tensor, the input tensors and the closure mapping the output gradient
    to input gradients.
    """
    def __init__(self):
        self.records = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc_info):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output, inputs, backward_fn):
        self.records.append((output, inputs, backward_fn))


def active_tape():
    return _tapes[-1] if _tapes else None


class Tensor:
    # @data: array-like; float ndarrays are wrapped without copying, anything else
    #        is converted to the current default precision
    # @requires_grad: whether backward() should accumulate into self.grad
    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._leaf = True
        self._tape = None

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s, requires_grad=%s)' % (self.shape, self.dtype, self.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=get_dtype()))


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(data, inputs, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        out._tape = tape
        tape.record(out, inputs, backward_fn)
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn)


def scale(a, factor):
    factor = a.dtype.type(factor)

    def backward_fn(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), backward_fn)


def total(a):
    # sum of every element, as a scalar tensor
    def backward_fn(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward_fn)


def matmul(a, b):
    """ Matrix product over the last two axes, batched over leading axes.
    Args:
        a (Tensor): [..., m, k]
        b (Tensor): [..., k, n]
    Returns:
        Tensor [..., m, n]
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul: cannot multiply %s by %s' % (a.shape, b.shape))

    def backward_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward_fn)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward_fn)


def reshape(a, shape):
    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward_fn)


def embedding(table, ids):
    """ Row lookup ``table[ids]``; the backward pass scatter-adds into the table.
    Args:
        table (Tensor): [V, d]
        ids (ndarray of int): any shape, every entry in [0, V)
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenIndexError('token id out of range [0, %d): min %d, max %d'
                              % (table.shape[0], ids.min(), ids.max()))

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(table.data[ids], (table,), backward_fn)


def masked_fill(a, mask, value=MASK_VALUE):
    mask = np.asarray(mask, dtype=bool)

    def backward_fn(g):
        g = g.copy()
        np.putmask(g, np.broadcast_to(mask, g.shape), 0)
        return (g,)

    out = a.data.copy()
    np.putmask(out, np.broadcast_to(mask, out.shape), value)
    return _result(out, (a,), backward_fn)


def softmax_rows(a):
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError('softmax_rows: last extent must be >= 1, got shape %s' % (a.shape,))
    if not np.all(np.isfinite(a.data)):
        raise NumericError('softmax_rows: non-finite input')
    # scipy subtracts the per-slice max before exponentiating
    y = special.softmax(a.data, axis=-1)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward_fn)


def layer_norm(x, eps):
    # normalization only, there is no gain or bias
    if eps <= 0:
        raise ConfigError('layer_norm: eps must be positive, got %r' % (eps,))
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1 / np.sqrt(variance + x.dtype.type(eps))
    normed = centered * inv_std

    def backward_fn(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        proj = (g * normed).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - normed * proj),)

    return _result(normed, (x,), backward_fn)


def gelu(x):
    # exact form x * Phi(x)
    kind = x.dtype.type
    cdf = kind(0.5) * (1 + special.erf(x.data * kind(1 / np.sqrt(2))))

    def backward_fn(g):
        pdf = np.exp(kind(-0.5) * x.data * x.data) * kind(1 / np.sqrt(2 * np.pi))
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward_fn)


def cross_entropy(logits, targets):
    """ Mean negative log-likelihood of the targets.
    Args:
        logits (Tensor): [..., V]
        targets (ndarray of int): shape logits.shape[:-1]
    Returns:
        scalar Tensor
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError('cross_entropy: targets %s do not match logits %s' % (targets.shape, logits.shape))
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError('cross_entropy: target id out of range [0, %d)' % vocab)
    log_probs = special.log_softmax(logits.data, axis=-1)
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    count = picked.size
    loss = np.asarray(-picked.mean(), dtype=logits.dtype)

    def backward_fn(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1, axis=-1)
        return (grad * (g / count),)

    return _result(loss, (logits,), backward_fn)


def backward(loss):
    """ Reverse-mode sweep over the tape that produced ``loss``.
    Gradients are added to the ``grad`` of every leaf that requires one;
    calling it again without zeroing adds the same gradients a second time.
    """
    if loss.size != 1:
        raise ContractError('backward: loss must be a scalar, got shape %s' % (loss.shape,))
    if loss._tape is None:
        raise ContractError('backward: loss was not produced on an active tape')

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for output, inputs, backward_fn in reversed(loss._tape.records):
        g = grads.pop(id(output), None)
        if g is None:
            continue
        for tensor, grad in zip(inputs, backward_fn(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if tensor._leaf:
                leaves[key] = tensor
            grads[key] = grads[key] + grad if key in grads else grad

    for key, tensor in leaves.items():
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        tensor.grad += grads[key]
