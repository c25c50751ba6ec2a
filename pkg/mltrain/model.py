"""
Pre-LN transformer decoder read as an explicit Euler scheme: block t maps
x to x + F(x, theta_t) with
    F(x) = SA(LN(x)) + FF(LN(x + SA(LN(x)))).

Blocks carry no biases and LayerNorm carries no gain or bias, so a block
holds exactly 12 d^2 parameters. The token embedding doubles as the output
projection.
"""

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np

from mltrain import tensor as T
from mltrain.errors import ConfigError, InputError
from mltrain.tensor import Tensor

logger = logging.getLogger(__name__)

# width of the feed-forward hidden layer in units of embed_dim
FF_MULTIPLIER = 4

# LayerNorm epsilon
LN_EPS = 1e-5

# std of every initial weight
INIT_STD = 0.02

# names of the per-block matrices, in declaration (and checkpoint) order
BLOCK_FIELDS = ('w_q', 'w_k', 'w_v', 'w_o', 'w_ff1', 'w_ff2')


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int
    embed_dim: int
    num_blocks: int
    num_heads: int
    ff_multiplier: int = FF_MULTIPLIER
    ln_eps: float = LN_EPS

    def validate(self):
        for name in ('vocab_size', 'context_length', 'embed_dim', 'num_blocks', 'num_heads', 'ff_multiplier'):
            if getattr(self, name) < 1:
                raise ConfigError('%s must be >= 1, got %r' % (name, getattr(self, name)))
        if self.embed_dim % self.num_heads:
            raise ConfigError('embed_dim %d is not divisible by num_heads %d' % (self.embed_dim, self.num_heads))
        if self.ln_eps <= 0:
            raise ConfigError('ln_eps must be positive, got %r' % (self.ln_eps,))
        return self

    def coarse(self):
        # the configuration of a coarse model: every second block
        if self.num_blocks % 2:
            raise ConfigError('num_blocks must be even to build coarse models, got %d' % self.num_blocks)
        return replace(self, num_blocks=self.num_blocks // 2)

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def ff_dim(self):
        return self.ff_multiplier * self.embed_dim


@dataclass
class BlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_ff1: Tensor
    w_ff2: Tensor

    def named_tensors(self):
        return [(name, getattr(self, name)) for name in BLOCK_FIELDS]

    def tensors(self):
        return [getattr(self, name) for name in BLOCK_FIELDS]

    def count(self):
        return sum(t.size for t in self.tensors())

    def copy(self):
        # detached deep copy, no gradients
        return BlockParams(*[Tensor(t.data.copy()) for t in self.tensors()])


@dataclass
class ModelParams:
    config: ModelConfig
    token_embedding: Tensor
    position_embedding: Tensor
    blocks: List[BlockParams] = field(default_factory=list)

    def named_parameters(self):
        named = [('token_embedding', self.token_embedding), ('position_embedding', self.position_embedding)]
        for i, block in enumerate(self.blocks):
            named.extend(('blocks.%d.%s' % (i, name), t) for name, t in block.named_tensors())
        return named

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def count(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def clone(self):
        return copy.deepcopy(self)


def param_count(config):
    d = config.embed_dim
    per_block = (4 + 2 * config.ff_multiplier) * d * d
    return config.vocab_size * d + config.context_length * d + config.num_blocks * per_block


def init_params(config, seed):
    """ Seeded initialization: every weight ~ N(0, INIT_STD^2), with the two
    matrices that write into the residual stream (w_o, w_ff2) further scaled
    by 1/sqrt(2N).
    Args:
        config (ModelConfig): architecture
        seed (int): generator seed; equal seeds give bitwise-equal parameters
    Returns:
        ModelParams in the current default precision
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = T.get_dtype()
    d, f = config.embed_dim, config.ff_dim
    residual_std = INIT_STD / np.sqrt(2 * config.num_blocks)

    def normal(shape, std=INIT_STD):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    token_embedding = normal((config.vocab_size, d))
    position_embedding = normal((config.context_length, d))
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(BlockParams(w_q=normal((d, d)),
                                  w_k=normal((d, d)),
                                  w_v=normal((d, d)),
                                  w_o=normal((d, d), residual_std),
                                  w_ff1=normal((d, f)),
                                  w_ff2=normal((f, d), residual_std)))
    params = ModelParams(config, token_embedding, position_embedding, blocks)
    logger.debug('initialized %d parameters (seed %d)', params.count(), seed)
    return params


def causal_self_attention(h, block, num_heads):
    batch, length, dim = h.shape
    head_dim = dim // num_heads

    def split_heads(x):
        return T.transpose(T.reshape(x, (batch, length, num_heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(T.matmul(h, block.w_q))
    k = split_heads(T.matmul(h, block.w_k))
    v = split_heads(T.matmul(h, block.w_v))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1 / np.sqrt(head_dim))
    # position t sees positions <= t only
    future = np.triu(np.ones((length, length), dtype=bool), k=1)
    weights = T.softmax_rows(T.masked_fill(scores, future))
    out = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
    return T.matmul(T.reshape(out, (batch, length, dim)), block.w_o)


def feed_forward(h, block):
    return T.matmul(T.gelu(T.matmul(h, block.w_ff1)), block.w_ff2)


def block_forward(x, block, config):
    # one Euler step of the residual ODE
    x = T.add(x, causal_self_attention(T.layer_norm(x, config.ln_eps), block, config.num_heads))
    return T.add(x, feed_forward(T.layer_norm(x, config.ln_eps), block))


def forward(params, tokens):
    """ Logits for every position of ``tokens``.
    Args:
        params: ModelParams, or anything exposing the same fields (a CoarseView)
        tokens: int ids of shape [T] or [B, T], T <= context_length
    Returns:
        Tensor of logits, [T, V] or [B, T, V]
    """
    config = params.config
    tokens = np.asarray(tokens)
    unbatched = tokens.ndim == 1
    tokens = np.atleast_2d(tokens)
    batch, length = tokens.shape
    if length > config.context_length:
        raise InputError('sequence length %d exceeds context length %d' % (length, config.context_length))
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError('token ids must lie in [0, %d), got range [%d, %d]'
                         % (config.vocab_size, tokens.min(), tokens.max()))

    x = T.add(T.embedding(params.token_embedding, tokens),
              T.embedding(params.position_embedding, np.arange(length)))
    for block in params.blocks:
        x = block_forward(x, block, config)
    x = T.layer_norm(x, config.ln_eps)
    logits = T.matmul(x, T.transpose(params.token_embedding, (1, 0)))
    if unbatched:
        logits = T.reshape(logits, (length, config.vocab_size))
    return logits


def loss(params, inputs, targets):
    return T.cross_entropy(forward(params, inputs), targets)
