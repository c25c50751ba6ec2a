"""
Binary checkpoints.

Layout: a fixed header (8-byte magic, uint32 version, then the integer
config fields and the float width as little-endian uint64), followed by
every parameter array, little-endian, in declaration order. A text manifest
``<path>.manifest`` sits next to it with the config, the eps and the seed.
"""

import logging
import os
import struct

import numpy as np

from mltrain.errors import InputError
from mltrain.model import BLOCK_FIELDS, BlockParams, ModelConfig, ModelParams
from mltrain.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b'MLTRCKPT'
VERSION = 1

# integer ModelConfig fields stored in the header, in order
HEADER_FIELDS = ('vocab_size', 'context_length', 'embed_dim', 'num_blocks', 'num_heads', 'ff_multiplier')
HEADER_FORMAT = '<8sI' + 'Q' * (len(HEADER_FIELDS) + 1)


def manifest_path(path):
    return str(path) + '.manifest'


def save_checkpoint(params, path, seed=None):
    config = params.config
    bits = params.token_embedding.dtype.itemsize * 8
    dtype = np.dtype('<f%d' % (bits // 8))
    header = struct.pack(HEADER_FORMAT, MAGIC, VERSION, *[getattr(config, f) for f in HEADER_FIELDS], bits)
    with open(path, 'wb') as f:
        f.write(header)
        for _, t in params.named_parameters():
            t.data.astype(dtype, copy=False).tofile(f)

    lines = ['%s = %s' % (name, getattr(config, name)) for name in HEADER_FIELDS]
    lines.append('ln_eps = %r' % config.ln_eps)
    lines.append('precision = %d' % bits)
    lines.append('parameter_count = %d' % params.count())
    if seed is not None:
        lines.append('seed = %d' % seed)
    with open(manifest_path(path), 'w') as f:
        f.write('\n'.join(lines) + '\n')
    logger.info('wrote checkpoint %s (%d parameters)', path, params.count())


def _read_manifest(path):
    values = {}
    if not os.path.exists(manifest_path(path)):
        return values
    with open(manifest_path(path)) as f:
        for line in f:
            if '=' in line:
                key, value = line.split('=', 1)
                values[key.strip()] = value.strip()
    return values


def load_checkpoint(path):
    """ Restore a checkpoint written by save_checkpoint.
    Returns:
        tuple of (ModelParams, manifest dict)
    """
    size = struct.calcsize(HEADER_FORMAT)
    with open(path, 'rb') as f:
        raw = f.read(size)
        if len(raw) != size:
            raise InputError('%s: truncated checkpoint header' % path)
        magic, version, *fields = struct.unpack(HEADER_FORMAT, raw)
        if magic != MAGIC or version != VERSION:
            raise InputError('%s: not a version-%d checkpoint' % (path, VERSION))
        *config_fields, bits = fields
        manifest = _read_manifest(path)
        config = ModelConfig(*config_fields, ln_eps=float(manifest.get('ln_eps', 1e-5)))
        dtype = np.dtype('<f%d' % (bits // 8))
        native = np.dtype('f%d' % (bits // 8))

        def read(shape):
            count = int(np.prod(shape))
            data = np.fromfile(f, dtype=dtype, count=count)
            if data.size != count:
                raise InputError('%s: truncated parameter data' % path)
            return Tensor(data.astype(native).reshape(shape), requires_grad=True)

        d, ff = config.embed_dim, config.ff_dim
        shapes = {'w_q': (d, d), 'w_k': (d, d), 'w_v': (d, d), 'w_o': (d, d), 'w_ff1': (d, ff), 'w_ff2': (ff, d)}
        token_embedding = read((config.vocab_size, d))
        position_embedding = read((config.context_length, d))
        blocks = [BlockParams(*[read(shapes[name]) for name in BLOCK_FIELDS]) for _ in range(config.num_blocks)]
    return ModelParams(config, token_embedding, position_embedding, blocks), manifest
