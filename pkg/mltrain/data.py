"""
Corpus ingestion and deterministic batching.

Every level of a multilevel run draws its batches from a BatchCursor, a
seeded generator of window offsets into one token stream. The sequence of
batches is a pure function of (seed, corpus, micro-batch size, sequence
length).
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from mltrain.errors import InputError, TokenIndexError

logger = logging.getLogger(__name__)

# pre-tokenized file header: magic, version, vocab_size, count
TOKEN_FILE_MAGIC = b'MLTK'
TOKEN_FILE_VERSION = 1
TOKEN_FILE_HEADER = '<4sIII'

# vocabulary of the default tokenizer
BYTE_VOCAB_SIZE = 256


class Tokenizer:
    """
    Interface of a tokenizer: text bytes in, integer ids out.
    """
    vocab_size = None

    def encode(self, text):
        raise NotImplementedError

    def decode(self, ids):
        raise NotImplementedError


class ByteTokenizer(Tokenizer):
    # every byte is its own token
    vocab_size = BYTE_VOCAB_SIZE

    def encode(self, text):
        if isinstance(text, str):
            text = text.encode('utf-8')
        return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)

    def decode(self, ids):
        return np.asarray(ids, dtype=np.uint8).tobytes()


@dataclass
class TokenStream:
    ids: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocab_size):
            raise TokenIndexError('token ids must lie in [0, %d)' % self.vocab_size)

    def __len__(self):
        return len(self.ids)


def tokenize(text, tokenizer=None):
    tokenizer = tokenizer or ByteTokenizer()
    ids = tokenizer.encode(text)
    if len(ids) == 0:
        raise InputError('cannot tokenize an empty corpus')
    return TokenStream(ids, tokenizer.vocab_size)


def detokenize(stream, tokenizer=None):
    tokenizer = tokenizer or ByteTokenizer()
    return tokenizer.decode(stream.ids)


def load_corpus(path, tokenizer=None):
    with open(path, 'rb') as f:
        raw = f.read()
    stream = tokenize(raw, tokenizer)
    logger.info('loaded %s: %d tokens', path, len(stream))
    return stream


def write_token_file(stream, path):
    with open(path, 'wb') as f:
        f.write(struct.pack(TOKEN_FILE_HEADER, TOKEN_FILE_MAGIC, TOKEN_FILE_VERSION, stream.vocab_size, len(stream)))
        stream.ids.astype('<u4').tofile(f)


def load_token_file(path):
    """ Read a pre-tokenized file (16-byte header, then uint32 ids), e.g. GPT-2 BPE ids.
    Returns:
        TokenStream
    """
    size = struct.calcsize(TOKEN_FILE_HEADER)
    with open(path, 'rb') as f:
        raw = f.read(size)
        if len(raw) != size:
            raise InputError('%s: truncated token file header' % path)
        magic, version, vocab_size, count = struct.unpack(TOKEN_FILE_HEADER, raw)
        if magic != TOKEN_FILE_MAGIC or version != TOKEN_FILE_VERSION:
            raise InputError('%s: not a version-%d token file' % (path, TOKEN_FILE_VERSION))
        ids = np.fromfile(f, dtype='<u4', count=count)
    if ids.size != count:
        raise InputError('%s: expected %d tokens, found %d' % (path, count, ids.size))
    if count == 0:
        raise InputError('%s: empty token file' % path)
    logger.info('loaded %s: %d tokens, vocab %d', path, count, vocab_size)
    return TokenStream(ids.astype(np.int64), vocab_size)


@dataclass
class BatchCursor:
    # @seed: seed of the offset generator
    # @micro_batch_size: sequences per batch
    # @sequence_length: tokens per sequence
    seed: int
    micro_batch_size: int
    sequence_length: int
    position: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)


def next_batch(cursor, stream):
    """ Draw the next batch: offsets are uniform with replacement over all valid windows.
    Returns:
        tuple of (inputs, targets), both int arrays [B, S]
    """
    length = cursor.sequence_length
    if len(stream) <= length + 1:
        raise InputError('token stream of %d ids is too short for sequences of %d' % (len(stream), length))
    offsets = cursor.rng.integers(0, len(stream) - length, size=cursor.micro_batch_size)
    rows = offsets[:, None] + np.arange(length)[None, :]
    cursor.position += 1
    return stream.ids[rows], stream.ids[rows + 1]


def next_micro_batches(cursor, stream, count):
    # the micro-batches of one optimization step
    return [next_batch(cursor, stream) for _ in range(count)]


def tokens_per_step(micro_batch_size, sequence_length, accumulation_factor):
    return micro_batch_size * sequence_length * accumulation_factor


class BatchStream:
    """
    Hands out the micro-batches of each optimization step, for any level.

    With coarse_data='shared' every step of every level pulls the next
    batches from the one fine cursor. With coarse_data='replay' each coarse
    level owns a cursor seeded like the fine one, so it walks through the
    exact batch sequence the fine level sees, in the same order.
    """
    MODES = ('shared', 'replay')

    def __init__(self, stream, seed, micro_batch_size, sequence_length, accumulation_factor, coarse_data='shared'):
        if coarse_data not in self.MODES:
            raise InputError('coarse_data must be one of %s, got %r' % (self.MODES, coarse_data))
        self.stream = stream
        self.seed = seed
        self.micro_batch_size = micro_batch_size
        self.sequence_length = sequence_length
        self.accumulation_factor = accumulation_factor
        self.coarse_data = coarse_data
        self.cursors = {'FINE': BatchCursor(seed, micro_batch_size, sequence_length)}

    @property
    def tokens_per_step(self):
        return tokens_per_step(self.micro_batch_size, self.sequence_length, self.accumulation_factor)

    def cursor(self, level):
        if level == 'FINE' or self.coarse_data == 'shared':
            return self.cursors['FINE']
        if level not in self.cursors:
            self.cursors[level] = BatchCursor(self.seed, self.micro_batch_size, self.sequence_length)
        return self.cursors[level]

    def step_batches(self, level='FINE'):
        return next_micro_batches(self.cursor(level), self.stream, self.accumulation_factor)
