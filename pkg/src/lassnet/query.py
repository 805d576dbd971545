"""Text and tag query encoders producing the conditioning embedding."""

from __future__ import annotations

import logging
import unicodedata
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ops

log = logging.getLogger(__name__)

PAD, SOS, UNK = "<pad>", "<sos>", "<unk>"
RESERVED = (PAD, SOS, UNK)
PAD_ID, SOS_ID, UNK_ID = 0, 1, 2


class Vocabulary:
    def __init__(self, tokens=()):
        self.tokens = list(RESERVED)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token):
        return self.index.get(token, UNK_ID)

    @classmethod
    def from_corpus(cls, texts):
        words = sorted({w for text in texts for w in normalize(text).split()})
        return cls(w for w in words if w not in RESERVED)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def normalize(text):
    """Lower-case and drop every Unicode punctuation character (category P*)."""
    text = text.lower()
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def tokenize(text, vocab):
    """Word-level ids with a leading <sos>; out-of-vocabulary words map to <unk>."""
    return [SOS_ID] + [vocab.id(w) for w in normalize(text).split()]


def detokenize(ids, vocab):
    return " ".join(vocab.tokens[i] for i in ids if i not in (PAD_ID, SOS_ID))


@dataclass
class QueryConfig:
    vocab_size: int = 0
    d_model: int = 64
    n_blocks: int = 2
    heads: int = 4
    d_ff: int = 256
    max_len: int = 32
    d_q: int = 64

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @classmethod
    def paper(cls, vocab_size):
        return cls(vocab_size=vocab_size, d_model=256, n_blocks=4, heads=4, d_ff=1024, d_q=256)

    def to_dict(self):
        return asdict(self)


def init_transformer_block(store, prefix, d_model, d_ff):
    for name in ("query", "key", "value", "out"):
        store.linear(f"{prefix}/attn/{name}", d_model, d_model)
    store.layer_norm(f"{prefix}/ln1", d_model)
    store.linear(f"{prefix}/ff1", d_model, d_ff)
    store.linear(f"{prefix}/ff2", d_ff, d_model)
    store.layer_norm(f"{prefix}/ln2", d_model)


def _lin(x, p, prefix):
    return ops.linear(x, p[f"{prefix}/weight"], p[f"{prefix}/bias"])


def attention_context(x, p, prefix, heads, key_mask=None):
    """Bidirectional multi-head attention before the output projection.

    ``key_mask`` is a boolean [N, L] array; False keys get zero weight.
    """
    n, length, d = x.shape
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

    q = split(_lin(x, p, f"{prefix}/attn/query"))
    k = split(_lin(x, p, f"{prefix}/attn/key"))
    v = split(_lin(x, p, f"{prefix}/attn/value"))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
    weights = ops.softmax(scores, axis=-1, mask=mask)
    ctx = ops.matmul(weights, v)
    return ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n, length, d))


def transformer_block(x, p, prefix, heads, key_mask=None):
    """Post-norm encoder block: attention and feed-forward sublayers with residuals."""
    ctx = _lin(attention_context(x, p, prefix, heads, key_mask), p, f"{prefix}/attn/out")
    x = ops.layer_norm(ops.add(x, ctx), p[f"{prefix}/ln1/gamma"], p[f"{prefix}/ln1/beta"])
    ff = _lin(ops.gelu(_lin(x, p, f"{prefix}/ff1")), p, f"{prefix}/ff2")
    return ops.layer_norm(ops.add(x, ff), p[f"{prefix}/ln2/gamma"], p[f"{prefix}/ln2/beta"])


class QueryEncoder:
    """Tiny transformer text encoder; the embedding is ReLU(FC(e_1)) at the <sos> slot."""

    kind = "text"

    def __init__(self, config, store, prefix="query"):
        self.config = config
        self.store = store
        self.prefix = prefix
        c = config
        store.add(f"{prefix}/token_embedding", store.rng.normal(0.0, 0.02, (c.vocab_size, c.d_model)))
        store.add(f"{prefix}/position_embedding", store.rng.normal(0.0, 0.02, (c.max_len, c.d_model)))
        store.layer_norm(f"{prefix}/embed_ln", c.d_model)
        for b in range(c.n_blocks):
            init_transformer_block(store, f"{prefix}/block{b}", c.d_model, c.d_ff)
        store.linear(f"{prefix}/head", c.d_model, c.d_q)

    @property
    def out_dim(self):
        return self.config.d_q

    def batch_ids(self, sequences):
        """Pad token sequences into an id matrix and a key mask."""
        c = self.config
        seqs = []
        for seq in sequences:
            seq = list(seq)
            if not seq:
                seq = [SOS_ID]
            if len(seq) > c.max_len:
                log.warning("query of %d tokens truncated to %d", len(seq), c.max_len)
                seq = seq[: c.max_len]
            if max(seq) >= c.vocab_size or min(seq) < 0:
                raise IndexError(f"token id {max(seq)} outside vocabulary of size {c.vocab_size}")
            seqs.append(seq)
        length = max(len(s) for s in seqs)
        ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(seqs), length), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
        return ids, mask

    def __call__(self, sequences):
        return self.encode(sequences)

    def encode(self, sequences):
        p, c, pre = self.store, self.config, self.prefix
        ids, mask = self.batch_ids(sequences)
        n, length = ids.shape
        x = ops.embedding(ids, p[f"{pre}/token_embedding"])
        x = ops.add(x, ops.getitem(p[f"{pre}/position_embedding"], slice(0, length)))
        x = ops.layer_norm(x, p[f"{pre}/embed_ln/gamma"], p[f"{pre}/embed_ln/beta"])
        for b in range(c.n_blocks):
            x = transformer_block(x, p, f"{pre}/block{b}", c.heads, mask)
        first = ops.getitem(x, (slice(None), 0))
        return ops.relu(_lin(first, p, f"{pre}/head"))


class TagEncoder:
    """Baseline query network: one FC+ReLU layer over a multi-hot tag vector."""

    kind = "tags"

    def __init__(self, tag_names, d_q, store, prefix="query"):
        self.tag_names = list(tag_names)
        self.d_q = d_q
        self.store = store
        self.prefix = prefix
        store.linear(f"{prefix}/tags", len(self.tag_names), d_q)

    @property
    def out_dim(self):
        return self.d_q

    def multi_hot(self, tag_sets):
        out = np.zeros((len(tag_sets), len(self.tag_names)), dtype=self.store.dtype)
        for i, tags in enumerate(tag_sets):
            for t in tags:
                if t not in self.tag_names:
                    raise KeyError(f"unknown tag {t!r}; known tags: {', '.join(self.tag_names)}")
                out[i, self.tag_names.index(t)] = 1.0
        return out

    def __call__(self, vectors):
        return self.encode(vectors)

    def encode(self, vectors):
        vectors = np.asarray(vectors, dtype=self.store.dtype)
        if vectors.ndim != 2 or vectors.shape[1] != len(self.tag_names):
            raise ValueError(f"multi-hot input must be [N, {len(self.tag_names)}], got {vectors.shape}")
        return ops.relu(_lin(vectors, self.store, f"{self.prefix}/tags"))
