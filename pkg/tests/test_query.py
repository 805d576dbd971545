import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lassnet.autodiff import Tensor, check_gradients
from lassnet.params import ParamStore
from lassnet.query import (
    PAD_ID,
    SOS_ID,
    UNK_ID,
    QueryConfig,
    QueryEncoder,
    TagEncoder,
    Vocabulary,
    detokenize,
    normalize,
    tokenize,
)


@pytest.fixture
def vocab():
    return Vocabulary(["a", "barks", "dog", "sound"])


def test_reserved_ids(vocab):
    assert vocab.tokens[:3] == ["<pad>", "<sos>", "<unk>"]
    assert (PAD_ID, SOS_ID, UNK_ID) == (0, 1, 2)
    assert len(set(vocab.index.values())) == len(vocab)


def test_tokenize_examples(vocab):
    assert tokenize("Dog barks!", vocab) == [SOS_ID, vocab.id("dog"), vocab.id("barks")]
    assert tokenize("", vocab) == [SOS_ID]
    assert tokenize("a ZORP sound", vocab) == [SOS_ID, vocab.id("a"), UNK_ID, vocab.id("sound")]


def test_unicode_punctuation_removed():
    assert normalize("«Dog» — barks… ¡sí!") == "dog  barks sí"


@given(st.lists(st.sampled_from(["a", "barks", "dog", "sound"]), max_size=8))
def test_tokenize_idempotent(words):
    v = Vocabulary(["a", "barks", "dog", "sound"])
    ids = tokenize(" ".join(words), v)
    assert tokenize(detokenize(ids, v), v) == ids


def test_vocab_file_round_trip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "a"  # line 0 is id 3
    loaded = Vocabulary.load(tmp_path / "v.txt")
    assert loaded.tokens == vocab.tokens


def make_encoder(d_q=16, dtype=np.float64, **kw):
    cfg = QueryConfig(vocab_size=10, d_model=8, n_blocks=2, heads=2, d_ff=16, d_q=d_q, **kw)
    store = ParamStore(np.random.default_rng(0), dtype)
    return QueryEncoder(cfg, store), store


def test_output_dim_nonnegative_deterministic():
    enc, _ = make_encoder()
    e1 = enc([[1, 4, 5], [1, 3]]).data
    e2 = enc([[1, 4, 5], [1, 3]]).data
    assert e1.shape == (2, 16)
    assert np.all(e1 >= 0)
    assert e1.tobytes() == e2.tobytes()


def test_padding_does_not_change_embedding():
    enc, _ = make_encoder()
    alone = enc([[1, 4, 5]]).data
    batched = enc([[1, 4, 5], [1, 3, 3, 7, 8, 9]]).data[0]
    np.testing.assert_allclose(batched, alone[0], atol=1e-12)


def test_out_of_range_token():
    enc, _ = make_encoder()
    with pytest.raises(IndexError):
        enc([[1, 10]])


def test_truncation_warns(caplog):
    enc, _ = make_encoder(max_len=4)
    with caplog.at_level(logging.WARNING):
        e = enc([[1, 3, 4, 5, 6, 7]]).data
    assert "truncated" in caplog.text
    np.testing.assert_array_equal(e, enc([[1, 3, 4, 5]]).data)


def test_heads_config_error():
    with pytest.raises(ValueError):
        QueryConfig(d_model=10, heads=4)


def test_paper_shape_config_instantiates():
    cfg = QueryConfig.paper(vocab_size=50)
    store = ParamStore(np.random.default_rng(0), np.float32)
    enc = QueryEncoder(cfg, store)
    e = enc([[1, 5, 9, 2]])
    assert e.shape == (1, 256)
    assert cfg.n_blocks == 4 and cfg.heads == 4 and cfg.d_model == 256


def test_encode_query_gradcheck():
    enc, store = make_encoder(d_q=4)
    rng = np.random.default_rng(1)
    for name, t in store.params.items():
        if name.endswith("_embedding"):
            t.data = rng.standard_normal(t.shape)
        elif name.endswith("/bias") or name.endswith("/beta"):
            t.data = 0.5 * rng.standard_normal(t.shape)
    seqs = [[1, 4, 5], [1, 3]]
    assert check_gradients(lambda: enc(seqs), list(store.params.values()), joint=True) < 1e-5


def test_tag_encoder_oracle():
    store = ParamStore(np.random.default_rng(0), np.float64)
    tags = ["buzz", "chirp", "noise", "tone"]
    enc = TagEncoder(tags, 6, store)
    store.params["query/tags/bias"].data = np.linspace(-1, 1, 6)
    W, b = store.params["query/tags/weight"].data, store.params["query/tags/bias"].data
    zero = enc(np.zeros((1, 4))).data
    np.testing.assert_allclose(zero[0], np.maximum(b, 0))
    mh = enc.multi_hot([{"tone", "noise"}])
    out = enc(mh).data[0]
    np.testing.assert_allclose(out, np.maximum(W[3] + W[2] + b, 0), atol=1e-14)
    assert out.shape == (6,) and np.all(out >= 0)


def test_tag_encoder_errors():
    store = ParamStore(np.random.default_rng(0), np.float64)
    enc = TagEncoder(["a", "b"], 4, store)
    with pytest.raises(ValueError):
        enc(np.zeros((1, 3)))
    with pytest.raises(KeyError, match="unknown tag"):
        enc.multi_hot([{"zzz"}])


def test_float32_encoder_finite():
    enc, _ = make_encoder(dtype=np.float32)
    e = enc([[1, 2, 3, 4]])
    assert e.dtype == np.float32 and np.all(np.isfinite(e.data))
    assert isinstance(e, Tensor)
