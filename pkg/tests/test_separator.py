import numpy as np
import pytest

from lassnet import dsp
from lassnet.autodiff import Tape, Tensor, backward, check_gradients, ops
from lassnet.params import ParamStore
from lassnet.query import QueryConfig, Vocabulary
from lassnet.separator import (
    PAPER_ENCODER,
    LASSModel,
    ModelConfig,
    Separator,
    SeparatorConfig,
    conv_block_layout,
    film_apply,
    predict_source,
    same_padding,
)


def small_model(mode="text", seed=0, channels=(2, 2, 2, 2, 2, 2)):
    sep = SeparatorConfig(encoder_channels=list(channels), d_q=8)
    q = QueryConfig(d_model=8, n_blocks=1, heads=2, d_ff=16, d_q=8)
    cfg = ModelConfig(mode=mode, separator=sep, query=q, tag_names=["buzz", "noise", "tone"])
    return LASSModel(cfg, vocab=Vocabulary(["a", "buzz", "tone", "noise"]), seed=seed, dtype=np.float64)


def test_config_defaults_and_mirror():
    c = SeparatorConfig.paper()
    assert c.encoder_channels == [32, 64, 128, 256, 384, 384]
    assert c.decoder_channels == [384, 384, 256, 128, 64, 32]
    assert c.final_channels == 32
    with pytest.raises(ValueError):
        SeparatorConfig(encoder_channels=[2, 4], decoder_channels=[2, 4])
    assert SeparatorConfig.scaled(4).encoder_channels == [8, 16, 32, 64, 96, 96]


def test_film_pair_count_paper_config():
    # 6 encoder blocks x 2 + 6 decoder blocks x 2 + the final ConvBlock
    layout = conv_block_layout(SeparatorConfig.paper())
    assert len(layout) == 25
    assert layout[-1] == ("final/conv", 32)


def test_film_generator_shapes_and_determinism():
    store = ParamStore(np.random.default_rng(0), np.float64)
    sep = Separator(SeparatorConfig(encoder_channels=[2, 3], d_q=4), store)
    e = Tensor(np.abs(np.random.default_rng(1).standard_normal((2, 4))))
    f1, f2 = sep.film_generator(e), sep.film_generator(e)
    assert len(f1) == len(sep.layout)
    for name, m in sep.layout:
        g, b = f1[name]
        assert g.shape == (2, m) and b.shape == (2, m)
        assert g.data.tobytes() == f2[name][0].data.tobytes()


def test_film_generator_gradcheck():
    store = ParamStore(np.random.default_rng(0), np.float64)
    sep = Separator(SeparatorConfig(encoder_channels=[2, 3], d_q=4), store)
    rng = np.random.default_rng(2)
    names = [n for n in store.params if "/film/" in n]
    for n in names:
        if n.endswith("bias"):
            store.params[n].data = 0.5 * rng.standard_normal(store.params[n].shape)
    e = Tensor(rng.standard_normal((2, 4)), requires_grad=True)

    def build():
        f = sep.film_generator(e)
        return ops.concat([ops.concat(list(f[k]), axis=1) for k, _ in sep.layout], axis=1)

    assert check_gradients(build, [e] + [store.params[n] for n in names]) < 1e-5


def test_film_apply_examples():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((2, 3, 4, 5))
    ident = film_apply(Tensor(h), Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(ident.data, h)
    const = film_apply(Tensor(h), Tensor(np.zeros((2, 3))), Tensor(np.full((2, 3), 1.5)))
    np.testing.assert_array_equal(const.data, 1.5)
    g, z = Tensor(rng.standard_normal((2, 3))), Tensor(np.zeros((2, 3)))
    h2 = rng.standard_normal((2, 3, 4, 5))
    lhs = film_apply(Tensor(h + h2), g, z).data
    rhs = film_apply(Tensor(h), g, z).data + film_apply(Tensor(h2), g, z).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)
    with pytest.raises(ValueError):
        film_apply(Tensor(h), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))


def test_same_padding_convention():
    assert same_padding(4) == (1, 2, 1, 2)


@pytest.mark.parametrize("t", [64, 626])
def test_forward_shape_paper_spectrogram(t):
    model = small_model()
    mag = np.abs(np.random.default_rng(0).standard_normal((1, 513, t)))
    z, m = model.forward(mag, ["a buzz"], training=False)
    assert z.shape == (1, 513, t) and m.shape == (1, 513, t)
    assert np.all((m.data > 0) & (m.data < 1))
    np.testing.assert_array_equal(z.data[:, -1], 0.0)
    np.testing.assert_array_equal(m.data[:, -1], 0.5)


@pytest.mark.parametrize("f,t", [(65, 64), (129, 70), (257, 65)])
def test_shape_invariance(f, t):
    model = small_model()
    z, m = model.forward(np.ones((2, f, t)), ["a", "tone"], training=True)
    assert z.shape == (2, f, t)


def test_zero_network_gives_half_mask():
    model = small_model()
    for name, p in model.params.items():
        if name.startswith("separator"):
            p.data = np.zeros_like(p.data)
    _, m = model.forward(np.abs(np.random.default_rng(0).standard_normal((1, 65, 64))), ["a"], training=True)
    np.testing.assert_array_equal(m.data, 0.5)


def test_nonfinite_input_rejected():
    model = small_model()
    mag = np.ones((1, 65, 64))
    mag[0, 3, 3] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        model.forward(mag, ["a"])


def test_conditioning_sensitivity():
    model = small_model()
    mag = np.abs(np.random.default_rng(0).standard_normal((1, 65, 64)))
    _, m1 = model.forward(mag, ["a buzz"], training=False)
    _, m2 = model.forward(mag, ["tone noise"], training=False)
    assert np.max(np.abs(m1.data - m2.data)) > 0


def test_skip_ablation_changes_output():
    model = small_model()
    mag = np.abs(np.random.default_rng(0).standard_normal((1, 65, 64)))
    _, m = model.forward(mag, ["a buzz"], training=False)
    for j in (0, 5):
        _, m_abl = model.forward(mag, ["a buzz"], training=False, skip_scale={j: 0.0})
        assert np.max(np.abs(m.data - m_abl.data)) > 0


def test_query_gradient_nonzero_through_film():
    model = small_model()
    rng = np.random.default_rng(0)
    mag = np.abs(rng.standard_normal((2, 65, 64)))
    target = rng.random((2, 65, 64))
    with Tape():
        _, m = model.forward(mag, ["a buzz", "tone"], training=True)
        loss = ops.mae_loss(ops.mul(m, mag), target)
    backward(loss)
    qgrads = [p.grad for n, p in model.params.items() if n.startswith("query/") and p.grad is not None]
    assert qgrads and max(np.abs(g).max() for g in qgrads) > 0


def test_paper_config_instantiates():
    store = ParamStore(np.random.default_rng(0), np.float32)
    sep = Separator(SeparatorConfig.paper(d_q=256), store)
    assert store.params["separator/enc5/conv_b/weight"].shape == (384, 384, 4, 4)
    assert store.params["separator/dec0/up/weight"].shape == (384, 384, 2, 2)
    assert store.params["separator/dec0/conv_a/weight"].shape == (384, 768, 4, 4)
    assert store.params["separator/final/proj/weight"].shape == (1, 32, 1, 1)
    assert store.params["separator/film/enc0/conv_a/fc2/weight"].shape == (256, 64)
    assert len(sep.layout) == 25
    assert PAPER_ENCODER == [32, 64, 128, 256, 384, 384]


@pytest.mark.parametrize("seconds", [1, 10])
def test_predict_source_length_and_determinism(seconds):
    model = small_model()
    x = dsp.Waveform(0.1 * np.random.default_rng(seconds).standard_normal(32000 * seconds))
    y1 = predict_source(x, "a buzz", model)
    y2 = predict_source(x, "a buzz", model)
    assert len(y1) == len(x)
    assert y1.samples.tobytes() == y2.samples.tobytes()


def test_predict_source_mask_override_is_identity():
    model = small_model()
    x = dsp.Waveform(np.random.default_rng(0).standard_normal(16000))
    y = predict_source(x, "a", model, mask_override=1.0)
    assert np.max(np.abs(y.samples - x.samples)) < 1e-9


def test_predict_source_rate_mismatch_and_empty_query():
    model = small_model()
    with pytest.raises(ValueError, match="Hz"):
        predict_source(dsp.Waveform(np.zeros(1000), 16000), "a", model)
    y = predict_source(dsp.Waveform(np.ones(2000)), "", model)
    assert len(y) == 2000


def test_tag_mode_model():
    model = small_model(mode="tags")
    _, m = model.forward(np.ones((2, 65, 64)), [["buzz"], ["noise", "tone"]], training=True)
    assert m.shape == (2, 65, 64)
    with pytest.raises(ValueError, match="tag-mode"):
        model.forward(np.ones((1, 65, 64)), ["a buzz"])
