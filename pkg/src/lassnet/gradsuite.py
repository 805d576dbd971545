"""Finite-difference gradient suite: every op plus a toy end-to-end model.

Used by the test-suite and by ``lassnet gradcheck``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, check_gradients, ops

OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self):
        return self.error < self.tol


def _t(rng, *shape, positive=False, away_from_zero=False):
    a = rng.standard_normal(shape)
    if positive:
        a = np.abs(a) + 0.5
    if away_from_zero:
        a = np.where(np.abs(a) < 0.1, a + np.sign(a + 1e-3) * 0.2, a)
    return Tensor(a.astype(np.float64))


def op_cases(seed=0):
    """(name, build, tensors) triples, one or more per differentiable op."""
    rng = np.random.default_rng(seed)
    T = lambda *s, **k: _t(rng, *s, **k)  # noqa: E731
    cases = []

    def add(name, fn, *tensors):
        # fn takes the tensors positionally so each case binds its own operands
        cases.append((name, lambda: fn(*tensors), list(tensors)))

    a, b = T(3, 4), T(4)
    add("add(broadcast)", lambda a, b: ops.add(a, b), a, b)
    a, b = T(2, 3), T(2, 1)
    add("sub(broadcast)", lambda a, b: ops.sub(a, b), a, b)
    a, b = T(3, 4), T(1, 4)
    add("mul(broadcast)", lambda a, b: ops.mul(a, b), a, b)
    a, b = T(3, 4), T(3, 4, positive=True)
    add("div", lambda a, b: ops.div(a, b), a, b)
    a = T(5)
    add("neg", lambda a: ops.neg(a), a)
    a = T(3, 3, positive=True)
    add("power", lambda a: ops.power(a, 2.5), a)
    a = T(3, 4)
    add("exp", lambda a: ops.exp(a), a)
    a = T(3, 4, positive=True)
    add("log", lambda a: ops.log(a), a)
    a = T(3, 4, positive=True)
    add("sqrt", lambda a: ops.sqrt(a), a)
    a = T(3, 4, away_from_zero=True)
    add("abs", lambda a: ops.abs(a), a)
    a = T(3, 4, away_from_zero=True)
    add("relu", lambda a: ops.relu(a), a)
    a = T(3, 4, away_from_zero=True)
    add("leaky_relu", lambda a: ops.leaky_relu(a, 0.01), a)
    a = T(3, 4)
    add("sigmoid", lambda a: ops.sigmoid(a), a)
    a = T(3, 4)
    add("tanh", lambda a: ops.tanh(a), a)
    a = T(3, 4)
    add("gelu", lambda a: ops.gelu(a), a)
    a = T(2, 3, 4)
    add("sum(axis=1)", lambda a: ops.sum(a, axis=1), a)
    a = T(2, 3, 4)
    add("mean(axis=(0,2),keepdims)", lambda a: ops.mean(a, axis=(0, 2), keepdims=True), a)
    a, b = T(2, 3, 4), T(2, 4, 5)
    add("matmul(batched)", lambda a, b: ops.matmul(a, b), a, b)
    x, w, bias = T(4, 3), T(3, 5), T(5)
    add("linear", lambda x, w, bias: ops.linear(x, w, bias), x, w, bias)
    a = T(2, 6)
    add("reshape", lambda a: ops.reshape(a, (3, 4)), a)
    a = T(2, 3, 4)
    add("transpose", lambda a: ops.transpose(a, (2, 0, 1)), a)
    a = T(4, 5)
    add("getitem(slice)", lambda a: ops.getitem(a, (slice(1, 3), slice(None, None, 2))), a)
    a = T(4, 3)
    idx = np.array([0, 2, 2, 3])
    add("getitem(advanced)", lambda a: ops.getitem(a, idx), a)
    a, b = T(2, 3), T(2, 2)
    add("concat", lambda a, b: ops.concat([a, b], axis=1), a, b)
    a = T(2, 3)
    add("pad", lambda a: ops.pad(a, ((1, 0), (0, 2))), a)
    table = T(6, 3)
    ids = np.array([[1, 5, 1], [0, 2, 3]])
    add("embedding", lambda table: ops.embedding(ids, table), table)
    a = T(2, 5)
    mask = np.array([[True, True, False, True, True], [True, False, True, True, True]])
    add("softmax(masked)", lambda a: ops.softmax(a, axis=-1, mask=mask), a)
    x, g, b = T(3, 6), T(6), T(6)
    add("layer_norm", lambda x, g, b: ops.layer_norm(x, g, b), x, g, b)
    p, q = T(3, 4), T(3, 4)
    q.data += np.where(np.abs(p.data - q.data) < 0.1, 0.3, 0.0)
    add("mae_loss", lambda p, q: ops.mae_loss(p, q), p, q)
    x, w, bias = T(2, 2, 5, 6), T(3, 2, 4, 4), T(3)
    add("conv2d(4x4,asym pad)", lambda x, w, bias: ops.conv2d(x, w, bias, padding=(1, 2, 1, 2)), x, w, bias)
    x, w = T(1, 2, 6, 6), T(2, 2, 3, 3)
    add("conv2d(stride 2)", lambda x, w: ops.conv2d(x, w, None, stride=2, padding=1), x, w)
    x, w, bias = T(2, 3, 3, 2), T(3, 2, 2, 2), T(2)
    add("conv_transpose2d(2x2)", lambda x, w, bias: ops.conv_transpose2d(x, w, bias, stride=2), x, w, bias)
    x, w = T(1, 2, 3, 3), T(2, 1, 4, 4)
    add("conv_transpose2d(4x4)", lambda x, w: ops.conv_transpose2d(x, w, None, stride=2), x, w)
    x = T(2, 2, 4, 6)
    add("avg_pool2d", lambda x: ops.avg_pool2d(x, 2), x)
    x, g, b = T(3, 2, 3, 4), T(2), T(2)
    add("batch_norm2d(train)", lambda x, g, b: ops.batch_norm2d(x, g, b, training=True), x, g, b)
    x, g, b = T(3, 2, 3, 4), T(2), T(2)
    rm, rv = rng.standard_normal(2), np.abs(rng.standard_normal(2)) + 0.5
    add("batch_norm2d(eval)", lambda x, g, b: ops.batch_norm2d(x, g, b, rm, rv, training=False), x, g, b)
    return cases


def toy_model(mode="text", seed=0):
    """Small float64 model whose input (8 + Nyquist rows, 3 frames) fits a depth-2 UNet."""
    from .query import QueryConfig, Vocabulary
    from .separator import LASSModel, ModelConfig, SeparatorConfig

    sep = SeparatorConfig(encoder_channels=[2, 3], d_q=4)
    query = QueryConfig(d_model=8, n_blocks=1, heads=2, d_ff=8, max_len=8, d_q=4)
    cfg = ModelConfig(mode=mode, separator=sep, query=query, tag_names=["a", "b", "c"])
    vocab = Vocabulary(["a", "tone", "buzz", "beeps"])
    model = LASSModel(cfg, vocab=vocab, seed=seed, dtype=np.float64)
    # Move to a generic point. The production init (std 0.02 embeddings,
    # zero biases) puts the embedding layer norm in a high-curvature regime
    # where h=1e-5 differences are truncation-limited, and at toy width can
    # leave whole FiLM layers at exactly zero, i.e. on a ReLU kink.
    rng = np.random.default_rng(seed + 2)
    for name, t in model.params.items():
        if name.endswith("_embedding"):
            t.data = rng.standard_normal(t.shape)
        elif name.endswith("/bias") or name.endswith("/beta"):
            t.data = 0.5 * rng.standard_normal(t.shape)
    return model


def model_case(mode="text", seed=0):
    model = toy_model(mode, seed)
    rng = np.random.default_rng(seed + 1)
    mag = np.abs(rng.standard_normal((2, 9, 3)))
    queries = ["a buzz", "tone beeps"] if mode == "text" else [["a"], ["b", "c"]]
    tensors = list(model.params.values())

    def build():
        _, m = model.forward(mag, queries, training=True)
        return m

    # BN running buffers drift with every forward; they do not affect training-mode outputs
    return f"model({mode})", build, tensors


def run_suite(seed=0, include_model=True):
    results = []
    for name, build, tensors in op_cases(seed):
        results.append(GradResult(name, check_gradients(build, tensors), OP_TOL))
    if include_model:
        for mode in ("text", "tags"):
            name, build, tensors = model_case(mode, seed)
            results.append(GradResult(name, check_gradients(build, tensors, joint=True), MODEL_TOL))
    return results

