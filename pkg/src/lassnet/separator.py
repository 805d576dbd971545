"""FiLM-conditioned ResUNet mask estimator and the end-to-end model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp
from .autodiff import Tensor, no_grad, ops
from .params import ParamStore
from .query import QueryConfig, QueryEncoder, TagEncoder, Vocabulary, tokenize

PAPER_ENCODER = [32, 64, 128, 256, 384, 384]


@dataclass
class SeparatorConfig:
    encoder_channels: list = field(default_factory=lambda: [c // 4 for c in PAPER_ENCODER])
    decoder_channels: list = None
    final_channels: int = None
    d_q: int = 64
    leaky_slope: float = 0.01
    kernel_size: int = 4
    upsample_kernel: int = 2

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        if self.decoder_channels is None:
            self.decoder_channels = list(reversed(self.encoder_channels))
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        if self.final_channels is None:
            self.final_channels = self.encoder_channels[0]
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise ValueError("encoder and decoder channel lists must have equal length")
        if self.decoder_channels != list(reversed(self.encoder_channels)):
            raise ValueError("decoder channels must mirror the encoder channels")

    @property
    def depth(self):
        return len(self.encoder_channels)

    @classmethod
    def paper(cls, d_q=256):
        return cls(encoder_channels=list(PAPER_ENCODER), d_q=d_q)

    @classmethod
    def scaled(cls, divisor, d_q=64):
        return cls(encoder_channels=[max(1, c // divisor) for c in PAPER_ENCODER], d_q=d_q)

    def to_dict(self):
        return asdict(self)


def same_padding(k):
    """(top, bottom, left, right) padding keeping H, W at stride 1; extra goes bottom/right."""
    lo = (k - 1) // 2
    hi = k - 1 - lo
    return (lo, hi, lo, hi)


def conv_block_layout(config):
    """Names and filter counts of every FiLM-conditioned ConvBlock, in forward order."""
    layout = []
    for i, c in enumerate(config.encoder_channels):
        layout += [(f"enc{i}/conv_a", c), (f"enc{i}/conv_b", c)]
    for j, c in enumerate(config.decoder_channels):
        layout += [(f"dec{j}/conv_a", c), (f"dec{j}/conv_b", c)]
    layout.append(("final/conv", config.final_channels))
    return layout


def film_apply(h, gamma, beta):
    """Per-channel affine modulation: out[:, i] = gamma[:, i] * h[:, i] + beta[:, i]."""
    n, m = h.shape[0], h.shape[1]
    if gamma.shape[-1] != m or beta.shape[-1] != m:
        raise ValueError(f"FiLM parameters of length {gamma.shape[-1]}/{beta.shape[-1]} for {m} feature maps")
    g = ops.reshape(gamma, (gamma.shape[0], m, 1, 1))
    b = ops.reshape(beta, (beta.shape[0], m, 1, 1))
    return ops.add(ops.mul(h, g), b)


class Separator:
    def __init__(self, config, store, prefix="separator"):
        self.config = config
        self.store = store
        self.prefix = prefix
        self.layout = conv_block_layout(config)
        k = config.kernel_size
        pre = prefix
        c_in = 1
        for i, c in enumerate(config.encoder_channels):
            self._init_conv_block(f"{pre}/enc{i}/conv_a", c_in, c, k)
            self._init_conv_block(f"{pre}/enc{i}/conv_b", c, c, k)
            c_in = c
        skips = list(reversed(config.encoder_channels))
        for j, c in enumerate(config.decoder_channels):
            store.conv_transpose(f"{pre}/dec{j}/up", c_in, c, config.upsample_kernel)
            self._init_conv_block(f"{pre}/dec{j}/conv_a", c + skips[j], c, k)
            self._init_conv_block(f"{pre}/dec{j}/conv_b", c, c, k)
            c_in = c
        self._init_conv_block(f"{pre}/final/conv", c_in, config.final_channels, k)
        store.conv(f"{pre}/final/proj", config.final_channels, 1, 1)
        for name, m in self.layout:
            store.linear(f"{pre}/film/{name}/fc1", config.d_q, config.d_q)
            store.linear(f"{pre}/film/{name}/fc2", config.d_q, 2 * m)

    def _init_conv_block(self, prefix, c_in, c_out, k):
        self.store.batch_norm(f"{prefix}/bn", c_in)
        self.store.conv(f"{prefix}", c_in, c_out, k)

    def film_generator(self, e_q):
        """One (gamma, beta) pair per ConvBlock: FC -> ReLU -> FC, unshared per block."""
        p, pre = self.store, self.prefix
        if e_q.shape[-1] != self.config.d_q:
            raise ValueError(f"query embedding has width {e_q.shape[-1]}, separator expects {self.config.d_q}")
        out = {}
        for name, m in self.layout:
            h = ops.relu(ops.linear(e_q, p[f"{pre}/film/{name}/fc1/weight"], p[f"{pre}/film/{name}/fc1/bias"]))
            gb = ops.linear(h, p[f"{pre}/film/{name}/fc2/weight"], p[f"{pre}/film/{name}/fc2/bias"])
            out[name] = (ops.getitem(gb, (slice(None), slice(0, m))), ops.getitem(gb, (slice(None), slice(m, 2 * m))))
        return out

    def conv_block(self, x, name, film, training):
        """BN -> leakyReLU -> 4x4 conv, then FiLM."""
        p, pre = self.store, f"{self.prefix}/{name}"
        x = ops.batch_norm2d(
            x,
            p[f"{pre}/bn/gamma"],
            p[f"{pre}/bn/beta"],
            p.buffers[f"{pre}/bn/running_mean"],
            p.buffers[f"{pre}/bn/running_var"],
            training=training,
        )
        x = ops.leaky_relu(x, self.config.leaky_slope)
        x = ops.conv2d(x, p[f"{pre}/weight"], p[f"{pre}/bias"], padding=same_padding(self.config.kernel_size))
        gamma, beta = film[name]
        return film_apply(x, gamma, beta)

    def unet(self, x, film, training=True, skip_scale=None):
        """[N, 1, H, W] -> [N, 1, H, W] latent; H and W must be multiples of 2**depth."""
        p, pre = self.store, self.prefix
        skips = []
        for i in range(self.config.depth):
            x = self.conv_block(x, f"enc{i}/conv_a", film, training)
            x = self.conv_block(x, f"enc{i}/conv_b", film, training)
            skips.append(x)
            x = ops.avg_pool2d(x, 2)
        for j in range(self.config.depth):
            x = ops.conv_transpose2d(x, p[f"{pre}/dec{j}/up/weight"], p[f"{pre}/dec{j}/up/bias"], stride=2)
            skip = skips[self.config.depth - 1 - j]
            if skip_scale is not None and j in skip_scale:
                skip = ops.mul(skip, skip_scale[j])
            x = ops.concat([x, skip], axis=1)
            x = self.conv_block(x, f"dec{j}/conv_a", film, training)
            x = self.conv_block(x, f"dec{j}/conv_b", film, training)
        x = self.conv_block(x, "final/conv", film, training)
        return ops.conv2d(x, p[f"{pre}/final/proj/weight"], p[f"{pre}/final/proj/bias"])

    def forward(self, magnitude, e_q, training=True, skip_scale=None):
        """Latent Z and mask M = sigmoid(Z), both [N, F, T] like the input.

        The Nyquist row is dropped before the UNet and comes back with Z = 0;
        T is zero-padded to a multiple of 2**depth and cropped afterwards.
        """
        mag = magnitude if isinstance(magnitude, Tensor) else Tensor(np.asarray(magnitude, dtype=self.store.dtype))
        if mag.ndim == 2:
            mag = ops.reshape(mag, (1,) + mag.shape)
        if not np.all(np.isfinite(mag.data)):
            raise ValueError("separator input contains non-finite magnitudes")
        n, f, t = mag.shape
        unit = 2 ** self.config.depth
        if (f - 1) % unit:
            raise ValueError(f"{f - 1} frequency rows (after dropping Nyquist) not divisible by 2**{self.config.depth}")
        t_pad = -(-t // unit) * unit
        x = ops.getitem(mag, (slice(None), slice(0, f - 1)))
        x = ops.reshape(x, (n, 1, f - 1, t))
        if t_pad != t:
            x = ops.pad(x, ((0, 0), (0, 0), (0, 0), (0, t_pad - t)))
        z = self.unet(x, self.film_generator(e_q), training, skip_scale)
        z = ops.reshape(ops.getitem(z, (slice(None), 0, slice(None), slice(0, t))), (n, f - 1, t))
        z = ops.pad(z, ((0, 0), (0, 1), (0, 0)))
        return z, ops.sigmoid(z)


@dataclass
class ModelConfig:
    mode: str = "text"  # "text" (language query) or "tags" (multi-hot baseline)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    tag_names: list = field(default_factory=list)

    def to_dict(self):
        return {"mode": self.mode, "separator": self.separator.to_dict(), "query": self.query.to_dict(), "tag_names": list(self.tag_names)}

    @classmethod
    def from_dict(cls, d):
        return cls(
            mode=d["mode"],
            separator=SeparatorConfig(**d["separator"]),
            query=QueryConfig(**d["query"]),
            tag_names=list(d.get("tag_names", [])),
        )


class LASSModel:
    """Query network + separator sharing one parameter store."""

    def __init__(self, config, vocab=None, seed=0, dtype=np.float32):
        self.config = config
        self.vocab = vocab if vocab is not None else Vocabulary()
        self.store = ParamStore(np.random.default_rng(seed), dtype)
        if config.mode == "text":
            config.query.vocab_size = len(self.vocab)
            config.query.d_q = config.separator.d_q
            self.query_net = QueryEncoder(config.query, self.store)
        elif config.mode == "tags":
            if not config.tag_names:
                raise ValueError("tag mode needs a non-empty tag vocabulary")
            self.query_net = TagEncoder(config.tag_names, config.separator.d_q, self.store)
        else:
            raise ValueError(f"unknown query mode {config.mode!r}")
        self.separator = Separator(config.separator, self.store)

    @property
    def params(self):
        return self.store.params

    def prepare_queries(self, queries):
        """Text captions -> token id lists, tag sets -> multi-hot matrix."""
        if self.config.mode == "text":
            return [tokenize(q, self.vocab) if isinstance(q, str) else list(q) for q in queries]
        if any(isinstance(q, str) for q in queries):
            raise ValueError("tag-mode model was given text queries; pass tag sets")
        return self.query_net.multi_hot(queries)

    def embed(self, queries):
        return self.query_net(self.prepare_queries(queries))

    def forward(self, magnitude, queries, training=True, skip_scale=None):
        e_q = self.embed(queries)
        return self.separator.forward(magnitude, e_q, training=training, skip_scale=skip_scale)


def predict_source(wav, query, model, mask_override=None):
    """Separate the source described by ``query`` (caption or tag set) from ``wav``.

    ``mask_override`` replaces the network mask with a constant (debug hook).
    """
    if not isinstance(wav, dsp.Waveform):
        wav = dsp.Waveform(wav)
    if wav.sample_rate != dsp.SAMPLE_RATE:
        raise ValueError(f"expected {dsp.SAMPLE_RATE} Hz audio, got {wav.sample_rate} Hz")
    spec = dsp.stft(wav)
    if mask_override is not None:
        mask = np.full(spec.shape, float(mask_override))
    else:
        with no_grad():
            _, m = model.forward(spec.magnitude[None], [query], training=False)
        mask = m.data[0].astype(np.float64)
    return dsp.istft(dsp.apply_mask(mask, spec))
