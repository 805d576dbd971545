"""Training loop, model construction and checkpoint round-tripping."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint, datagen, dsp
from .autodiff import Adam, Tape, ops
from .query import SOS_ID, UNK_ID, QueryConfig, Vocabulary, tokenize
from .separator import LASSModel, ModelConfig, SeparatorConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 3e-4
    iterations: int = 5000
    seed: int = 0
    mode: str = "text"  # "text" or "tags"
    channel_divisor: int = 16
    d_q: int = 64
    query_d_model: int = 64
    query_blocks: int = 2
    query_heads: int = 4
    query_d_ff: int = 128
    clip_s: float = 1.0
    two_event_prob: float = 0.0
    word_dropout: float = 0.4  # probability of replacing a caption word by <unk> in training
    checkpoint_interval: int = 500
    log_interval: int = 50
    clip_norm: float = 0.0  # 0 disables gradient clipping
    prefetch: int = 0  # >0 runs a producer thread with a queue of this size

    def __post_init__(self):
        for name in ("batch_size", "iterations", "channel_divisor", "d_q"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.word_dropout < 1.0:
            raise ValueError("word_dropout must be in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mode not in ("text", "tags"):
            raise ValueError(f"mode must be 'text' or 'tags', not {self.mode!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)

    def model_config(self):
        sep = SeparatorConfig.scaled(self.channel_divisor, d_q=self.d_q)
        query = QueryConfig(
            d_model=self.query_d_model,
            n_blocks=self.query_blocks,
            heads=self.query_heads,
            d_ff=self.query_d_ff,
            d_q=self.d_q,
        )
        return ModelConfig(mode=self.mode, separator=sep, query=query, tag_names=list(datagen.TAG_NAMES))

    def corpus(self):
        return datagen.Corpus(duration_s=self.clip_s, two_event_prob=self.two_event_prob)


def parse_config_text(text):
    """Line-oriented ``key = value`` config; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(fields[key], value)
    return out


def _coerce(f, value):
    default = f.default
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def training_vocabulary(corpus=None):
    """Word vocabulary of every caption the training templates can produce."""
    corpus = corpus or datagen.Corpus()
    texts = ["followed by"]
    for cls in corpus.classes:
        for pid in corpus.paraphrases:
            for params in _slot_variants(cls):
                texts.append(datagen.render_caption(cls, pid, params))
    return Vocabulary.from_corpus(texts)


def _slot_variants(cls):
    ranges = datagen.PARAM_RANGES[cls]
    if not ranges:
        return [{}]
    lo = {k: v[0] for k, v in ranges.items()}
    hi = {k: v[1] for k, v in ranges.items()}
    return [lo, hi]


def build_model(config, vocab=None, dtype=np.float32):
    if vocab is None:
        vocab = training_vocabulary(config.corpus())
    return LASSModel(config.model_config(), vocab=vocab, seed=config.seed, dtype=dtype)


def batch_seed(seed, step):
    return np.random.SeedSequence([seed, step])


def make_batch(config, corpus, step):
    """Batch for a step is a pure function of (seed, step)."""
    rng = np.random.default_rng(batch_seed(config.seed, step))
    return datagen.next_training_batch(corpus, config.batch_size, rng)


def batch_arrays(batch, mode, dtype=np.float32):
    mix = np.stack([dsp.stft(r.mixture).magnitude for r in batch]).astype(dtype)
    tgt = np.stack([dsp.stft(r.target).magnitude for r in batch]).astype(dtype)
    queries = [r.caption for r in batch] if mode == "text" else [sorted(r.target_tags) for r in batch]
    return mix, tgt, queries


def drop_words(captions, vocab, p, rng):
    """Token ids with each word (never <sos>) replaced by <unk> with probability ``p``."""
    out = []
    for caption in captions:
        ids = np.array(tokenize(caption, vocab))
        hit = rng.random(len(ids)) < p
        hit[ids == SOS_ID] = False
        out.append([int(i) for i in np.where(hit, UNK_ID, ids)])
    return out


class TrainingAborted(RuntimeError):
    pass


def train_step(model, opt, mix, tgt, queries):
    """One MAE/Adam step on magnitude spectrograms; returns the loss."""
    buffers = {k: v.copy() for k, v in model.store.buffers.items()}
    with Tape() as tape:
        _, mask = model.forward(mix, queries, training=True)
        est = ops.mul(mask, mix)
        loss = ops.mae_loss(est, tgt)
    value = float(loss.data)
    if not math.isfinite(value):
        model.store.buffers.update(buffers)  # undo the BN running-stat update of the bad step
        raise TrainingAborted(f"non-finite loss {value}")
    tape.backward(loss)
    opt.step()
    opt.zero_grad()
    return value


class Trainer:
    def __init__(self, config, model=None, optimizer=None, step=0):
        self.config = config
        self.corpus = config.corpus()
        self.model = model if model is not None else build_model(config)
        self.opt = optimizer if optimizer is not None else Adam(
            self.model.params, lr=config.lr, clip_norm=config.clip_norm or None
        )
        self.step = step
        self.losses = []
        self.last_checkpoint = None

    # ------------------------------------------------------------ persistence
    def state(self):
        tensors = dict(self.model.store.tensors())
        st = self.opt.state
        for name in self.model.params:
            if name in st.m:
                tensors[f"adam/m/{name}"] = st.m[name]
                tensors[f"adam/v/{name}"] = st.v[name]
        meta = {
            "format": "lassnet-checkpoint",
            "train_config": self.config.to_dict(),
            "model_config": self.model.config.to_dict(),
            "vocab": self.model.vocab.tokens,
            "step": self.step,
            "rng": {"kind": "SeedSequence([seed, step])", "seed": self.config.seed, "next_step": self.step},
            "adam": {"t": st.t, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps},
        }
        return tensors, meta

    def save(self, path):
        tensors, meta = self.state()
        checkpoint.save(path, tensors, meta)
        self.last_checkpoint = path
        return path

    @classmethod
    def from_checkpoint(cls, path, **overrides):
        model, tensors, meta = load_model(path, return_raw=True)
        cfg = dict(meta["train_config"])
        cfg.update(overrides)
        config = TrainConfig.from_dict(cfg)
        opt = Adam(model.params, lr=config.lr, clip_norm=config.clip_norm or None)
        st = opt.state
        st.t = int(meta["adam"]["t"])
        for name in model.params:
            if f"adam/m/{name}" in tensors:
                st.m[name] = tensors[f"adam/m/{name}"].copy()
                st.v[name] = tensors[f"adam/v/{name}"].copy()
        return cls(config, model=model, optimizer=opt, step=int(meta["step"]))

    # ------------------------------------------------------------ loop
    def _batches(self, start, stop):
        if self.config.prefetch <= 0:
            for step in range(start, stop):
                yield make_batch(self.config, self.corpus, step)
            return
        q = queue.Queue(maxsize=self.config.prefetch)
        stop_flag = threading.Event()

        def produce():
            for step in range(start, stop):
                if stop_flag.is_set():
                    return
                q.put(make_batch(self.config, self.corpus, step))

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            for _ in range(start, stop):
                yield q.get()
        finally:
            stop_flag.set()
            while worker.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    worker.join(0.01)

    def run(self, iterations=None, out_dir=None, log_file=None):
        cfg = self.config
        stop = cfg.iterations if iterations is None else self.step + iterations
        # a fresh run starts a fresh log; a resumed one continues it from its own step
        if log_file and self.step > 0 and os.path.exists(log_file):
            _truncate_log(log_file, self.step)
        log_fh = open(log_file, "w" if self.step == 0 else "a", encoding="utf-8") if log_file else None
        t0 = time.time()
        try:
            for batch in self._batches(self.step, stop):
                mix, tgt, queries = batch_arrays(batch, cfg.mode)
                if cfg.mode == "text" and cfg.word_dropout > 0:
                    rng = np.random.default_rng([cfg.seed, self.step, 1])
                    queries = drop_words(queries, self.model.vocab, cfg.word_dropout, rng)
                try:
                    value = train_step(self.model, self.opt, mix, tgt, queries)
                except (TrainingAborted, FloatingPointError) as exc:
                    # the failed step applied no update, so the current weights are the last good ones
                    if out_dir:
                        self.save(os.path.join(out_dir, "last_good.ckpt"))
                    where = f"; last good checkpoint: {self.last_checkpoint}" if self.last_checkpoint else ""
                    raise TrainingAborted(f"step {self.step + 1}: {exc}{where}") from exc
                self.step += 1
                self.losses.append(value)
                if log_fh:
                    log_fh.write(f"{self.step}\t{value:.8g}\t{time.time() - t0:.3f}\n")
                    log_fh.flush()
                if cfg.log_interval and self.step % cfg.log_interval == 0:
                    recent = self.losses[-cfg.log_interval :]
                    log.info("step %d loss %.5f (avg %.5f) %.1fs", self.step, value, float(np.mean(recent)), time.time() - t0)
                if out_dir and cfg.checkpoint_interval and self.step % cfg.checkpoint_interval == 0:
                    self.save(os.path.join(out_dir, f"step{self.step:07d}.ckpt"))
        finally:
            if log_fh:
                log_fh.close()
        return self.losses


def _truncate_log(path, last_step):
    """Drop log lines past ``last_step`` (left behind by a run killed after its last checkpoint)."""
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip() and int(line.split("\t", 1)[0]) <= last_step]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def train(config, out_dir, log_name="train_log.tsv"):
    """Train from scratch; returns the path of the final checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(config)
    trainer.run(out_dir=out_dir, log_file=os.path.join(out_dir, log_name))
    return trainer.save(os.path.join(out_dir, "final.ckpt"))


def load_model(path, return_raw=False, dtype=np.float32):
    tensors, meta = checkpoint.load(path)
    if meta.get("format") != "lassnet-checkpoint":
        raise checkpoint.CheckpointError(f"{path}: not a model checkpoint")
    mconf = ModelConfig.from_dict(meta["model_config"])
    vocab = Vocabulary(meta["vocab"][3:])
    model = LASSModel(mconf, vocab=vocab, seed=0, dtype=dtype)
    expected = checkpoint.assign(model.store, tensors)
    extra = [k for k in tensors if k not in expected and not k.startswith("adam/")]
    if extra:
        raise checkpoint.CheckpointError(f"unknown tensor {extra[0]!r} in checkpoint")
    if return_raw:
        return model, tensors, meta
    return model


def moving_average(values, window):
    v = np.asarray(values, dtype=np.float64)
    return np.convolve(v, np.ones(window) / window, mode="valid")


__all__ = [
    "TrainConfig",
    "Trainer",
    "TrainingAborted",
    "batch_arrays",
    "build_model",
    "load_model",
    "make_batch",
    "moving_average",
    "parse_config_text",
    "train",
    "train_step",
    "training_vocabulary",
]
