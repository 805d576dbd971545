"""Synthetic captioned sound events and the two-source mixing protocol.

Eight parametric sound classes stand in for tagged recordings. Each class
carries a coarse tag set (several classes may share a tag) and a bank of
caption paraphrases; some paraphrases are held out of training to probe
robustness to unseen wording.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dsp import SAMPLE_RATE, Waveform

PEAK = 0.5
TWO_EVENT_XFADE_S = 0.05
LOOP_XFADE_S = 0.01

CLASS_TAGS = {
    "tone": {"tone"},
    "am_tone": {"tone", "modulation"},
    "square_wave": {"buzz"},
    "chirp_up": {"chirp"},
    "chirp_down": {"chirp"},
    "white_noise": {"noise"},
    "pink_noise": {"noise"},
    "click_train": {"clicks"},
}
CLASSES = tuple(CLASS_TAGS)
TAG_NAMES = tuple(sorted(set().union(*CLASS_TAGS.values())))

# ids 0-3 are used in training, 4-5 are held out
CAPTIONS = {
    "tone": [
        "a steady pure tone is playing",
        "a continuous {pitch} beep sounds",
        "a sine tone hums at a constant pitch",
        "a single {pitch} pitched beep rings",
        "a {pitch} beep tone is heard continuously",
        "someone plays a pure steady tone",
    ],
    "am_tone": [
        "a tone pulses up and down in loudness",
        "a wobbling beep with a {speed} tremolo",
        "a pulsing tone swells and fades repeatedly",
        "a throbbing tone with a {speed} pulse",
        "a tone swells and fades with a {speed} pulse",
        "a pulsing beep wobbles in loudness",
    ],
    "square_wave": [
        "a harsh buzzing square wave",
        "a {pitch} electronic buzz drones",
        "a buzzer hums with a rough tone",
        "a raspy {pitch} buzzing sound",
        "an electronic buzzer drones harshly",
        "a rough {pitch} buzz is heard",
    ],
    "chirp_up": [
        "a rising chirp sweeps upward",
        "a tone sweeps up in pitch",
        "an upward whistle rises quickly",
        "a sweeping sound rising from low to high",
        "a whistle sweeps from low to high pitch",
        "a chirp rising upward in pitch",
    ],
    "chirp_down": [
        "a falling chirp sweeps downward",
        "a tone sweeps down in pitch",
        "a downward whistle falls quickly",
        "a sweeping sound falling from high to low",
        "a whistle sweeps from high to low pitch",
        "a chirp falling downward in pitch",
    ],
    "white_noise": [
        "white noise hisses steadily",
        "a loud static hiss",
        "a bright hissing noise",
        "steady broadband static noise",
        "static hisses loudly and steadily",
        "a hissing white noise is heard",
    ],
    "pink_noise": [
        "a soft rumbling pink noise",
        "a deep rushing noise like a waterfall",
        "a dull steady rumble of noise",
        "muffled rushing noise continues",
        "a steady muffled rumble is heard",
        "a deep rushing waterfall noise",
    ],
    "click_train": [
        "a series of sharp clicks",
        "something ticks {speed_adv} like a clock",
        "rapid clicking sounds repeat",
        "a train of short clicks at a {speed} rate",
        "a clock ticks with sharp clicks",
        "short clicking sounds repeat {speed_adv}",
    ],
}
TRAIN_PARAPHRASES = (0, 1, 2, 3)
HELDOUT_PARAPHRASES = (4, 5)

# documented parameter ranges, sampled uniformly (log-uniform for frequencies)
PARAM_RANGES = {
    "tone": {"freq": (200.0, 4000.0)},
    "am_tone": {"freq": (300.0, 3000.0), "rate": (2.0, 8.0), "depth": (0.6, 0.95)},
    "square_wave": {"freq": (100.0, 600.0)},
    "chirp_up": {"f_start": (200.0, 1000.0), "f_end": (2000.0, 6000.0)},
    "chirp_down": {"f_start": (2000.0, 6000.0), "f_end": (200.0, 1000.0)},
    "white_noise": {},
    "pink_noise": {},
    "click_train": {"rate": (4.0, 20.0)},
}
LOG_PARAMS = {"freq", "f_start", "f_end"}


class UnknownClassError(KeyError):
    pass


class PairingError(ValueError):
    pass


@dataclass
class SourceSpec:
    class_tag: str
    params: dict = field(default_factory=dict)
    duration_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.class_tag not in CLASS_TAGS:
            raise UnknownClassError(f"unknown sound class {self.class_tag!r}")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")

    @property
    def tags(self):
        return set(CLASS_TAGS[self.class_tag])

    def to_dict(self):
        return {"class_tag": self.class_tag, "params": dict(self.params), "duration_s": self.duration_s, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["class_tag"], dict(d["params"]), float(d["duration_s"]), int(d["seed"]))


def sample_params(class_tag, rng):
    out = {}
    for name, (lo, hi) in PARAM_RANGES[class_tag].items():
        if name in LOG_PARAMS:
            out[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        else:
            out[name] = float(rng.uniform(lo, hi))
    return out


def _num_samples(duration_s, sr):
    return int(round(duration_s * sr))


def synthesize_source(spec, sample_rate=SAMPLE_RATE):
    """Render a SourceSpec deterministically; peak-normalised to 0.5."""
    n = _num_samples(spec.duration_s, sample_rate)
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / sample_rate
    p = spec.params
    phase0 = rng.uniform(0, 2 * np.pi)
    kind = spec.class_tag
    if kind == "tone":
        x = np.sin(2 * np.pi * p["freq"] * t + phase0)
    elif kind == "am_tone":
        env = 1.0 + p["depth"] * np.sin(2 * np.pi * p["rate"] * t + rng.uniform(0, 2 * np.pi))
        x = env * np.sin(2 * np.pi * p["freq"] * t + phase0)
    elif kind == "square_wave":
        # band-limited: odd harmonics below Nyquist
        x = np.zeros(n)
        k = 1
        while k * p["freq"] < sample_rate / 2:
            x += np.sin(2 * np.pi * k * p["freq"] * t + k * phase0) / k
            k += 2
    elif kind in ("chirp_up", "chirp_down"):
        f0, f1 = p["f_start"], p["f_end"]
        dur = max(n / sample_rate, 1.0 / sample_rate)
        # exponential sweep: instantaneous frequency f0 * (f1/f0)^(t/dur)
        k = np.log(f1 / f0) / dur
        x = np.sin(2 * np.pi * f0 * (np.exp(k * t) - 1.0) / k + phase0)
    elif kind == "white_noise":
        x = rng.standard_normal(n)
    elif kind == "pink_noise":
        spec_ = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(len(spec_), dtype=float)
        f[0] = 1.0
        x = np.fft.irfft(spec_ / np.sqrt(f), n=n)
    elif kind == "click_train":
        x = np.zeros(n)
        period = sample_rate / p["rate"]
        burst = int(0.003 * sample_rate)
        decay = np.exp(-np.arange(burst) / (0.0005 * sample_rate))
        start = rng.uniform(0, period)
        while start < n:
            i = int(start)
            seg = min(burst, n - i)
            x[i : i + seg] += rng.standard_normal(seg) * decay[:seg]
            start += period
    else:  # pragma: no cover - guarded by SourceSpec
        raise UnknownClassError(kind)
    peak = np.abs(x).max() if n else 0.0
    if peak > 0:
        x = x * (PEAK / peak)
    return Waveform(x, sample_rate)


def _slots(class_tag, params):
    slots = {}
    if "freq" in params:
        threshold = 250.0 if class_tag == "square_wave" else 1000.0
        slots["pitch"] = "low" if params["freq"] < threshold else "high"
    if "rate" in params:
        fast = params["rate"] >= (5.0 if class_tag == "am_tone" else 10.0)
        slots["speed"] = "fast" if fast else "slow"
        slots["speed_adv"] = "quickly" if fast else "slowly"
    return slots


def render_caption(class_tags, paraphrase_ids, params=None):
    """Fill caption templates; a two-event target joins with 'followed by'."""
    if isinstance(class_tags, str):
        class_tags, paraphrase_ids, params = [class_tags], [paraphrase_ids], [params or {}]
    params = params if params is not None else [{}] * len(class_tags)
    parts = []
    for tag, pid, prm in zip(class_tags, paraphrase_ids, params):
        if tag not in CAPTIONS:
            raise UnknownClassError(f"unknown sound class {tag!r}")
        bank = CAPTIONS[tag]
        if not 0 <= pid < len(bank):
            raise KeyError(f"class {tag!r} has no paraphrase {pid} (0..{len(bank) - 1})")
        parts.append(bank[pid].format(**_slots(tag, prm or {})))
    return " followed by ".join(parts)


def crossfade_concat(a, b, xfade):
    if xfade <= 0:
        return np.concatenate([a, b])
    fade = np.linspace(0.0, 1.0, xfade + 2)[1:-1]
    mid = a[-xfade:] * (1.0 - fade) + b[:xfade] * fade
    return np.concatenate([a[:-xfade], mid, b[xfade:]])


def fit_length(x, n, sample_rate=SAMPLE_RATE):
    """Loop ``x`` with a 10 ms crossfade until it covers ``n`` samples, then trim."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) >= n:
        return x[:n].copy()
    xf = min(int(LOOP_XFADE_S * sample_rate), len(x) // 2)
    out = x
    while len(out) < n:
        out = crossfade_concat(out, x, xf)
    return out[:n]


def render_target(events, sample_rate=SAMPLE_RATE):
    """One or two SourceSpecs -> target waveform (two events crossfaded by 50 ms)."""
    waves = [synthesize_source(e, sample_rate).samples for e in events]
    if len(waves) == 1:
        return Waveform(waves[0], sample_rate)
    xf = int(TWO_EVENT_XFADE_S * sample_rate)
    return Waveform(crossfade_concat(waves[0], waves[1], xf), sample_rate)


def energy(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x))


def make_mixture(target, background, snr_db=0.0):
    """Scale the background to the requested target-to-background energy ratio and add.

    Returns (mixture, scaled_background) as Waveforms of the target's length.
    """
    t = target.samples if isinstance(target, Waveform) else np.asarray(target, dtype=np.float64)
    sr = target.sample_rate if isinstance(target, Waveform) else SAMPLE_RATE
    b = background.samples if isinstance(background, Waveform) else np.asarray(background, dtype=np.float64)
    b = fit_length(b, len(t), sr)
    e_t, e_b = energy(t), energy(b)
    if e_t <= 0:
        raise ValueError("target has zero energy")
    if e_b <= 0:
        raise ValueError("background has zero energy")
    alpha = np.sqrt(e_t / e_b) * 10.0 ** (-snr_db / 20.0)
    scaled = alpha * b
    return Waveform(t + scaled, sr), Waveform(scaled, sr)


@dataclass
class MixtureRecord:
    mixture: Waveform
    target: Waveform
    background: Waveform  # already scaled
    caption: str
    target_tags: set
    background_tags: set
    seed: int
    target_spec: list = field(default_factory=list)
    background_spec: SourceSpec = None
    snr_db: float = 0.0
    id: str = ""
    paraphrase_ids: list = field(default_factory=list)
    heldout_captions: list = field(default_factory=list)


@dataclass
class Corpus:
    classes: tuple = CLASSES
    duration_s: float = 1.0
    sample_rate: int = SAMPLE_RATE
    paraphrases: tuple = TRAIN_PARAPHRASES
    heldout_paraphrases: tuple = HELDOUT_PARAPHRASES
    two_event_prob: float = 0.0
    snr_db: float = 0.0

    def __post_init__(self):
        for c in self.classes:
            if c not in CLASS_TAGS:
                raise UnknownClassError(f"unknown sound class {c!r}")
        tagsets = [CLASS_TAGS[c] for c in self.classes]
        if not any(not (a & b) for a in tagsets for b in tagsets):
            raise PairingError("corpus needs at least two classes with disjoint tags")

    def sample_events(self, rng):
        two = self.two_event_prob > 0 and rng.random() < self.two_event_prob
        n_total = _num_samples(self.duration_s, self.sample_rate)
        if not two:
            c = self.classes[rng.integers(len(self.classes))]
            return [SourceSpec(c, sample_params(c, rng), n_total / self.sample_rate, int(rng.integers(2**32)))]
        first, second = rng.choice(len(self.classes), size=2, replace=False)
        xf = int(TWO_EVENT_XFADE_S * self.sample_rate)
        n1 = (n_total + xf) // 2
        n2 = n_total + xf - n1
        out = []
        for idx, n in ((first, n1), (second, n2)):
            c = self.classes[idx]
            out.append(SourceSpec(c, sample_params(c, rng), n / self.sample_rate, int(rng.integers(2**32))))
        return out

    def sample_background(self, rng, exclude_tags):
        allowed = [c for c in self.classes if not (CLASS_TAGS[c] & set(exclude_tags))]
        if not allowed:
            raise PairingError(f"no class with tags disjoint from {sorted(exclude_tags)}")
        c = allowed[rng.integers(len(allowed))]
        return SourceSpec(c, sample_params(c, rng), self.duration_s, int(rng.integers(2**32)))

    def caption_for(self, events, rng, pool=None):
        pool = self.paraphrases if pool is None else pool
        pids = [int(pool[rng.integers(len(pool))]) for _ in events]
        return render_caption([e.class_tag for e in events], pids, [e.params for e in events]), pids


def events_tags(events):
    return set().union(*(e.tags for e in events))


def _record(events, bg_spec, caption, pids, seed, snr_db, rid="", heldout=None, sample_rate=SAMPLE_RATE):
    target = render_target(events, sample_rate)
    bg = synthesize_source(bg_spec, sample_rate)
    mixture, scaled = make_mixture(target, bg, snr_db)
    return MixtureRecord(
        mixture=mixture,
        target=target,
        background=scaled,
        caption=caption,
        target_tags=events_tags(events),
        background_tags=bg_spec.tags,
        seed=seed,
        target_spec=list(events),
        background_spec=bg_spec,
        snr_db=snr_db,
        id=rid,
        paraphrase_ids=pids,
        heldout_captions=list(heldout or []),
    )


def next_training_batch(corpus, batch_size=16, rng=None, seed=None):
    """A fresh batch of on-the-fly 0 dB mixtures with tag-disjoint pairs."""
    if rng is None:
        rng = np.random.default_rng(seed)
    batch = []
    for _ in range(batch_size):
        rec_seed = int(rng.integers(2**32))
        r = np.random.default_rng(rec_seed)
        events = corpus.sample_events(r)
        bg = corpus.sample_background(r, events_tags(events))
        caption, pids = corpus.caption_for(events, r)
        batch.append(_record(events, bg, caption, pids, rec_seed, corpus.snr_db, sample_rate=corpus.sample_rate))
    return batch


@dataclass
class TestTarget:
    events: list
    caption: str
    paraphrase_ids: list
    heldout_captions: list
    seed: int


def sample_test_targets(corpus, n, seed):
    """Distinct evaluation targets, each with a seen caption and all held-out paraphrases."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        tseed = int(rng.integers(2**32))
        r = np.random.default_rng(tseed)
        events = corpus.sample_events(r)
        caption, pids = corpus.caption_for(events, r)
        heldout = [
            render_caption([e.class_tag for e in events], [h] * len(events), [e.params for e in events])
            for h in corpus.heldout_paraphrases
        ]
        out.append(TestTarget(events, caption, pids, heldout, tseed))
    return out


def build_test_set(targets, corpus, backgrounds_per_target=5, seed=0):
    """Manifest entries: every target mixed with ``backgrounds_per_target`` tag-disjoint backgrounds."""
    rng = np.random.default_rng(seed)
    manifest = []
    for ti, tgt in enumerate(targets):
        tags = events_tags(tgt.events)
        for bi in range(backgrounds_per_target):
            rec_seed = int(rng.integers(2**32))
            bg = corpus.sample_background(np.random.default_rng(rec_seed), tags)
            manifest.append(
                {
                    "id": f"t{ti:04d}_b{bi}",
                    "target_spec": [e.to_dict() for e in tgt.events],
                    "background_spec": bg.to_dict(),
                    "caption": tgt.caption,
                    "heldout_captions": list(tgt.heldout_captions),
                    "target_tags": sorted(tags),
                    "background_tags": sorted(bg.tags),
                    "seed": rec_seed,
                    "snr_db": corpus.snr_db,
                    "target_id": f"t{ti:04d}",
                }
            )
    return manifest


def materialize(entry, sample_rate=SAMPLE_RATE):
    """Re-synthesise a manifest entry into a MixtureRecord."""
    events = [SourceSpec.from_dict(d) for d in entry["target_spec"]]
    bg = SourceSpec.from_dict(entry["background_spec"])
    return _record(
        events,
        bg,
        entry["caption"],
        [],
        entry["seed"],
        entry["snr_db"],
        rid=entry["id"],
        heldout=entry.get("heldout_captions", []),
        sample_rate=sample_rate,
    )


def dumps_manifest(manifest):
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in manifest)


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_manifest(manifest))


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
