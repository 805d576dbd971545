"""Test-set evaluation: model vs. unprocessed mixture, with optional caption averaging."""

from __future__ import annotations

import logging
import os

import numpy as np

from . import datagen, dsp, metrics
from .autodiff import no_grad

log = logging.getLogger(__name__)

CAPTION_MODES = ("seen", "heldout")


def load_entry(entry, base_dir=None):
    """Mixture, target and (scaled) background waveforms for a manifest entry.

    Entries written by ``synth-data`` reference WAV files; bare entries are
    re-synthesised from their source specs.
    """
    files = entry.get("files")
    if files:
        base = base_dir or "."
        out = []
        for key in ("mixture", "target", "background"):
            path = os.path.join(base, files[key])
            if not os.path.exists(path):
                raise FileNotFoundError(f"{entry['id']}: missing audio file {path}")
            out.append(dsp.read_wav(path))
        return tuple(out)
    rec = datagen.materialize(entry)
    return rec.mixture, rec.target, rec.background


def queries_for(entry, mode, caption_mode):
    if mode == "tags":
        return [sorted(entry["target_tags"])]
    if caption_mode == "seen":
        return [entry["caption"]]
    caps = entry.get("heldout_captions") or []
    if not caps:
        raise ValueError(f"{entry['id']}: no held-out captions in manifest")
    return list(caps)


def _metrics_row(entry_id, estimate, target, background, filter_len):
    try:
        row = metrics.all_metrics(estimate, target, background, filter_len)
    except (metrics.MetricError, ValueError, FloatingPointError) as exc:
        log.warning("%s: metric failure: %s", entry_id, exc)
        return {"id": entry_id, "error": str(exc), **{m: None for m in metrics.METRICS}}
    row["id"] = entry_id
    return row


def _average_rows(entry_id, rows):
    out = {"id": entry_id, "n_queries": len(rows)}
    for m in metrics.METRICS:
        vals = [r[m] for r in rows if r.get(m) is not None]
        if len(vals) < len(rows):
            out[m] = None
            out["error"] = next(r["error"] for r in rows if r.get("error"))
        else:
            out[m] = float(np.mean(vals))
    return out


def separate_batch(model, specs, queries):
    """Masks for a list of spectrograms (equal shapes) and matching queries."""
    mags = np.stack([s.magnitude for s in specs]).astype(model.store.dtype)
    with no_grad():
        _, m = model.forward(mags, queries, training=False)
    return [
        dsp.istft(dsp.apply_mask(np.clip(m.data[i].astype(np.float64), 0.0, 1.0), s))
        for i, s in enumerate(specs)
    ]


def evaluate_testset(
    model,
    manifest,
    filter_len=512,
    caption_mode="seen",
    base_dir=None,
    batch_size=16,
    system_name="Model",
    include_unprocessed=True,
):
    """Per-example metrics for the model output and the unprocessed mixture.

    In ``caption_mode="heldout"`` each mixture is separated once per held-out
    caption and its metrics are averaged into a single row.
    """
    if caption_mode not in CAPTION_MODES:
        raise ValueError(f"caption_mode must be one of {CAPTION_MODES}")
    mode = model.config.mode if model is not None else "text"
    unprocessed, model_rows = [], []

    # flatten (entry, query) jobs so inference can be batched
    jobs = []
    loaded = {}
    for entry in manifest:
        try:
            loaded[entry["id"]] = load_entry(entry, base_dir)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("%s: could not load audio: %s", entry.get("id"), exc)
            loaded[entry["id"]] = exc
            continue
        if model is not None:
            for q in queries_for(entry, mode, caption_mode):
                jobs.append((entry["id"], q))

    estimates = {}
    if model is not None:
        by_len = {}
        for eid, q in jobs:
            n = len(loaded[eid][0].samples)
            by_len.setdefault(n, []).append((eid, q))
        for n in sorted(by_len):
            group = by_len[n]
            for start in range(0, len(group), batch_size):
                chunk = group[start : start + batch_size]
                specs = [dsp.stft(loaded[eid][0]) for eid, _ in chunk]
                outs = separate_batch(model, specs, [q for _, q in chunk])
                for (eid, _), est in zip(chunk, outs):
                    estimates.setdefault(eid, []).append(est)

    for entry in manifest:
        eid = entry["id"]
        data = loaded[eid]
        if isinstance(data, Exception):
            err = {"id": eid, "error": str(data), **{m: None for m in metrics.METRICS}}
            unprocessed.append(dict(err))
            model_rows.append(dict(err))
            continue
        mix, tgt, bg = data
        if include_unprocessed:
            unprocessed.append(_metrics_row(eid, mix, tgt, bg, filter_len))
        if model is not None:
            rows = [_metrics_row(eid, est, tgt, bg, filter_len) for est in estimates[eid]]
            model_rows.append(rows[0] if caption_mode == "seen" else _average_rows(eid, rows))

    systems = {}
    if include_unprocessed:
        systems["Unprocessed"] = {"examples": unprocessed, "aggregate": metrics.aggregate(unprocessed)}
    if model is not None:
        systems[system_name] = {"examples": model_rows, "aggregate": metrics.aggregate(model_rows)}
    return {
        "n_examples": len(manifest),
        "filter_len": filter_len,
        "caption_mode": caption_mode,
        "query_mode": mode,
        "systems": systems,
    }


def merge_reports(*reports):
    """Combine the system rows of several reports over the same manifest."""
    out = dict(reports[0])
    out["systems"] = {}
    for r in reports:
        if r["n_examples"] != reports[0]["n_examples"]:
            raise ValueError("reports cover different test sets")
        out["systems"].update(r["systems"])
    return out


def improvement(report, metric="si_sdr", system="Model", stat="median"):
    """``stat`` of ``system`` minus the same statistic of the unprocessed row."""
    s = report["systems"]
    return s[system]["aggregate"][metric][stat] - s["Unprocessed"]["aggregate"][metric][stat]


def default_test_manifest(corpus=None, n_targets=50, backgrounds_per_target=5, seed=1234):
    corpus = corpus or datagen.Corpus()
    targets = datagen.sample_test_targets(corpus, n_targets, seed)
    return datagen.build_test_set(targets, corpus, backgrounds_per_target, seed=seed + 1)
