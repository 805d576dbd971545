import numpy as np
import pytest

from lassnet import datagen, metrics
from lassnet.evaluate import (
    default_test_manifest,
    evaluate_testset,
    improvement,
    merge_reports,
    queries_for,
)
from lassnet.train import TrainConfig, build_model

TINY = dict(batch_size=2, channel_divisor=64, d_q=8, query_d_model=8, query_blocks=1, query_heads=2, query_d_ff=16, clip_s=0.25)


@pytest.fixture(scope="module")
def manifest():
    corpus = datagen.Corpus(duration_s=0.25)
    return default_test_manifest(corpus, n_targets=3, backgrounds_per_target=2)


@pytest.fixture(scope="module")
def text_model():
    return build_model(TrainConfig(**TINY))


def test_default_manifest_has_250_records():
    m = default_test_manifest(datagen.Corpus(duration_s=0.25))
    assert len(m) == 250
    assert len({e["id"] for e in m}) == 250
    assert len({e["target_id"] for e in m}) == 50


def test_unprocessed_si_sdr_is_near_zero(manifest):
    report = evaluate_testset(None, manifest, filter_len=64)
    agg = report["systems"]["Unprocessed"]["aggregate"]
    assert -1.0 <= agg["si_sdr"]["median"] <= 1.0
    assert set(report["systems"]) == {"Unprocessed"}


def test_report_rows_and_determinism(manifest, text_model):
    a = evaluate_testset(text_model, manifest, filter_len=64)
    b = evaluate_testset(text_model, manifest, filter_len=64)
    assert metrics.report_to_json(a) == metrics.report_to_json(b)
    assert {"Unprocessed", "Model"} <= set(a["systems"])
    assert [r["id"] for r in a["systems"]["Model"]["examples"]] == [e["id"] for e in manifest]
    assert np.isfinite(improvement(a, "si_sdr"))


def test_batching_does_not_change_results(manifest, text_model):
    a = evaluate_testset(text_model, manifest, filter_len=64, batch_size=1)
    b = evaluate_testset(text_model, manifest, filter_len=64, batch_size=16)
    ra, rb = a["systems"]["Model"]["examples"], b["systems"]["Model"]["examples"]
    for x, y in zip(ra, rb):
        assert x["si_sdr"] == pytest.approx(y["si_sdr"], abs=1e-3)


def test_heldout_mode_averages_one_row_per_mixture(manifest, text_model):
    report = evaluate_testset(text_model, manifest, filter_len=64, caption_mode="heldout")
    rows = report["systems"]["Model"]["examples"]
    assert len(rows) == len(manifest)
    for row, entry in zip(rows, manifest):
        assert row["n_queries"] == len(entry["heldout_captions"]) >= 2
    assert report["caption_mode"] == "heldout"


def test_queries_for_modes(manifest):
    entry = manifest[0]
    assert queries_for(entry, "text", "seen") == [entry["caption"]]
    assert queries_for(entry, "text", "heldout") == entry["heldout_captions"]
    assert entry["caption"] not in entry["heldout_captions"]
    assert queries_for(entry, "tags", "seen") == [sorted(entry["target_tags"])]
    with pytest.raises(ValueError):
        queries_for({**entry, "heldout_captions": []}, "text", "heldout")
    with pytest.raises(ValueError):
        evaluate_testset(None, manifest, caption_mode="unseen")


def test_tag_mode_runs_through_same_pipeline(manifest):
    model = build_model(TrainConfig(**TINY, mode="tags"))
    report = evaluate_testset(model, manifest, filter_len=64, system_name="Tag-query")
    assert report["query_mode"] == "tags"
    text = evaluate_testset(build_model(TrainConfig(**TINY)), manifest, filter_len=64, include_unprocessed=False)
    merged = merge_reports(report, text)
    assert set(merged["systems"]) == {"Unprocessed", "Tag-query", "Model"}
    assert "Tag-query" in metrics.report_to_csv(merged)


def test_merge_rejects_different_test_sets(manifest):
    a = evaluate_testset(None, manifest, filter_len=32)
    b = evaluate_testset(None, manifest[:2], filter_len=32)
    with pytest.raises(ValueError):
        merge_reports(a, b)
