import json
import pathlib

import numpy as np
import pytest

import saesens

DATA = pathlib.Path(__file__).resolve().parents[1] / "data"


def test_lcs_and_spearman():
    assert saesens.lcs_tokens([1, 2, 3, 4], [9, 2, 3, 4, 7]) == 3
    assert saesens.lcs_tokens([], [1]) == 0
    assert saesens.spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(saesens.UndefinedMetricError):
        saesens.spearman([1, 1, 1], [1, 2, 3])


def test_filter_feature_checks_count_first():
    v = saesens.filter_feature(3, 14, 1.0)
    assert v["passed"] is False and v["enough_examples"] is False
    v = saesens.filter_feature(3, 15, 0.9)
    assert v["passed"] is True


def test_frequency_weighting_identical_histograms():
    freqs = {"a": {0: 0.01, 1: 0.001}, "b": {5: 0.01, 6: 0.001}}
    w = saesens.frequency_weighting(freqs, n_bins=4)
    assert w["weights"] == {"a": [[0, 1.0], [1, 1.0]], "b": [[5, 1.0], [6, 1.0]]}
    assert w["target_distribution"] == [0.5, 0.0, 0.0, 0.5]


def test_prompt_matches_golden_files():
    system, user = saesens.build_prompt((DATA / "prompt_fixture.examples.json").read_text())
    assert system == (DATA / "prompt_fixture.system.txt").read_text()
    assert user == (DATA / "prompt_fixture.user.txt").read_text()


def test_parse_samples():
    samples = saesens.parse_samples("A {{x}} B<SAMPLE_SEPARATOR/>C")
    assert [s["clean_text"] for s in samples] == ["A x B", "C"]
    assert samples[0]["target_spans"] == [[2, 3]]
    with pytest.raises(saesens.ParseError):
        saesens.parse_samples("   ")


def test_pipeline_on_fixture(tmp_path):
    config = saesens.write_fixture(tmp_path / "fx")
    p = saesens.Pipeline(config)
    with pytest.raises(saesens.ChainError):
        p.score()
    status = {stage: getattr(p, stage)() for stage in ("collect", "generate", "score", "analyze")}
    # The fixture scripts one feature whose every request fails.
    assert status == {"collect": "ok", "generate": "partial", "score": "partial", "analyze": "ok"}

    out = pathlib.Path(p.output_dir)
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[1:] == (DATA / "fixture_summary.csv").read_text().splitlines()[1:]

    sae = saesens.load_sae(pathlib.Path(config).parent / "lex-a.safetensors")
    assert sae.width == 20
    acts = sae.encode(np.zeros((3, sae.d_model), dtype=np.float32))
    assert acts.shape == (3, 20) and not acts.any()
    with pytest.raises(saesens.ShapeError):
        sae.encode(np.zeros(sae.d_model, dtype=np.float32))

    session = saesens.build_session(p, "s1")
    assert len(session["items"]) == 10


def test_missing_config_raises(tmp_path):
    with pytest.raises(saesens.SaesensError):
        saesens.Pipeline(tmp_path / "nope.json")
