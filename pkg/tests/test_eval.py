import json

import jsonschema
import numpy as np
import pytest

from emforge.encoder import ModelConfig, init_params
from emforge.eval import (
    REPORT_SCHEMA,
    DatasetScore,
    aggregate,
    embed_corpus,
    emit_report,
    load_report,
    parse_report,
    precision_at_1,
    rank,
    render_report,
    score_pool,
)
from emforge.instruction import FormattedInput

from oracles import brute_force_rank


def test_rank_matches_brute_force_on_random_pools():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = int(rng.integers(2, 16))
        n = int(rng.integers(1, 80))
        q = rng.normal(size=d)
        c = rng.normal(size=(n, d))
        if rng.random() < 0.2:
            # duplicated rows force ties
            c[rng.integers(n)] = c[0]
        assert rank(q, c) == brute_force_rank(q, c)


def test_rank_tie_goes_to_lowest_index():
    c = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    assert rank(np.array([1.0, 0.0]), c) == 1
    assert rank(np.array([1.0, 1.0]), np.ones((4, 2))) == 0


def test_rank_errors():
    with pytest.raises(ValueError, match="candidate"):
        rank(np.ones(3), np.zeros((0, 3)))
    with pytest.raises(ValueError, match="dimension"):
        rank(np.ones(3), np.ones((2, 4)))


def test_precision_at_1():
    pools = [score_pool("a", np.array([1.0, 0.0]), np.eye(2), 0),
             score_pool("b", np.array([1.0, 0.0]), np.eye(2), 1)]
    assert pools[0].correct and not pools[1].correct
    assert precision_at_1(pools) == 0.5
    with pytest.raises(ValueError):
        precision_at_1([])


def table_one_datasets():
    meta = {"classification": (0.548, 10), "vqa": (0.549, 10), "retrieval": (0.623, 12), "grounding": (0.795, 4)}
    return [DatasetScore(f"{m}-{i:02d}", m, False, score) for m, (score, n) in meta.items() for i in range(n)]


def test_aggregate_reproduces_reported_overall():
    report = aggregate(table_one_datasets())
    assert round(100 * report.overall, 1) == 60.1
    assert report.meta == pytest.approx({"classification": 0.548, "vqa": 0.549, "retrieval": 0.623, "grounding": 0.795})
    assert report.counts["overall"] == 36


def test_aggregate_is_unweighted_by_pool_count():
    report = aggregate({"a": (1.0, "vqa", False, 1000), "b": (0.0, "vqa", True, 1)})
    assert report.overall == 0.5
    assert report.ind == 1.0 and report.ood == 0.0


def test_aggregate_rejects_empty_and_unknown():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError, match="meta_task"):
        aggregate({"x": (0.5, "captioning", False)})


def small_report():
    return aggregate({
        "cls": (0.75, "classification", False, 40),
        "cls-ood": (0.5, "classification", True, 40),
        "ret": (0.925, "retrieval", False, 200),
    })


def test_report_json_round_trip_and_schema(tmp_path):
    report = small_report()
    path = tmp_path / "r.json"
    emit_report(report, "json", path)
    jsonschema.validate(json.loads(path.read_text()), REPORT_SCHEMA)
    assert load_report(path) == report


def test_report_csv_round_trip(tmp_path):
    report = small_report()
    text = render_report(report, "csv")
    # header, one row per dataset, one per meta-task present, ind, ood, overall
    assert len(text.splitlines()) == 1 + 3 + 2 + 3
    assert parse_report(text, "csv") == report
    path = tmp_path / "r.csv"
    emit_report(report, "csv", path)
    assert load_report(path) == report


def test_report_percentages_one_decimal():
    text = render_report(aggregate(table_one_datasets()), "csv")
    overall = [line for line in text.splitlines() if line.startswith("aggregate,overall")][0]
    assert overall.split(",")[5] == "60.1"


def test_plotdata_rows():
    lines = render_report(small_report(), "plotdata").splitlines()
    assert lines[0] == "group\tscore"
    assert dict(line.split("\t") for line in lines[1:]) == {
        "classification": "62.5", "retrieval": "92.5", "ind": "83.8", "ood": "50.0", "overall": "72.5"}


def test_unknown_format():
    with pytest.raises(ValueError, match="format"):
        render_report(small_report(), "xml")
    with pytest.raises(ValueError):
        parse_report("kind,name\n", "csv")


def test_embed_corpus_dedup_and_independence():
    cfg = ModelConfig(hidden_dim=16, layers=1, heads=2, max_seq=48, patch_size=4)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    images = {f"i{k}": rng.random((1, 8, 8)) for k in range(3)}
    images["copy"] = images["i0"].copy()
    inputs = [FormattedInput("[IMG] a", "i0"), FormattedInput("b", None), FormattedInput("[IMG] a", "copy"),
              FormattedInput("[IMG] c", "i2"), FormattedInput("b", None)]
    dedup = embed_corpus(params, cfg, inputs, images.__getitem__)
    full = embed_corpus(params, cfg, inputs, images.__getitem__, dedup=False)
    assert dedup.tobytes() == full.tobytes()
    assert dedup[0].tobytes() == dedup[2].tobytes()
    alone = embed_corpus(params, cfg, inputs[3:4], images.__getitem__)
    assert alone[0].tobytes() == full[3].tobytes()
    np.testing.assert_allclose(np.linalg.norm(full, axis=1), 1.0, atol=1e-6)


def test_embed_corpus_names_bad_input():
    cfg = ModelConfig(hidden_dim=16, layers=1, heads=2, max_seq=48, patch_size=4)
    params = init_params(cfg, seed=0)
    bad = [FormattedInput("[IMG] x", "rgb")]
    with pytest.raises(ValueError, match="input q-7"):
        embed_corpus(params, cfg, bad, lambda _: np.zeros((3, 8, 8)), ids=["q-7"])
