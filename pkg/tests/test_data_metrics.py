import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vista.data import (
    CsvSchema,
    SequenceBatch,
    SyntheticConfig,
    SyntheticWorld,
    generate,
    generate_dataset,
    ingest_csv,
    write_csv,
)
from vista.errors import ConfigError, DegenerateLabels, EmptyFile, SchemaMismatch
from vista.metrics import auc, auc_standard_error, evaluate, expected_auc, ne


# -- metrics -------------------------------------------------------------------

def test_ne_hand_example():
    # CE = -ln 0.8, base entropy = ln 2
    assert ne([0.8, 0.2], [1, 0]) == pytest.approx(0.32192, abs=1e-5)


def test_ne_of_base_rate_predictor_is_one():
    y = np.array([1, 0, 0, 0, 1, 0, 0, 0])
    assert ne(np.full(8, y.mean()), y) == pytest.approx(1.0, abs=1e-12)


def test_ne_clamps_extreme_predictions():
    val = ne([0.0, 1.0], [1, 0])
    assert np.isfinite(val) and val > 30


def test_auc_hand_example():
    assert auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == pytest.approx(0.75)


def test_auc_ties_count_half():
    assert auc([0.5, 0.5], [1, 0]) == 0.5


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pairwise_count(rows):
    scores = [float(s) for s, _ in rows]
    labels = [int(y) for _, y in rows]
    if len(set(labels)) < 2:
        with pytest.raises(DegenerateLabels):
            auc(scores, labels)
        return
    assert auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=50)
    y = np.r_[1, 0, rng.integers(0, 2, size=48)]
    assert auc(s, y) == auc(np.exp(3 * s) + 7, y)


def test_degenerate_labels_rejected():
    with pytest.raises(DegenerateLabels):
        ne([0.5, 0.5], [1, 1])
    with pytest.raises(DegenerateLabels):
        auc([0.5], [0])


def test_expected_auc_matches_pairwise_sum():
    rng = np.random.default_rng(3)
    s = rng.integers(0, 6, size=40).astype(float)
    p = rng.random(40)
    num = den = 0.0
    for i in range(40):
        for j in range(40):
            if i == j:
                continue
            w = p[i] * (1 - p[j])
            den += w
            num += w * (1.0 if s[i] > s[j] else 0.5 if s[i] == s[j] else 0.0)
    assert expected_auc(s, p) == pytest.approx(num / den, abs=1e-12)


def test_auc_standard_error_shrinks_with_samples():
    assert auc_standard_error(0.75, 1000, 1000) < auc_standard_error(0.75, 100, 100)
    assert auc_standard_error(0.75, 1000, 1000) == pytest.approx(0.0112, abs=5e-4)


def test_evaluate_buckets():
    preds = np.array([0.9, 0.1, 0.8, 0.3, 0.6, 0.4])
    labels = np.array([1, 0, 1, 0, 1, 1])
    lengths = np.array([10, 10, 100, 100, 600, 600])
    report = evaluate(preds, labels, lengths)
    assert report.count == 6
    assert [b["min_len"] for b in report.buckets] == [0, 64, 512]
    assert report.buckets[0]["auc"] == 1.0
    assert report.buckets[2]["auc"] is None  # single class
    assert '"auc"' in report.to_json()


# -- synthetic generator --------------------------------------------------------

SMALL = SyntheticConfig(n_users=40, n_items=500, min_len=4, max_len=20, seed=5)


def test_generator_is_deterministic():
    a = [b.to_bytes() for b in generate(SMALL)]
    b = [b.to_bytes() for b in generate(SMALL)]
    assert a == b
    other = [b.to_bytes() for b in generate(SyntheticConfig(**{**SMALL.to_dict(), "seed": 6}))]
    assert a != other


def test_generator_shapes_and_ranges():
    for b in generate(SMALL):
        assert SMALL.min_len <= b.history_length <= SMALL.max_len
        assert b.n_candidates == SMALL.n_candidates
        assert b.uih_items.max() < SMALL.n_items and b.uih_cats.max() < SMALL.n_categories


def test_item_category_is_consistent():
    world = SyntheticWorld(SMALL)
    for b in generate(SMALL, world):
        np.testing.assert_array_equal(world.item_cat[b.uih_items], b.uih_cats)
        np.testing.assert_array_equal(world.item_cat[b.cand_items], b.cand_cats)


def test_noise_controls_bayes_auc():
    base = dict(n_users=600, n_items=2000, min_len=2, max_len=4)
    clean = generate_dataset(SyntheticConfig(**base, noise=0.0))
    noisy = generate_dataset(SyntheticConfig(**base, noise=1.0))
    hopeless = generate_dataset(SyntheticConfig(**base, noise=1e6))
    assert clean.bayes_auc() == 1.0
    assert 0.65 < noisy.bayes_auc() < 0.85
    assert abs(hopeless.bayes_auc() - 0.5) < 0.05
    assert noisy.expected_bayes_auc() == pytest.approx(noisy.bayes_auc(), abs=0.03)


def test_labels_roughly_balanced():
    ds = generate_dataset(SyntheticConfig(n_users=500, n_items=2000, min_len=2, max_len=4))
    assert 0.4 < ds.labels.mean() < 0.6


def test_config_validation():
    with pytest.raises(ConfigError, match="min_len"):
        SyntheticConfig(min_len=10, max_len=5).validate()
    with pytest.raises(ConfigError, match="noise"):
        SyntheticConfig(noise=-1).validate()


def test_batch_validation():
    with pytest.raises(ValueError):
        SequenceBatch("u", [1, 2], [1], [3], [0], [1])
    with pytest.raises(ValueError):
        SequenceBatch("u", [1], [1], [3], [0], [2])


# -- CSV -------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    batches = list(generate(SMALL))[:5]
    path = tmp_path / "data.csv"
    write_csv(batches, path)
    back, report = ingest_csv(path)
    assert report.skipped == 0 and report.rows == sum(b.n_candidates for b in batches)
    assert len(back) == len(batches)
    for a, b in zip(batches, back):
        assert a.user_id == b.user_id
        for name in ("uih_items", "uih_cats", "cand_items", "cand_cats", "labels"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_csv_skips_malformed_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "label,user_id,item_id,cate_id,item_history,cate_history\n"
        "1,u1,5,2,1^2^3,0^1^1\n"
        "x,u1,6,2,1^2^3,0^1^1\n"
        "0,u1,7,3,1^2^3,0^1\n"
        "0,u1,8,3,1^2^3,0^1^1\n"
    )
    batches, report = ingest_csv(path)
    assert report.rows == 4 and report.skipped == 2
    assert [line for line, _ in report.problems] == [3, 4]
    assert len(batches) == 1
    np.testing.assert_array_equal(batches[0].cand_items, [5, 8])


def test_csv_schema_mismatch(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("label,user,item_id\n1,u,2\n")
    with pytest.raises(SchemaMismatch, match="user_id"):
        ingest_csv(path)


def test_csv_custom_schema(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("y,uid,iid,cid,hist,chist\n1,a,1,0,4|5,1|1\n")
    schema = CsvSchema("y", "uid", "iid", "cid", "hist", "chist", "|")
    batches, _ = ingest_csv(path, schema)
    np.testing.assert_array_equal(batches[0].uih_items, [4, 5])


def test_csv_empty_file(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("")
    with pytest.raises(EmptyFile):
        ingest_csv(path)
