import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dysphase.corpus import SynthSpec, synthesize_corpus
from dysphase.experiment import (
    CVConfig,
    FoldPlanError,
    MissingCacheError,
    build_segment_set,
    emit_report,
    load_report,
    make_folds,
    parse_config,
    run_cross_validation,
    speaker_score,
    speaker_scores,
    train_model,
    accuracy,
    auc,
)
from dysphase.featurizer import FeatureConfig, SegmenterParams, extract_corpus
from dysphase.neuralnet import Network, TrainConfig, build_single_cnn


def pairwise_auc(scores, labels):
    """O(n^2) oracle: fraction of (positive, negative) pairs ranked correctly."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def speakers(n0, n1):
    return {**{f"a{i:03d}": 0 for i in range(n0)}, **{f"b{i:03d}": 1 for i in range(n1)}}


# --------------------------------------------------------------------------
# folds


def test_full_scale_folds():
    plan = make_folds(speakers(50, 50), 10, seed=0)
    for f in plan.folds:
        assert len(f.test) == 10
        assert sum(plan.labels[s] for s in f.test) == 5
        assert len(f.dev) == len(f.test)
        assert sum(plan.labels[s] for s in f.dev) == 5
        assert len(f.train) == 80


def check_plan(plan, expect_equal_dev=True):
    labels = plan.labels
    all_test = [s for f in plan.folds for s in f.test]
    assert sorted(all_test) == sorted(labels)
    for f in plan.folds:
        t, d, r = set(f.test), set(f.dev), set(f.train)
        assert not (t & d or t & r or d & r)
        assert t | d | r == set(labels)
        if expect_equal_dev:
            assert len(f.dev) == len(f.test)
            for c in (0, 1):
                assert sum(labels[s] == c for s in f.dev) == sum(labels[s] == c for s in f.test)
        assert {labels[s] for s in f.train} == {0, 1}


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 10), st.integers(0, 30), st.integers(0, 30), st.integers(0, 2**31 - 1))
def test_fold_integrity_property(k, extra0, extra1, seed):
    # k >= 4 and n >= 12 guarantee n >= 3 * ceil(n / k), where dev can match test
    n0, n1 = max(k, 12) + extra0, max(k, 12) + extra1
    check_plan(make_folds(speakers(n0, n1), k, seed))


def test_small_classes_cap_dev_size():
    """With k=2 and 10 speakers per class, dev cannot match test and still
    leave training speakers; it is capped at half of the remainder."""
    plan = make_folds(speakers(10, 10), 2, seed=0)
    check_plan(plan, expect_equal_dev=False)
    for f in plan.folds:
        assert len(f.test) == 10 and len(f.dev) == 4 and len(f.train) == 6


def test_folds_deterministic_and_seed_dependent():
    a = make_folds(speakers(20, 20), 5, seed=1)
    assert a.folds == make_folds(speakers(20, 20), 5, seed=1).folds
    assert a.folds != make_folds(speakers(20, 20), 5, seed=2).folds


def test_fold_errors():
    with pytest.raises(FoldPlanError, match="fewer than k"):
        make_folds(speakers(3, 10), 4)
    with pytest.raises(FoldPlanError):
        make_folds(speakers(5, 5), 1)


# --------------------------------------------------------------------------
# metrics


def test_auc_examples():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 2])


def test_auc_equals_pairwise_oracle_on_random_scores():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding forces ties
        assert auc(scores, labels) == pairwise_auc(scores, labels)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=4, max_size=30), st.integers(0, 1000))
def test_auc_invariant_to_monotone_transform(raw, seed):
    # integer scores keep the transform strictly monotone in floating point
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, len(raw))
    labels[:2] = [0, 1]
    s = np.array(raw, dtype=float)
    assert auc(np.exp(s) * 3 + 1, labels) == auc(s, labels)


def test_accuracy_examples():
    assert accuracy([0.9, 0.1], [1, 0]) == 100.0
    assert accuracy([0.5], [1]) == 100.0
    assert accuracy([0.4999999], [1]) == 0.0
    assert accuracy([0.9, 0.9], [1, 0]) == 50.0
    with pytest.raises(ValueError):
        accuracy([], [])


class FixedProb:
    """Stand-in model returning preset dysarthric probabilities."""

    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)

    def predict_proba(self, x):
        return np.stack([1 - self.p, self.p], axis=1)


def test_speaker_score_examples():
    assert speaker_score(FixedProb([0.8, 0.8, 0.8]), None) == pytest.approx(0.8)
    assert speaker_score(FixedProb([0.2, 0.4, 0.9]), None) == pytest.approx(0.5)
    assert speaker_score(FixedProb([0.37]), None) == 0.37
    with pytest.raises(ValueError):
        speaker_score(FixedProb([]), None)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.randoms())
def test_soft_vote_order_invariant(probs, rnd):
    shuffled = list(probs)
    rnd.shuffle(shuffled)
    assert speaker_score(FixedProb(probs), None) == speaker_score(FixedProb(shuffled), None)


def test_speaker_scores_groups_by_speaker():
    from dysphase.experiment import SegmentSet

    segs = SegmentSet([np.zeros((4, 1, 1))], np.array([1, 1, 0, 1]), ["s1", "s1", "s2", "s1"], [("u", i) for i in range(4)])
    out = speaker_scores(FixedProb([0.2, 0.4, 0.7, 0.9]), segs)
    assert out == {"s1": pytest.approx(0.5), "s2": pytest.approx(0.7)}


def test_parse_config():
    assert parse_config("mag") == ("mag",)
    assert parse_config("mag+if") == ("mag", "if")
    for bad in ("cqt", "mag+mag", "mag+if+phase", ""):
        with pytest.raises(ValueError):
            parse_config(bad)


# --------------------------------------------------------------------------
# data plumbing and a miniature cross-validation


SMALL_CFG = FeatureConfig(segmenter=SegmenterParams(50, 0.5))


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cv")
    man = synthesize_corpus(SynthSpec(n_speakers_per_class=4, utterance_seconds=1.0), root / "corpus")
    for rep in ("mag", "if"):
        extract_corpus(man, rep, root / "cache", SMALL_CFG)
    return man, root


def test_segment_set_pairing_and_order(tiny_corpus):
    from dysphase.experiment import load_feature_data

    man, root = tiny_corpus
    data = load_feature_data(man, ("mag", "if"), root / "cache")
    labels = man.speaker_labels()
    spk = ["nt001", "dy002"]
    s = build_segment_set(data, ("mag", "if"), spk, labels)
    assert len(s.inputs) == 2 and s.inputs[0].shape == s.inputs[1].shape == (6, 81, 50)
    assert s.speakers == ["dy002"] * 3 + ["nt001"] * 3
    assert list(s.labels) == [1, 1, 1, 0, 0, 0]
    assert s.keys[:3] == [("dy002_u00", 0), ("dy002_u00", 1), ("dy002_u00", 2)]


def test_missing_cache_reported(tiny_corpus):
    man, root = tiny_corpus
    with pytest.raises(MissingCacheError, match="run extract"):
        run_cross_validation(man, root / "cache", CVConfig(configs=["phase"], k=2, n_seeds=1, n_splits=1))


def test_train_model_rejects_overlap(tiny_corpus):
    from dysphase.experiment import load_feature_data

    man, root = tiny_corpus
    data = load_feature_data(man, ("mag",), root / "cache")
    labels = man.speaker_labels()
    a = build_segment_set(data, ("mag",), ["nt000", "dy000"], labels)
    b = build_segment_set(data, ("mag",), ["nt000", "dy001"], labels)
    with pytest.raises(FoldPlanError, match="both train and dev"):
        train_model(TrainConfig(max_epochs=1), build_single_cnn(), a, b)
    empty = build_segment_set(data, ("mag",), [], labels)
    with pytest.raises(ValueError):
        train_model(TrainConfig(max_epochs=1), build_single_cnn(), empty, b)


def test_miniature_cross_validation_and_report(tiny_corpus, tmp_path):
    man, root = tiny_corpus
    cv = CVConfig(configs=["if", "mag+if"], k=2, n_seeds=2, n_splits=1)
    rep = run_cross_validation(man, root / "cache", cv, TrainConfig(max_epochs=1, batch_size=16))
    # one metric entry per configuration and (seed, split)
    assert len(rep.results) == 2 * 2
    assert {(r.config, r.seed) for r in rep.results} == {("if", 0), ("if", 1), ("mag+if", 0), ("mag+if", 1)}
    for r in rep.results:
        assert 0 <= r.accuracy <= 100 and 0 <= r.auc <= 1
    # each speaker scored exactly once per (config, seed, split)
    for c, t in itertools.product(cv.configs, range(2)):
        assert sorted(r.speaker_id for r in rep.rows if r.config == c and r.seed == t) == sorted(man.speaker_labels())
    summ = rep.summary()
    accs = [r.accuracy for r in rep.results if r.config == "if"]
    assert summ["if"]["accuracy_std"] == pytest.approx(np.std(accs))

    paths = emit_report(rep, tmp_path / "a")
    emit_report(rep, tmp_path / "b")
    for p in paths:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    lines = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert lines[0] == "config,accuracy_mean,accuracy_std,auc_mean,auc_std" and len(lines) == 3
    head = (tmp_path / "a" / "results.csv").read_text().splitlines()[0]
    assert head == "config,representations,seed,split,fold,speaker_id,label,score"
    text = (tmp_path / "a" / "summary.txt").read_text(encoding="utf-8")
    assert "72.64 ± 13.37" in text and "93.68 ± 5.32" in text

    again = load_report(tmp_path / "a")
    assert again.rows == rep.rows and again.results == rep.results
    emit_report(again, tmp_path / "c")
    for p in paths:
        assert p.read_bytes() == (tmp_path / "c" / p.name).read_bytes()


def test_dual_initialised_from_the_fold_singles(tiny_corpus, monkeypatch):
    """The dual model's branches start from the singles trained in the same job."""
    import dysphase.experiment as ex

    man, root = tiny_corpus
    seen = {}
    real_build = ex.build_dual_cnn

    def spy(a, b, **kw):
        net = real_build(a, b, **kw)
        seen["a"], seen["b"], seen["dual"] = a.state, b.state, net.state()
        return net

    monkeypatch.setattr(ex, "build_dual_cnn", spy)
    run_cross_validation(man, root / "cache", CVConfig(configs=["mag+if"], k=2, n_seeds=1, n_splits=1),
                         TrainConfig(max_epochs=1, batch_size=16))
    for name, v in seen["a"].items():
        if name.startswith("branch0."):
            assert np.array_equal(seen["dual"][name], v)
            assert np.array_equal(seen["dual"][name.replace("branch0", "branch1", 1)], seen["b"][name])
