import numpy as np
import pytest

from nodulesynth.metrics import MetricsReport, auc, confusion_report, format_metrics_table, mean_metrics


def auc_pairwise_oracle(scores, labels):
    """O(n^2) Mann-Whitney enumeration with half-credit ties."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins2 = 0  # doubled so everything stays integer
    for p in pos:
        for q in neg:
            if p > q:
                wins2 += 2
            elif p == q:
                wins2 += 1
    return wins2 / (2 * len(pos) * len(neg))


def test_auc_perfect_ranking():
    assert auc([0.9, 0.8], [1, 0]) == 1.0


def test_auc_all_ties():
    assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_auc_hand_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_matches_pairwise_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        # coarse score grid forces plenty of ties
        scores = (rng.integers(0, 7, size=n) / 6.0).tolist()
        labels = rng.integers(0, 2, size=n).tolist()
        if sum(labels) in (0, n):
            labels[0] = 1 - labels[0]
        assert auc(scores, labels) == auc_pairwise_oracle(scores, labels)


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=30).tolist()
    labels = (rng.random(30) < 0.4).astype(int).tolist()
    if sum(labels) in (0, 30):
        labels[0] = 1 - labels[0]
    base = auc(scores, labels)
    assert auc([np.tanh(s) for s in scores], labels) == base
    assert auc([3.0 * s + 11.0 for s in scores], labels) == base


def test_auc_label_flip_complement():
    rng = np.random.default_rng(2)
    scores = rng.permutation(40).astype(float).tolist()  # tie-free
    labels = (rng.random(40) < 0.5).astype(int).tolist()
    if sum(labels) in (0, 40):
        labels[0] = 1 - labels[0]
    flipped = [1 - l for l in labels]
    assert auc(scores, labels) + auc(scores, flipped) == pytest.approx(1.0, abs=1e-12)


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_confusion_report_counts():
    scores = [0.9, 0.4, 0.6, 0.1]
    labels = [1, 1, 0, 0]
    rep = confusion_report(scores, labels, threshold=0.5)
    assert (rep.tp, rep.fn, rep.fp, rep.tn) == (1, 1, 1, 1)
    assert rep.acc == 0.5
    rep.validate()


def test_confusion_identities_on_random_predictions():
    rng = np.random.default_rng(3)
    for _ in range(25):
        n = int(rng.integers(4, 60))
        scores = rng.random(n).tolist()
        labels = rng.integers(0, 2, size=n).tolist()
        if sum(labels) in (0, n):
            labels[0] = 1 - labels[0]
        rep = confusion_report(scores, labels)
        rep.validate()
        assert rep.n == n


def test_constant_benign_predictor_on_imbalanced_split():
    """133 benign / 24 malignant with an always-benign model."""
    labels = [0] * 133 + [1] * 24
    scores = [0.0] * 157
    rep = confusion_report(scores, labels, threshold=0.5)
    assert rep.acc == pytest.approx(133 / 157, abs=1e-9)
    assert rep.sen == 0.0
    assert rep.spe == 1.0
    assert rep.auc == 0.5  # all scores tie


def test_mean_metrics_and_table():
    reps = [
        confusion_report([0.9, 0.1], [1, 0]),
        confusion_report([0.2, 0.7], [1, 0]),
    ]
    m = mean_metrics(reps)
    assert m["auc"] == pytest.approx(0.5)
    table = format_metrics_table({"Raw": [("seed-0", reps[0]), ("seed-1", reps[1])]})
    assert "Network" in table and "AUC" in table
    assert "Raw" in table and "Mean" in table
    assert len(table.splitlines()) == 5


def test_report_validate_catches_inconsistency():
    rep = MetricsReport(acc=0.9, sen=1.0, spe=1.0, auc=0.5, tp=1, tn=1, fp=0, fn=0, n=2)
    with pytest.raises(ValueError):
        rep.validate()
