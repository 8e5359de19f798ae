import functools

import numpy as np
import pytest

from phonerec import evaluation as ev
from phonerec.corpus import MiscueRecord


def brute_force_distance(ref, hyp):
    """Independent recursive edit-distance oracle."""
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]),
                   d(i - 1, j) + 1,
                   d(i, j - 1) + 1)
    return d(len(ref), len(hyp))


def test_align_single_substitution():
    counts, script = ev.align((10, 0, 19), (10, 6, 19))
    assert (counts.correct, counts.substitutions, counts.insertions,
            counts.deletions) == (2, 1, 0, 0)
    assert ("sub", 1, 1) in script


def test_align_identity():
    counts, script = ev.align((1, 2, 3, 4), (1, 2, 3, 4))
    assert counts.correct == 4 and counts.distance == 0
    assert all(op[0] == "match" for op in script)


def test_align_rejects_empty_reference():
    with pytest.raises(ValueError, match="non-empty"):
        ev.align((), (1,))


def test_align_counts_tie_to_lengths_and_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m = int(rng.integers(1, 7)), int(rng.integers(0, 7))
        ref = tuple(int(x) for x in rng.integers(0, 4, size=n))
        hyp = tuple(int(x) for x in rng.integers(0, 4, size=m))
        counts, script = ev.align(ref, hyp)
        assert counts.reference_length == n
        assert counts.hypothesis_length == m
        assert counts.distance == brute_force_distance(ref, hyp)


def test_align_distance_triangle_inequality():
    rng = np.random.default_rng(1)
    for _ in range(100):
        seqs = [tuple(int(x) for x in rng.integers(0, 3, size=rng.integers(1, 7)))
                for _ in range(3)]
        d = lambda a, b: ev.align(a, b)[0].distance
        assert d(seqs[0], seqs[2]) <= d(seqs[0], seqs[1]) + d(seqs[1], seqs[2])


def test_per_examples():
    assert ev.per(ev.AlignmentCounts(2, 0, 1, 0)) == pytest.approx(1 / 3)
    assert ev.per(ev.AlignmentCounts(5, 0, 0, 0)) == 0.0
    assert ev.per(ev.AlignmentCounts(1, 2, 0, 0)) == pytest.approx(2.0)
    with pytest.raises(ValueError, match="PER undefined"):
        ev.per(ev.AlignmentCounts(0, 3, 0, 0))


def test_per_invariant_under_relabeling():
    rng = np.random.default_rng(2)
    for _ in range(20):
        ref = tuple(int(x) for x in rng.integers(0, 33, size=6))
        hyp = tuple(int(x) for x in rng.integers(0, 33, size=5))
        perm = rng.permutation(33)
        a = ev.per(ev.align(ref, hyp)[0])
        b = ev.per(ev.align(tuple(perm[i] for i in ref), tuple(perm[i] for i in hyp))[0])
        assert a == pytest.approx(b)


# ------------------------------------------------------------- classifier
def test_classify_single_substitution():
    report = ev.classify_miscues((10, 0, 19), (10, 6, 19))
    assert report.verdict == "erroneous"
    assert report.miscues == [MiscueRecord("substitution", 1, 6)]


def test_classify_clean_reading():
    report = ev.classify_miscues((1, 2, 3), (1, 2, 3))
    assert report.verdict == "correct" and report.miscues == []


def test_classify_repetition_of_leading_words():
    w1, w2 = (1, 2), (3, 4, 5)
    prompted = w1 + w2
    read = w1 + w1 + w2
    report = ev.classify_miscues(prompted, read, word_lengths=[2, 3])
    assert [m.kind for m in report.miscues] == ["repetition"]
    read2 = w1 + w2 + w1 + w2
    report2 = ev.classify_miscues(prompted, read2, word_lengths=[2, 3])
    assert [m.kind for m in report2.miscues] == ["repetition"]


def test_classify_false_start():
    word = (7, 8, 9)
    prompted = (1, 2) + word
    read = (1, 2) + word[:1] + word
    report = ev.classify_miscues(prompted, read, word_lengths=[2, 3])
    assert [m.kind for m in report.miscues] == ["false_start"]
    assert report.miscues[0].position == 2


def test_classify_plain_insertion_and_deletion():
    report = ev.classify_miscues((1, 2, 3), (1, 2, 30, 3))
    assert [m.kind for m in report.miscues] == ["insertion"]
    assert report.miscues[0].detail == 30
    report = ev.classify_miscues((1, 2, 3), (1, 3))
    assert [m.kind for m in report.miscues] == ["deletion"]


def test_classify_empty_hypothesis_is_all_deletions():
    report = ev.classify_miscues((1, 2), ())
    assert [m.kind for m in report.miscues] == ["deletion", "deletion"]


def test_classifier_never_claims_hesitation():
    rng = np.random.default_rng(3)
    for _ in range(30):
        ref = tuple(int(x) for x in rng.integers(0, 33, size=6))
        hyp = tuple(int(x) for x in rng.integers(0, 33, size=rng.integers(1, 8)))
        report = ev.classify_miscues(ref, hyp)
        assert all(m.kind != "hesitation" for m in report.miscues)


# ------------------------------------------------------------- buckets
def _result(i, task, mistakes, c, ins, s, d):
    return ev.UtteranceResult(f"u{i}", task, mistakes,
                              ev.AlignmentCounts(c, ins, s, d))


def test_bucket_report_single_bucket_when_mistake_free():
    results = [_result(i, "word", 0, 5, 0, 0, 0) for i in range(4)]
    report = ev.bucket_report(results, "mistake_count")
    assert list(report) == ["0"]
    assert report["0"].per == 0.0
    assert report["0"].phone_share == pytest.approx(1.0)


def test_bucket_report_pools_counts_not_rates():
    results = [_result(0, "word", 0, 9, 0, 1, 0),
               _result(1, "word", 1, 3, 1, 1, 0)]
    report = ev.bucket_report(results, "mistake_count")
    assert report["0"].per == pytest.approx(0.1)
    assert report["1"].per == pytest.approx(0.5)     # Eq.-10 pooling, (1+1)/(3+1)
    pooled = report["0"].counts + report["1"].counts
    assert ev.per(pooled) == pytest.approx(3 / 14)   # 0.2143 overall


def test_bucket_report_task_strata_partition():
    results = [_result(0, "word", 0, 4, 0, 0, 0),
               _result(1, "sentence", 2, 8, 1, 1, 1),
               _result(2, "word", 1, 3, 0, 1, 0)]
    report = ev.bucket_report(results, "task")
    assert set(report) == {"word", "sentence"}
    assert report["word"].utterances == 2
    assert report["sentence"].utterances == 1
    total = sum(b.counts.reference_length for b in report.values())
    assert total == sum(r.counts.reference_length for r in results)


def test_bucket_report_three_plus_bucket_and_absent_buckets():
    results = [_result(0, "word", 5, 2, 1, 0, 0)]
    report = ev.bucket_report(results, "mistake_count")
    assert list(report) == ["3+"]


# ------------------------------------------------------------ attention
def staircase(n, u, reverse=False):
    w = np.zeros((n, u))
    span = u // n
    for i in range(n):
        row = n - 1 - i if reverse else i
        w[i, row * span:(row + 1) * span] = 1.0 / span
    return w


def test_attention_diagnostics_monotone_staircase():
    d = ev.attention_diagnostics(staircase(5, 20))
    assert d["monotonicity_violation_rate"] == 0.0
    assert d["diagonality"] < 0.1


def test_attention_diagnostics_reversed_staircase():
    d = ev.attention_diagnostics(staircase(5, 20, reverse=True))
    assert d["monotonicity_violation_rate"] == 1.0


def test_attention_diagnostics_uniform_weights():
    n, u = 4, 8
    d = ev.attention_diagnostics(np.full((n, u), 1.0 / u))
    assert d["monotonicity_violation_rate"] == 0.0   # argmax ties at index 0
    # hand arithmetic: peaks 0, diagonal positions i*(u-1)/(n-1)
    expected = np.mean([abs(0 - i * (u - 1) / (n - 1)) for i in range(n)]) / u
    assert d["diagonality"] == pytest.approx(expected)
    assert d["diagonality"] == pytest.approx(0.4375)


def test_attention_diagnostics_small_backstep_tolerated():
    w = np.zeros((3, 10))
    w[0, 4] = 1.0
    w[1, 2] = 1.0      # falls back by 2: inside the tolerance window
    w[2, 9] = 1.0
    assert ev.attention_diagnostics(w)["monotonicity_violation_rate"] == 0.0
    w[1, 1] = 0.0
    w = np.zeros((3, 10))
    w[0, 4] = 1.0
    w[1, 1] = 1.0      # falls back by 3: a violation
    w[2, 9] = 1.0
    assert ev.attention_diagnostics(w)["monotonicity_violation_rate"] == pytest.approx(0.5)


def test_attention_diagnostics_rejects_malformed():
    with pytest.raises(ValueError, match="sum to 1"):
        ev.attention_diagnostics(np.ones((3, 4)))
    with pytest.raises(ValueError, match="N x U"):
        ev.attention_diagnostics(np.ones(5))


def test_attention_dump_roundtrips(tmp_path):
    from phonerec.dataset_io import read_feature_matrix
    w = staircase(4, 12)
    path = tmp_path / "attn.bin"
    ev.dump_attention_weights(path, w)
    back = read_feature_matrix(path)
    assert back.shape == (4, 12)
    assert np.allclose(back, w)


def test_eval_report_format(tmp_path):
    results = [_result(0, "word", 1, 3, 0, 1, 0)]
    path = tmp_path / "report.tsv"
    ev.write_eval_report(path, results)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "utt_id\ttask\tgt_mistakes\tC\tI\tS\tD\tPER"
    assert lines[1].startswith("u0\tword\t1\t3\t0\t1\t0\t")
    assert any(line.startswith("# summary by task") for line in lines)
