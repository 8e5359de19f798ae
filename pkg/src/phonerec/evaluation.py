"""Levenshtein alignment, phone error rate, miscue classification against
the prompted text, stratified reporting, attention-monotonicity diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import MiscueRecord


@dataclass
class AlignmentCounts:
    correct: int = 0
    insertions: int = 0
    substitutions: int = 0
    deletions: int = 0

    def __add__(self, other):
        return AlignmentCounts(self.correct + other.correct,
                               self.insertions + other.insertions,
                               self.substitutions + other.substitutions,
                               self.deletions + other.deletions)

    @property
    def reference_length(self):
        return self.correct + self.substitutions + self.deletions

    @property
    def hypothesis_length(self):
        return self.correct + self.substitutions + self.insertions

    @property
    def distance(self):
        return self.insertions + self.substitutions + self.deletions


def align(reference, hypothesis):
    """Minimal-edit alignment with unit costs; backtrace prefers
    substitution, then deletion, then insertion when costs tie.

    Returns (AlignmentCounts, edit script). Script ops are
    ("match"|"sub", ref_i, hyp_j), ("del", ref_i), ("ins", ref_i, hyp_j)
    where an insertion places hypothesis[hyp_j] before reference[ref_i].
    """
    ref = tuple(reference)
    hyp = tuple(hypothesis)
    if not ref:
        raise ValueError("alignment reference must be non-empty")
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    script = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            kind = "match" if ref[i - 1] == hyp[j - 1] else "sub"
            script.append((kind, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            script.append(("del", i - 1))
            i -= 1
        else:
            script.append(("ins", i, j - 1))
            j -= 1
    script.reverse()
    counts = AlignmentCounts(
        correct=sum(1 for op in script if op[0] == "match"),
        substitutions=sum(1 for op in script if op[0] == "sub"),
        deletions=sum(1 for op in script if op[0] == "del"),
        insertions=sum(1 for op in script if op[0] == "ins"))
    return counts, script


def per(counts: AlignmentCounts) -> float:
    """Phone error rate (I + S + D) / (C + S + D); may exceed 1."""
    denom = counts.correct + counts.substitutions + counts.deletions
    if denom <= 0:
        raise ValueError("PER undefined: empty reference side (C + S + D = 0)")
    return counts.distance / denom


@dataclass
class MiscueReport:
    miscues: list = field(default_factory=list)
    verdict: str = "correct"

    def __post_init__(self):
        self.verdict = "erroneous" if self.miscues else "correct"


def _word_layout(n, word_lengths):
    lengths = list(word_lengths) if word_lengths else [n]
    if sum(lengths) != n:
        raise ValueError("word lengths do not sum to the prompt length")
    starts, pos = [], 0
    for w in lengths:
        starts.append(pos)
        pos += w
    return lengths, starts


def classify_miscues(prompted, read_or_hypothesis, word_lengths=None) -> MiscueReport:
    """Map the edit script onto miscue kinds.

    Insertion blocks at a word start that replay the following words become a
    repetition; a proper prefix of the following word becomes a false start.
    Hesitations are feature-level only and are never claimed here.
    """
    prompted = tuple(prompted)
    hyp = tuple(read_or_hypothesis)
    lengths, starts = _word_layout(len(prompted), word_lengths)
    words = [prompted[s:s + l] for s, l in zip(starts, lengths)]
    detected = []
    if not hyp:
        for i in range(len(prompted)):
            detected.append(MiscueRecord("deletion", i))
        return MiscueReport(detected)
    _, script = align(prompted, hyp)
    idx = 0
    while idx < len(script):
        op = script[idx]
        if op[0] == "sub":
            detected.append(MiscueRecord("substitution", op[1], hyp[op[2]]))
            idx += 1
        elif op[0] == "del":
            detected.append(MiscueRecord("deletion", op[1]))
            idx += 1
        elif op[0] == "ins":
            anchor = op[1]
            block = []
            while idx < len(script) and script[idx][0] == "ins" and script[idx][1] == anchor:
                block.append(hyp[script[idx][2]])
                idx += 1
            detected.extend(_classify_insertion_block(tuple(block), anchor, words, starts))
        else:
            idx += 1
    return MiscueReport(detected)


def _classify_insertion_block(block, anchor, words, starts):
    if anchor in starts:
        w = starts.index(anchor)
        # repetition: the block replays the next 1..k whole words
        replay = ()
        for k in range(w, len(words)):
            replay = replay + words[k]
            if block == replay:
                return [MiscueRecord("repetition", anchor)]
            if len(replay) > len(block):
                break
        # false start: a proper prefix of the word being attempted
        if len(block) < len(words[w]) and block == words[w][:len(block)]:
            return [MiscueRecord("false_start", anchor)]
    return [MiscueRecord("insertion", anchor, p) for p in block]


@dataclass
class UtteranceResult:
    utt_id: str
    task: str
    gt_miscues: int
    counts: AlignmentCounts


@dataclass
class BucketStats:
    counts: AlignmentCounts
    per: float
    utterances: int
    phone_share: float


def bucket_report(results, strata: str) -> dict:
    """Pool alignment counts per bucket (never average rates).

    strata: "task" buckets by word/sentence; "mistake_count" buckets by the
    sidecar ground-truth count as 0/1/2/3+. Empty buckets are absent.
    """
    if strata not in ("task", "mistake_count"):
        raise ValueError(f"unknown strata {strata!r}")
    groups: dict[str, list] = {}
    for r in results:
        if strata == "task":
            key = r.task
        else:
            key = str(r.gt_miscues) if r.gt_miscues < 3 else "3+"
        groups.setdefault(key, []).append(r)
    total_phones = sum(r.counts.reference_length for r in results)
    report = {}
    for key, rows in groups.items():
        pooled = AlignmentCounts()
        for r in rows:
            pooled = pooled + r.counts
        report[key] = BucketStats(
            counts=pooled, per=per(pooled), utterances=len(rows),
            phone_share=pooled.reference_length / total_phones if total_phones else 0.0)
    return report


def attention_diagnostics(weights: np.ndarray) -> dict:
    """Diagonality and monotonicity of an N x U attention map.

    diagonality: mean |argmax - linear diagonal position| / U (0 = perfectly
    diagonal). monotonicity violation: fraction of consecutive steps whose
    argmax frame falls back by more than 2 frames.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] < 1 or weights.shape[1] < 1:
        raise ValueError(f"attention weights must be N x U, got {weights.shape}")
    if np.max(np.abs(weights.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("attention rows must sum to 1")
    n, u = weights.shape
    peaks = weights.argmax(axis=1)          # ties resolve to the lowest index
    if n > 1:
        expected = np.arange(n) * (u - 1) / (n - 1)
    else:
        expected = np.array([(u - 1) / 2.0])
    diagonality = float(np.mean(np.abs(peaks - expected)) / u)
    if n == 1:
        violation = 0.0
    else:
        drops = peaks[1:] < peaks[:-1] - 2
        violation = float(drops.mean())
    return {"diagonality": diagonality, "monotonicity_violation_rate": violation}


def dump_attention_weights(path, weights: np.ndarray):
    """Write an N x U attention map in the binary feature-matrix format."""
    from .dataset_io import write_feature_matrix
    write_feature_matrix(path, np.asarray(weights, dtype=np.float32))


def write_eval_report(path, results, alphabet=None):
    """Per-utterance TSV plus '#'-prefixed summary blocks."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("utt_id\ttask\tgt_mistakes\tC\tI\tS\tD\tPER\n")
        for r in results:
            c = r.counts
            fh.write(f"{r.utt_id}\t{r.task}\t{r.gt_miscues}\t{c.correct}\t"
                     f"{c.insertions}\t{c.substitutions}\t{c.deletions}\t"
                     f"{per(c):.6f}\n")
        for strata in ("task", "mistake_count"):
            fh.write(f"# summary by {strata} (pooled counts)\n")
            for key, stats in sorted(bucket_report(results, strata).items()):
                c = stats.counts
                fh.write(f"# {key}\tutts={stats.utterances}\tC={c.correct}\t"
                         f"I={c.insertions}\tS={c.substitutions}\tD={c.deletions}\t"
                         f"PER={stats.per:.6f}\tphone_share={stats.phone_share:.4f}\n")
