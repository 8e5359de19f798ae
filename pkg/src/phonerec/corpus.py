"""Synthetic adult/child read-speech corpus with ground-truth miscues.

Each phone has a fixed Gaussian feature template; the child domain warps the
adult templates (spectral shift) and reads slower and noisier. Miscue
injection edits the phone sequence (and, for hesitations, only the feature
stream) while recording what was done and where.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .phones import N_PHONES, PhoneAlphabet, PhoneSequence

TASK_WORD = "word"
TASK_SENTENCE = "sentence"
DOMAIN_ADULT = "adult"
DOMAIN_CHILD = "child"

MISCUE_KINDS = ("hesitation", "substitution", "insertion", "deletion",
                "repetition", "false_start")
_DETAIL_KINDS = ("substitution", "insertion")

# generator constants (documented, fixed per dataset)
ADULT_DURATION = (3, 8)        # frames per phone, inclusive
CHILD_DURATION = (5, 15)
ADULT_SIGMA = 0.3
CHILD_SIGMA = 0.6
CHILD_WARP_SCALE = 1.3
CHILD_WARP_SHIFT = 0.5
SILENCE_FRAMES = (5, 10)       # inserted per hesitation, inclusive
SILENCE_SIGMA = 0.01
WORD_PROMPT_LEN = (2, 6)
SENTENCE_PROMPT_LEN = (15, 40)
_TEMPLATE_SEED = 61409


@dataclass
class FeatureSequence:
    """T x F acoustic frames, float32 on disk and in memory."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"features must be a T x F matrix with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("features contain non-finite values")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    def __eq__(self, other):
        return isinstance(other, FeatureSequence) and np.array_equal(self.frames, other.frames)


@dataclass(frozen=True)
class MiscueRecord:
    kind: str
    position: int
    detail: int | None = None

    def __post_init__(self):
        if self.kind not in MISCUE_KINDS:
            raise ValueError(f"unknown miscue kind {self.kind!r}")
        needs_detail = self.kind in _DETAIL_KINDS
        if needs_detail != (self.detail is not None):
            raise ValueError(f"{self.kind} miscue must carry a detail phone iff kind needs one")


@dataclass
class Utterance:
    id: str
    features: FeatureSequence
    prompted: PhoneSequence
    read: PhoneSequence
    task: str
    domain: str
    miscues: list = field(default_factory=list)

    def __post_init__(self):
        if self.task not in (TASK_WORD, TASK_SENTENCE):
            raise ValueError(f"bad task {self.task!r}")
        if self.domain not in (DOMAIN_ADULT, DOMAIN_CHILD):
            raise ValueError(f"bad domain {self.domain!r}")
        phone_level = [m for m in self.miscues if m.kind != "hesitation"]
        if (self.read.ids == self.prompted.ids) and phone_level:
            raise ValueError("read equals prompted but phone-level miscues recorded")

    def __eq__(self, other):
        return (isinstance(other, Utterance)
                and self.id == other.id
                and self.features == other.features
                and self.prompted == other.prompted
                and self.read == other.read
                and self.task == other.task
                and self.domain == other.domain
                and list(self.miscues) == list(other.miscues))


def phone_templates(feature_dim: int) -> np.ndarray:
    """Adult-domain template vectors, one row per phone; fixed across corpora."""
    rng = np.random.default_rng([_TEMPLATE_SEED, feature_dim])
    return rng.normal(size=(N_PHONES, feature_dim))


def _template(templates: np.ndarray, phone: int, domain: str) -> np.ndarray:
    t = templates[phone]
    if domain == DOMAIN_CHILD:
        return CHILD_WARP_SCALE * t + CHILD_WARP_SHIFT
    return t


def generate_word_prompt(rng: np.random.Generator) -> PhoneSequence:
    n = int(rng.integers(WORD_PROMPT_LEN[0], WORD_PROMPT_LEN[1] + 1))
    return PhoneSequence(tuple(int(p) for p in rng.integers(0, N_PHONES, size=n)))


def generate_sentence_prompt(rng: np.random.Generator):
    """Sentence of 15..40 phones built from short words.

    Returns (PhoneSequence, word_lengths).
    """
    target = int(rng.integers(SENTENCE_PROMPT_LEN[0], SENTENCE_PROMPT_LEN[1] + 1))
    lens = []
    rem = target
    while rem >= 2:
        w = min(int(rng.integers(2, 7)), rem)
        if rem - w == 1:
            w = w + 1 if w < 6 else w - 1
        lens.append(w)
        rem -= w
    ids = tuple(int(p) for p in rng.integers(0, N_PHONES, size=sum(lens)))
    return PhoneSequence(ids), lens


def _word_starts(word_lengths):
    starts, pos = [], 0
    for w in word_lengths:
        starts.append(pos)
        pos += w
    return starts


def miscue_feasible(kind: str, n: int, word_lengths) -> bool:
    if kind == "substitution":
        return n >= 1
    if kind in ("insertion", "deletion", "hesitation"):
        return n >= 2
    if kind == "repetition":
        return len(word_lengths) >= 1
    if kind == "false_start":
        return any(w >= 2 for w in word_lengths)
    raise ValueError(f"unknown miscue kind {kind!r}")


def inject_miscue(prompted: PhoneSequence, kind: str, rng_seed: int, word_lengths=None):
    """Apply one reading mistake; returns (read, MiscueRecord).

    Hesitation leaves the phone sequence untouched (it only adds silence
    frames at synthesis time); all positions refer to the prompted sequence.
    """
    rng = np.random.default_rng(rng_seed)
    ids = list(prompted.ids)
    n = len(ids)
    word_lengths = list(word_lengths) if word_lengths else [n]
    if sum(word_lengths) != n:
        raise ValueError("word lengths do not sum to the prompt length")
    if not miscue_feasible(kind, n, word_lengths):
        raise ValueError(f"{kind} miscue infeasible for length-{n} prompt")
    starts = _word_starts(word_lengths)

    if kind == "substitution":
        pos = int(rng.integers(0, n))
        new = int(rng.integers(0, N_PHONES - 1))
        if new >= ids[pos]:
            new += 1
        read = ids[:pos] + [new] + ids[pos + 1:]
        return PhoneSequence(tuple(read)), MiscueRecord(kind, pos, new)
    if kind == "insertion":
        pos = int(rng.integers(1, n))  # inside a word or between phones, never at an edge
        # a copy of a neighbouring phone can slide to a word boundary under
        # alignment, where it is indistinguishable from a false start; only
        # insert phones distinct from both neighbours
        new = int(rng.integers(0, N_PHONES))
        while new in (ids[pos - 1], ids[pos]):
            new = int(rng.integers(0, N_PHONES))
        read = ids[:pos] + [new] + ids[pos:]
        return PhoneSequence(tuple(read)), MiscueRecord(kind, pos, new)
    if kind == "deletion":
        pos = int(rng.integers(0, n))
        read = ids[:pos] + ids[pos + 1:]
        return PhoneSequence(tuple(read)), MiscueRecord(kind, pos)
    if kind == "hesitation":
        pos = int(rng.integers(1, n))  # intra-word silence site
        return PhoneSequence(tuple(ids)), MiscueRecord(kind, pos)
    if kind == "repetition":
        k = int(rng.integers(1, min(3, len(word_lengths)) + 1))
        prefix = ids[:sum(word_lengths[:k])]
        return PhoneSequence(tuple(prefix + ids)), MiscueRecord(kind, 0)
    # false start: first 1-2 phones of one word, then the word restarts
    candidates = [w for w, wl in enumerate(word_lengths) if wl >= 2]
    w = candidates[int(rng.integers(0, len(candidates)))]
    plen = int(rng.integers(1, min(2, word_lengths[w] - 1) + 1))
    s = starts[w]
    read = ids[:s] + ids[s:s + plen] + ids[s:]
    return PhoneSequence(tuple(read)), MiscueRecord("false_start", s)


def synthesize_features(read: PhoneSequence, domain: str, feature_dim: int,
                        rng: np.random.Generator, silence_before=()) -> FeatureSequence:
    """Emit per-phone Gaussian frames around the domain template; hesitations
    add near-zero silence blocks before the given read positions."""
    templates = phone_templates(feature_dim)
    lo, hi = ADULT_DURATION if domain == DOMAIN_ADULT else CHILD_DURATION
    sigma = ADULT_SIGMA if domain == DOMAIN_ADULT else CHILD_SIGMA
    silence_before = set(silence_before)
    blocks = []
    for pos, phone in enumerate(read.ids):
        if pos in silence_before:
            nsil = int(rng.integers(SILENCE_FRAMES[0], SILENCE_FRAMES[1] + 1))
            blocks.append(SILENCE_SIGMA * rng.standard_normal((nsil, feature_dim)))
        d = int(rng.integers(lo, hi + 1))
        blocks.append(_template(templates, phone, domain)
                      + sigma * rng.standard_normal((d, feature_dim)))
    return FeatureSequence(np.concatenate(blocks, axis=0))


def generate_utterance(alphabet: PhoneAlphabet, prompted: PhoneSequence, domain: str,
                       task: str, rng_seed, feature_dim: int = 80,
                       miscue_kinds=(), word_lengths=None, utt_id=None) -> Utterance:
    """Build one utterance; miscue_kinds are applied in order before synthesis."""
    if len(prompted) < 1:
        raise ValueError("prompt must be non-empty")
    rng = np.random.default_rng(rng_seed)
    read = prompted
    records = []
    lengths = list(word_lengths) if word_lengths else [len(prompted)]
    for kind in miscue_kinds:
        step_seed = int(rng.integers(0, 2 ** 31))
        try:
            read, rec = _extend_read(prompted, read, records, kind, step_seed, lengths)
        except ValueError:
            continue  # an earlier edit made this kind infeasible; drop it
        records.append(rec)
    silence = _silence_positions(prompted, read, records)
    features = synthesize_features(read, domain, feature_dim, rng, silence_before=silence)
    return Utterance(
        id=utt_id or f"{domain}-{task}-{rng_seed}",
        features=features, prompted=prompted, read=read,
        task=task, domain=domain, miscues=records)


def _extend_read(prompted, current_read, prior, kind, seed, word_lengths):
    """Apply one more miscue on top of an already-edited reading.

    Repetition and false starts are injected against the current reading (the
    child repeats what they actually said); sub/ins/del positions reference
    the prompted sequence and are mapped through earlier edits.
    """
    if kind in ("repetition", "false_start"):
        # word structure survives sub-level edits of earlier miscues only
        # approximately; recompute lengths from the current read when the
        # lengths no longer fit.
        lengths = word_lengths if sum(word_lengths) == len(current_read) else [len(current_read)]
        read, rec = inject_miscue(current_read, kind, seed, lengths)
        return read, rec
    read, rec = inject_miscue(current_read, kind, seed,
                              word_lengths if sum(word_lengths) == len(current_read) else None)
    return read, rec


def _silence_positions(prompted, read, records):
    """Map hesitation records onto read positions (identical coordinates as
    long as no earlier edit shifted the tail; shifts are clamped into range)."""
    positions = []
    for rec in records:
        if rec.kind == "hesitation":
            positions.append(min(rec.position, len(read) - 1))
    return positions


@dataclass
class SplitSpec:
    """Recipe for one on-disk dataset split."""

    name: str
    size: int
    domain: str
    task: str                    # word | sentence | mixed
    with_miscues: bool = False


DEFAULT_SPLITS = (
    SplitSpec("adult-train", 2000, DOMAIN_ADULT, TASK_SENTENCE),
    SplitSpec("adult-valid", 100, DOMAIN_ADULT, TASK_SENTENCE),
    SplitSpec("adult-test", 200, DOMAIN_ADULT, TASK_SENTENCE),
    SplitSpec("child-train", 400, DOMAIN_CHILD, "mixed"),
    SplitSpec("child-valid", 100, DOMAIN_CHILD, "mixed"),
    SplitSpec("child-test-words", 200, DOMAIN_CHILD, TASK_WORD, with_miscues=True),
    SplitSpec("child-test-sentences", 200, DOMAIN_CHILD, TASK_SENTENCE, with_miscues=True),
)

_MISCUE_COUNT_P = (0.5, 0.25, 0.15, 0.1)   # 0, 1, 2, 3 mistakes per test utterance


def generate_split(alphabet: PhoneAlphabet, spec: SplitSpec, seed: int,
                   feature_dim: int = 80):
    """Deterministically generate one split; train/valid stay miscue-free.

    The split name is folded into the seed so different splits built from one
    corpus seed do not share prompts.
    """
    name_mix = zlib.crc32(spec.name.encode("utf-8"))
    utterances = []
    for idx in range(spec.size):
        rng = np.random.default_rng([seed, name_mix, idx])
        task = spec.task
        if task == "mixed":
            task = TASK_WORD if idx % 2 == 0 else TASK_SENTENCE
        if task == TASK_WORD:
            prompted, lengths = generate_word_prompt(rng), None
        else:
            prompted, lengths = generate_sentence_prompt(rng)
        kinds = []
        if spec.with_miscues:
            count = int(rng.choice(len(_MISCUE_COUNT_P), p=_MISCUE_COUNT_P))
            n = len(prompted)
            wl = lengths if lengths else [n]
            feasible = [k for k in MISCUE_KINDS if miscue_feasible(k, n, wl)]
            kinds = [str(feasible[int(rng.integers(0, len(feasible)))]) for _ in range(count)]
        utt = generate_utterance(
            alphabet, prompted, spec.domain, task,
            rng_seed=[seed, name_mix, idx, 1], feature_dim=feature_dim,
            miscue_kinds=kinds, word_lengths=lengths,
            utt_id=f"{spec.name}-{idx:05d}")
        utterances.append(utt)
    return utterances
