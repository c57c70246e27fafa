"""Synthetic sequence tasks standing in for GLUE at desk scale.

Token 0 is padding and token 1 a leading ``[CLS]`` marker; content tokens
start at 2.

* ``local-pattern``: class ``c`` owns a bigram ``(a_c, b_c)``. The label is
  the class whose ``a`` is followed by its ``b`` at most ``PATTERN_GAP``
  positions later. Distractors: lone key tokens of other classes and, when
  there is room, another class's bigram stretched beyond the gap.
* ``parity``: the label is the parity of the number of marked tokens
  (ids 2 and 3).
* ``token-copy``: every position is tagged with the class of the previous
  token (``id % num_classes``); ``[CLS]`` is tagged 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PAD, CLS, FIRST = 0, 1, 2
PATTERN_GAP = 8
KINDS = ("local-pattern", "parity", "token-copy")
_ALIASES = {"local-pattern-classification": "local-pattern", "parity-of-marked-tokens": "parity",
            "token-copy-tagging": "token-copy"}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "local-pattern"
    vocab_size: int = 24
    seq_len: int = 24
    num_classes: int = 4
    n_train: int = 4000
    n_dev: int = 1000
    n_test: int = 1000
    seed: int = 0
    min_len: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", _ALIASES.get(self.kind, self.kind))
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.seq_len < 4:
            raise ValueError("seq_len must be >= 4")
        lo = self.shortest
        if not 2 <= lo <= self.seq_len:
            raise ValueError("min_len must be in [2, seq_len]")
        if self.kind == "parity" and self.num_classes != 2:
            raise ValueError("parity has exactly two classes")
        if self.kind == "local-pattern":
            if self.num_classes < 2:
                raise ValueError("local-pattern needs at least two classes")
            if self.vocab_size < FIRST + 2 * self.num_classes + 2:
                raise ValueError("vocab too small for the class bigrams plus filler")
            if lo - 1 < PATTERN_GAP + 3:
                raise ValueError("sequences too short for the pattern window")
        if self.kind == "parity" and self.vocab_size < FIRST + 4:
            raise ValueError("vocab too small for parity")
        if self.kind == "token-copy" and self.vocab_size < FIRST + self.num_classes:
            raise ValueError("vocab too small for token-copy")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ValueError("split sizes must be positive")

    @property
    def shortest(self) -> int:
        return self.min_len if self.min_len is not None else max(2, (2 * self.seq_len) // 3)

    @property
    def token_level(self) -> bool:
        return self.kind == "token-copy"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    ids: np.ndarray  # (N, n) int
    mask: np.ndarray  # (N, n) bool
    labels: np.ndarray  # (N,) or (N, n); -1 at padding

    def __len__(self):
        return len(self.ids)

    def batch(self, index):
        return self.ids[index], self.mask[index], self.labels[index]


@dataclass
class Dataset:
    spec: TaskSpec
    train: Split
    dev: Split
    test: Split


def _pattern_seq(rng, spec, label, length):
    C = spec.num_classes
    a_tok = FIRST + 2 * np.arange(C)
    b_tok = a_tok + 1
    filler = np.arange(FIRST + 2 * C, spec.vocab_size)
    body = rng.choice(filler, size=length)
    free = np.ones(length, dtype=bool)

    def put(tok, pos):
        body[pos] = tok
        free[pos] = False

    gap = int(rng.integers(1, PATTERN_GAP + 1))
    start = int(rng.integers(0, length - gap))
    put(a_tok[label], start)
    put(b_tok[label], start + gap)
    others = [c for c in range(C) if c != label]
    rng.shuffle(others)
    # far bigram of another class: too far apart to count
    if rng.random() < 0.5:
        c = others[0]
        far = [(i, j) for i in range(length) for j in range(i + PATTERN_GAP + 1, length) if free[i] and free[j]]
        if far:
            i, j = far[int(rng.integers(len(far)))]
            put(a_tok[c], i)
            put(b_tok[c], j)
    # lone halves of other classes
    for c in others[1:] if len(others) > 1 else others:
        tok = a_tok[c] if rng.random() < 0.5 else b_tok[c]
        pos = np.flatnonzero(free)
        if len(pos) and rng.random() < 0.7:
            p = int(rng.choice(pos))
            put(tok, p)
            # a lone half must not complete a bigram of its own class
            if pattern_label(body, C) != label:
                body[p] = filler[0]
    return body


def pattern_label(body, num_classes) -> int:
    """Reference labelling of a local-pattern body (no CLS, no padding)."""
    body = np.asarray(body)
    found = []
    for c in range(num_classes):
        a, b = FIRST + 2 * c, FIRST + 2 * c + 1
        pa, pb = np.flatnonzero(body == a), np.flatnonzero(body == b)
        if any(0 < q - p <= PATTERN_GAP for p in pa for q in pb):
            found.append(c)
    return found[0] if len(found) == 1 else -1


def _parity_seq(rng, spec, label, length):
    filler = np.arange(FIRST + 2, spec.vocab_size)
    body = rng.choice(filler, size=length)
    k = int(rng.integers(0, 3)) * 2 + label  # 0..5 marked tokens with the right parity
    pos = rng.choice(length, size=k, replace=False)
    body[pos] = rng.choice([FIRST, FIRST + 1], size=k)
    return body


def _make(rng, spec, count, seen):
    n = spec.seq_len
    ids = np.zeros((count, n), dtype=np.int64)
    mask = np.zeros((count, n), dtype=bool)
    labels = np.full((count, n) if spec.token_level else (count,), -1, dtype=np.int64)
    C = spec.num_classes
    i = 0
    tries = 0
    while i < count:
        tries += 1
        if tries > 50 * count + 1000:
            raise ValueError("cannot draw enough distinct sequences; enlarge vocab or seq_len")
        length = int(rng.integers(spec.shortest, n + 1)) - 1  # content positions after CLS
        label = i % C
        if spec.kind == "local-pattern":
            body = _pattern_seq(rng, spec, label, length)
        elif spec.kind == "parity":
            body = _parity_seq(rng, spec, label, length)
        else:
            body = rng.integers(FIRST, spec.vocab_size, size=length)
        row = np.concatenate([[CLS], body])
        key = row.tobytes()
        if key in seen:
            continue
        seen.add(key)
        ids[i, :len(row)] = row
        mask[i, :len(row)] = True
        if spec.token_level:
            labels[i, 0] = 0
            labels[i, 1:len(row)] = row[:-1] % C
        else:
            labels[i] = label
        i += 1
    perm = rng.permutation(count)
    return Split(ids[perm], mask[perm], labels[perm])


def generate_task(spec: TaskSpec) -> Dataset:
    """Deterministic in ``spec`` (seed included); splits share no sequence."""
    rng = np.random.default_rng(spec.seed)
    seen: set = set()
    train = _make(rng, spec, spec.n_train, seen)
    dev = _make(rng, spec, spec.n_dev, seen)
    test = _make(rng, spec, spec.n_test, seen)
    return Dataset(spec, train, dev, test)
