"""Interaction logs, historical behavior indicators, splits and batches.

Item id 0 is reserved for padding everywhere. Sequences are left-padded so
the newest interaction always sits in the last position.
"""

from __future__ import annotations

import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import DataError


class InteractionRecord(NamedTuple):
    user_id: int
    item_id: int
    behavior_id: int
    timestamp: int


@dataclass
class UserSequence:
    """One user's interactions in time order."""

    user_id: int
    items: np.ndarray
    behaviors: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.behaviors = np.asarray(self.behaviors, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (len(self.items) == len(self.behaviors) == len(self.timestamps)):
            raise DataError(f"user {self.user_id}: items, behaviors and timestamps differ in length")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, sl):
        if not isinstance(sl, slice):
            raise TypeError("UserSequence supports slicing only")
        return UserSequence(self.user_id, self.items[sl], self.behaviors[sl], self.timestamps[sl])

    def only_behavior(self, behavior):
        """Keep interactions of one behavior, relabelled as behavior 0."""
        keep = self.behaviors == behavior
        return UserSequence(self.user_id, self.items[keep], np.zeros(int(keep.sum()), np.int64), self.timestamps[keep])


# ---------------------------------------------------------------- parsing

def parse_interactions(stream, num_behaviors=None, source=None):
    """Read ``user<TAB>item<TAB>behavior<TAB>timestamp`` lines.

    Blank lines and ``#`` comments are skipped. Accepts a text stream or a
    string.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    records = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise DataError(f"expected 4 tab-separated fields, got {len(fields)}", line=lineno, source=source)
        try:
            user, item, behavior, ts = (int(f) for f in fields)
        except ValueError:
            raise DataError(f"non-integer field in {line!r}", line=lineno, source=source) from None
        if item < 1:
            raise DataError(f"item id {item} < 1 (0 is reserved for padding)", line=lineno, source=source)
        if behavior < 0 or (num_behaviors is not None and behavior >= num_behaviors):
            raise DataError(f"behavior {behavior} outside [0, {num_behaviors})", line=lineno, source=source)
        records.append(InteractionRecord(user, item, behavior, ts))
    return records


def format_interactions(records):
    return "".join(f"{r.user_id}\t{r.item_id}\t{r.behavior_id}\t{r.timestamp}\n" for r in records)


def read_manifest(stream, source=None):
    """``key=value`` lines declaring ``K``, ``target_behavior`` and ``item_count``."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    out = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"expected key=value, got {line!r}", line=lineno, source=source)
        try:
            out[key.strip()] = int(value.strip())
        except ValueError:
            raise DataError(f"{key.strip()} must be an integer", line=lineno, source=source) from None
    missing = [k for k in ("K", "target_behavior", "item_count") if k not in out]
    if missing:
        raise DataError(f"manifest missing {', '.join(missing)}", source=source)
    if not 0 <= out["target_behavior"] < out["K"]:
        raise DataError(f"target_behavior {out['target_behavior']} outside [0, {out['K']})", source=source)
    return out


def format_manifest(manifest):
    return "".join(f"{k}={manifest[k]}\n" for k in sorted(manifest))


def build_user_sequences(records: Iterable[InteractionRecord]):
    """Group by user and sort by timestamp; equal timestamps keep file order."""
    grouped = defaultdict(list)
    for r in records:
        grouped[r.user_id].append(r)
    out = {}
    for user in sorted(grouped):
        rows = sorted(grouped[user], key=lambda r: r.timestamp)  # sorted() is stable
        out[user] = UserSequence(
            user,
            [r.item_id for r in rows],
            [r.behavior_id for r in rows],
            [r.timestamp for r in rows],
        )
    return out


# ---------------------------------------------------------------- behavior indicators

@dataclass(frozen=True)
class HbiEncoder:
    """Mixed-radix code of capped per-behavior counts of an item.

    ``code = sum_b min(count_b, cap) * (cap + 1) ** b``
    """

    num_behaviors: int
    cap: int = 3

    @property
    def vocab_size(self):
        return (self.cap + 1) ** self.num_behaviors

    def code(self, counts):
        radix = self.cap + 1
        return int(sum(min(int(c), self.cap) * radix ** b for b, c in enumerate(counts)))

    def decode(self, code):
        radix = self.cap + 1
        counts = []
        for _ in range(self.num_behaviors):
            code, c = divmod(code, radix)
            counts.append(c)
        return counts

    def encode(self, items, behaviors):
        """Codes per position, counting positions up to and including that one."""
        inclusive, _ = self.scan(items, behaviors)
        return inclusive

    def encode_targets(self, items, behaviors):
        """Codes per position from strictly earlier positions only."""
        _, strict = self.scan(items, behaviors)
        return strict

    def query(self, items, behaviors, item, prefix_len=None):
        """Code for a candidate ``item`` given the first ``prefix_len`` interactions."""
        items = np.asarray(items)[:prefix_len]
        behaviors = np.asarray(behaviors, dtype=np.int64)[:prefix_len]
        hits = behaviors[items == item]
        return self.code(np.bincount(hits, minlength=self.num_behaviors)[: self.num_behaviors])

    def scan(self, items, behaviors):
        """``(inclusive, strict)`` codes for every position."""
        radix = self.cap + 1
        counts = defaultdict(lambda: [0] * self.num_behaviors)
        inclusive = np.zeros(len(items), np.int64)
        strict = np.zeros(len(items), np.int64)
        for j, (item, b) in enumerate(zip(np.asarray(items).tolist(), np.asarray(behaviors).tolist())):
            if not 0 <= b < self.num_behaviors:
                raise DataError(f"behavior {b} outside [0, {self.num_behaviors})")
            c = counts[item]
            strict[j] = sum(min(n, self.cap) * radix ** k for k, n in enumerate(c))
            c[b] += 1
            inclusive[j] = sum(min(n, self.cap) * radix ** k for k, n in enumerate(c))
        return inclusive, strict


def encode_hbi(sequence, encoder):
    return encoder.encode(sequence.items, sequence.behaviors)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    target_behavior: int
    validation_enabled: bool = True
    max_len: int = 50


@dataclass
class EvalCase:
    """A held-out target interaction with the history preceding it."""

    user_id: int
    history: UserSequence
    item: int
    behavior: int
    known_items: frozenset


@dataclass
class Split:
    train: list
    valid: list
    test: list
    excluded_users: list = field(default_factory=list)

    def summary(self):
        return {
            "users": len(self.train),
            "train_users": len(self.train),
            "test_users": len(self.test),
            "valid_users": len(self.valid),
            "excluded_from_test": len(self.excluded_users),
        }


def split_leave_one_out(sequences, spec):
    """Hold out each user's last target-behavior interaction for testing.

    Users with fewer than two target-behavior interactions stay in training
    with their full sequence and are listed in ``excluded_users``.
    """
    if isinstance(sequences, dict):
        sequences = list(sequences.values())
    train, valid, test, excluded = [], [], [], []
    for seq in sequences:
        known = frozenset(seq.items.tolist())
        positions = np.flatnonzero(seq.behaviors == spec.target_behavior)
        if len(positions) < 2:
            excluded.append(seq.user_id)
            train.append(seq)
            continue
        t = int(positions[-1])
        test.append(EvalCase(seq.user_id, seq[:t], int(seq.items[t]), int(seq.behaviors[t]), known))
        cut = t
        if spec.validation_enabled:
            v = int(positions[-2])
            valid.append(EvalCase(seq.user_id, seq[:v], int(seq.items[v]), int(seq.behaviors[v]), known))
            cut = v
        train.append(seq[:cut])
    return Split(train, valid, test, excluded)


# ---------------------------------------------------------------- negatives / padding

def sample_negatives(history, n, universe, rng):
    """``n`` distinct ids drawn uniformly from ``universe`` minus ``history``.

    ``universe`` is either an item count (ids ``1..count``) or an explicit
    collection of ids.
    """
    pool = np.arange(1, universe + 1) if np.isscalar(universe) else np.asarray(sorted(universe))
    if len(history):
        pool = pool[~np.isin(pool, np.fromiter(history, np.int64, len(history)))]
    if len(pool) < n:
        raise DataError(f"only {len(pool)} candidate items outside the history, need {n}")
    return rng.choice(pool, size=n, replace=False)


def pad_or_truncate(values, length, fill=0):
    """Keep the last ``length`` entries, left-padding with ``fill``."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    values = np.asarray(values)
    out = np.full(length, fill, dtype=values.dtype if values.size else np.int64)
    tail = values[-length:] if len(values) else values
    if len(tail):
        out[length - len(tail):] = tail
    return out


@dataclass
class SequenceBatch:
    """Fixed-length arrays for ``B`` users; every field is ``[B, L]`` unless noted."""

    item_ids: np.ndarray
    behavior_ids: np.ndarray
    hbi_ids: np.ndarray
    padding_mask: np.ndarray
    pos_target_ids: np.ndarray
    pos_target_hbi: np.ndarray
    pos_target_behavior: np.ndarray
    neg_target_ids: np.ndarray  # [B, L, n]
    neg_target_hbi: np.ndarray  # [B, L, n]
    loss_mask: np.ndarray
    user_ids: np.ndarray = None

    def __len__(self):
        return self.item_ids.shape[0]

    @classmethod
    def concatenate(cls, batches):
        names = [f for f in cls.__dataclass_fields__]
        return cls(**{n: np.concatenate([getattr(b, n) for b in batches]) for n in names})


def history_arrays(sequence, max_len, encoder):
    """Padded ``(item_ids, behavior_ids, hbi_ids, padding_mask)`` for an input history."""
    hbi = encoder.encode(sequence.items, sequence.behaviors)
    items = pad_or_truncate(sequence.items, max_len)
    return items, pad_or_truncate(sequence.behaviors, max_len), pad_or_truncate(hbi, max_len), (items != 0).astype(np.int64)


def training_example(sequence, max_len, encoder, num_items, negatives, rng, known_items=None):
    """Inputs are ``seq[:-1]``, positives are ``seq[1:]`` (right shift), both truncated to ``max_len``."""
    n = len(sequence)
    L = max_len
    items = np.zeros(L, np.int64)
    behaviors = np.zeros(L, np.int64)
    hbi = np.zeros(L, np.int64)
    pos = np.zeros(L, np.int64)
    pos_hbi = np.zeros(L, np.int64)
    pos_beh = np.zeros(L, np.int64)
    neg = np.zeros((L, negatives), np.int64)
    if n >= 2:
        inclusive, strict = encoder.scan(sequence.items, sequence.behaviors)
        items = pad_or_truncate(sequence.items[:-1], L)
        behaviors = pad_or_truncate(sequence.behaviors[:-1], L)
        hbi = pad_or_truncate(inclusive[:-1], L)
        pos = pad_or_truncate(sequence.items[1:], L)
        pos_hbi = pad_or_truncate(strict[1:], L)
        pos_beh = pad_or_truncate(sequence.behaviors[1:], L)
        exclude = known_items if known_items is not None else set(sequence.items.tolist())
        real = np.flatnonzero(pos)
        pool = np.arange(1, num_items + 1)
        pool = pool[~np.isin(pool, np.fromiter(exclude, np.int64, len(exclude)))]
        if len(pool) < negatives:
            raise DataError(f"user {sequence.user_id}: only {len(pool)} negative candidates, need {negatives}")
        for j in real:
            neg[j] = rng.choice(pool, size=negatives, replace=False) if negatives > 1 else rng.choice(pool, size=1)
    mask = (items != 0).astype(np.int64)
    return items, behaviors, hbi, mask, pos, pos_hbi, pos_beh, neg, mask * (pos != 0)


def make_training_batches(sequences, *, max_len, num_items, encoder, negatives=1, batch_size=32,
                          rng, known_items=None, shuffle=True, only_behavior=None) -> Iterator[SequenceBatch]:
    """Yield padded training batches with sampled negatives.

    ``known_items`` maps user id to the items to keep out of that user's
    negatives (defaults to the training sequence itself). With
    ``only_behavior`` set, each sequence is first reduced to that behavior.
    """
    seqs = list(sequences.values()) if isinstance(sequences, dict) else list(sequences)
    if only_behavior is not None:
        seqs = [s.only_behavior(only_behavior) for s in seqs]
    seqs = [s for s in seqs if len(s) >= 2]
    order = rng.permutation(len(seqs)) if shuffle else np.arange(len(seqs))
    for start in range(0, len(order), batch_size):
        rows = []
        users = []
        for idx in order[start:start + batch_size]:
            s = seqs[idx]
            known = known_items.get(s.user_id) if known_items is not None else None
            rows.append(training_example(s, max_len, encoder, num_items, negatives, rng, known))
            users.append(s.user_id)
        cols = [np.stack(c) for c in zip(*rows)]
        yield SequenceBatch(
            item_ids=cols[0], behavior_ids=cols[1], hbi_ids=cols[2], padding_mask=cols[3],
            pos_target_ids=cols[4], pos_target_hbi=cols[5], pos_target_behavior=cols[6],
            neg_target_ids=cols[7], neg_target_hbi=np.zeros_like(cols[7]), loss_mask=cols[8],
            user_ids=np.asarray(users, np.int64),
        )


# ---------------------------------------------------------------- synthetic corpora

def generate_synthetic(users, items, num_behaviors=2, rule="cyclic", seed=0, *, target_behavior=None,
                       min_len=8, max_len=15, lift=0.8, rounds=(4, 8), max_noise=2):
    """Deterministic synthetic interaction log.

    ``cyclic``: each user walks ``i -> (i mod items) + 1`` with the target
    behavior only. ``aux-signal``: rounds of an auxiliary event on item ``i``,
    up to ``max_noise`` unrelated auxiliary events, then a target event on
    ``i`` with probability ``lift`` (otherwise on a uniform random item).
    """
    if users < 1 or items < 1 or num_behaviors < 1:
        raise ValueError("users, items and num_behaviors must be >= 1")
    target = num_behaviors - 1 if target_behavior is None else target_behavior
    aux = [b for b in range(num_behaviors) if b != target]
    rng = np.random.default_rng(seed)
    records = []
    for u in range(1, users + 1):
        if rule == "cyclic":
            item = int(rng.integers(1, items + 1))
            for t in range(int(rng.integers(min_len, max_len + 1))):
                records.append(InteractionRecord(u, item, target, t))
                item = item % items + 1
        elif rule == "aux-signal":
            if not aux:
                raise ValueError("aux-signal needs at least one auxiliary behavior")
            t = 0
            for _ in range(int(rng.integers(rounds[0], rounds[1] + 1))):
                item = int(rng.integers(1, items + 1))
                records.append(InteractionRecord(u, item, aux[int(rng.integers(len(aux)))], t))
                t += 1
                for _ in range(int(rng.integers(0, max_noise + 1))):
                    records.append(InteractionRecord(u, int(rng.integers(1, items + 1)), aux[int(rng.integers(len(aux)))], t))
                    t += 1
                bought = item if rng.random() < lift else int(rng.integers(1, items + 1))
                records.append(InteractionRecord(u, bought, target, t))
                t += 1
        else:
            raise ValueError(f"unknown synthetic rule {rule!r}")
    return records
