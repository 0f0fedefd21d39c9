"""Interaction logs: ingestion, chronological per-user splits, statistics."""

import csv
import json
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {"user": 0, "item": 1, "rating": 2, "timestamp": 3}
DELIMITERS = {"csv": ",", "tsv": "\t"}

CANONICAL_HEADER = ("user_id", "item_id", "rating", "timestamp")


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: Optional[float]
    timestamp: int
    category: Optional[str] = None


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    events: tuple

    def __post_init__(self):
        if not self.events:
            raise ValueError(f"user {self.user_id!r}: a sequence needs at least one event")

    def __len__(self):
        return len(self.events)

    @property
    def items(self):
        return [e.item_id for e in self.events]


@dataclass
class DatasetSplit:
    train: dict
    validation: dict
    test: dict
    item_vocabulary: list
    user_vocabulary: list
    category_index: dict = field(default_factory=dict)

    def full_sequence(self, user_id):
        events = []
        for part in (self.train, self.validation, self.test):
            if user_id in part:
                events.extend(part[user_id].events)
        return events

    def all_events(self):
        for user in self.user_vocabulary:
            yield from self.full_sequence(user)

    def n_interactions(self):
        return sum(sum(len(s) for s in part.values()) for part in (self.train, self.validation, self.test))

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return (
            self.train == other.train
            and self.validation == other.validation
            and self.test == other.test
            and self.item_vocabulary == other.item_vocabulary
            and self.user_vocabulary == other.user_vocabulary
            and self.category_index == other.category_index
        )


def split_boundaries(n):
    """First 70% train, next 10% validation, rest test (floor on both cuts)."""
    return (n * 7) // 10, (n * 8) // 10


def build_split(interactions, category_index=None):
    """Group events per user, sort chronologically (stable) and cut 70/10/20."""
    category_index = dict(category_index or {})
    items, users = OrderedDict(), OrderedDict()
    per_user = OrderedDict()
    for ev in interactions:
        items.setdefault(ev.item_id, None)
        users.setdefault(ev.user_id, None)
        if category_index and ev.category is None and ev.item_id in category_index:
            ev = Interaction(ev.user_id, ev.item_id, ev.rating, ev.timestamp, category_index[ev.item_id])
        per_user.setdefault(ev.user_id, []).append(ev)

    train, validation, test = {}, {}, {}
    for user, events in per_user.items():
        events = sorted(events, key=lambda e: e.timestamp)
        b1, b2 = split_boundaries(len(events))
        for part, chunk in ((train, events[:b1]), (validation, events[b1:b2]), (test, events[b2:])):
            if chunk:
                part[user] = UserSequence(user, tuple(chunk))
    return DatasetSplit(train, validation, test, list(items), list(users), category_index)


def _resolve_schema(schema, header):
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    resolved = {}
    for key, col in schema.items():
        if isinstance(col, str) and not col.lstrip("-").isdigit():
            if header is None or col not in header:
                raise DataError(f"schema column {col!r} for {key!r} not found in header")
            resolved[key] = header.index(col)
        else:
            resolved[key] = int(col)
    for key in ("user", "item", "timestamp"):
        if key not in resolved:
            raise DataError(f"schema is missing the {key!r} column")
    return resolved


def read_category_file(path, delimiter="\t", known_items=None):
    index = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or (lineno == 1 and row[0] == "item_id"):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected item_id{delimiter!r}category")
            item, category = row[0], row[1]
            if known_items is not None and item not in known_items:
                logger.warning("%s:%d: unknown item %r in category file, skipped", path, lineno, item)
                continue
            if category:
                index[item] = category
    return index


def ingest(path, format="csv", schema=None, category_path=None, header=None, delimiter=None):
    """Parse a delimited interaction log into a :class:`DatasetSplit`.

    ``schema`` maps ``user``/``item``/``rating``/``timestamp`` (and optionally
    ``category``) to column indices or header names.  ``header=None`` sniffs a
    header row: it is assumed present when the timestamp column of the first
    row is not an integer.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if delimiter is None:
        if format not in DELIMITERS:
            raise DataError(f"unknown format {format!r}; expected one of {sorted(DELIMITERS)}")
        delimiter = DELIMITERS[format]

    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh, delimiter=delimiter), start=1) if r]
    if not rows:
        raise DataError(f"{path}: empty interaction file")

    header_row = None
    named = any(isinstance(c, str) and not c.lstrip("-").isdigit() for c in (schema or {}).values())
    if header is None:
        if named:
            header = True
        else:
            ts_col = _resolve_schema(schema, None)["timestamp"]
            first = rows[0][1]
            header = ts_col >= len(first) or not first[ts_col].strip().lstrip("-").isdigit()
    if header:
        header_row = rows[0][1]
        rows = rows[1:]
        if not rows:
            raise DataError(f"{path}: header but no interactions")
    cols = _resolve_schema(schema, header_row)

    interactions = []
    for lineno, row in rows:
        try:
            user, item = row[cols["user"]], row[cols["item"]]
            ts = int(row[cols["timestamp"]])
            rating = None
            if "rating" in cols and cols["rating"] < len(row) and row[cols["rating"]] != "":
                rating = float(row[cols["rating"]])
            category = None
            if "category" in cols and cols["category"] < len(row) and row[cols["category"]] != "":
                category = row[cols["category"]]
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from None
        if ts < 0:
            raise DataError(f"{path}:{lineno}: negative timestamp {ts}")
        if not user or not item:
            raise DataError(f"{path}:{lineno}: empty user or item id")
        interactions.append(Interaction(user, item, rating, ts, category))

    category_index = {}
    for ev in interactions:
        if ev.category is not None:
            category_index.setdefault(ev.item_id, ev.category)
    if category_path is not None:
        known = {ev.item_id for ev in interactions}
        category_index.update(read_category_file(category_path, "\t" if format == "tsv" else delimiter, known))
    return build_split(interactions, category_index)


def write_split(split, path, category_path=None, delimiter="\t"):
    """Write the canonical form: rows ordered by (timestamp, user_id, position).

    Ingesting a canonical file and writing it again reproduces it byte for
    byte, so ``ingest(write_split(s)) == s`` for any ``s`` read from one.
    """
    rows = []
    for user in split.user_vocabulary:
        for pos, ev in enumerate(split.full_sequence(user)):
            rows.append((ev.timestamp, ev.user_id, pos, ev))
    rows.sort(key=lambda r: r[:3])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(CANONICAL_HEADER)
        for _, _, _, ev in rows:
            w.writerow([ev.user_id, ev.item_id, "" if ev.rating is None else repr(ev.rating), ev.timestamp])
    if category_path is not None and split.category_index:
        with open(category_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            for item in sorted(split.category_index):
                w.writerow([item, split.category_index[item]])
    return path


def read_canonical(path, category_path=None):
    schema = {"user": "user_id", "item": "item_id", "rating": "rating", "timestamp": "timestamp"}
    return ingest(path, format="tsv", schema=schema, category_path=category_path, header=True)


# ----------------------------------------------------------------- statistics

def category_frequencies(split):
    """Interaction count per category over every split."""
    if not split.category_index:
        raise DataError("dataset has no category index")
    counts = Counter()
    for ev in split.all_events():
        cat = split.category_index.get(ev.item_id)
        if cat is not None:
            counts[cat] += 1
    return counts


def rare_categories(split, threshold_fraction):
    counts = category_frequencies(split)
    if not counts:
        return set(), counts
    mean = sum(counts.values()) / len(counts)
    return {c for c, n in counts.items() if n < threshold_fraction * mean}, counts


def rare_interaction_user_fraction(split, threshold_fraction=0.05):
    """Share of users with at least one interaction in a rare category.

    A category is rare when its dataset-wide interaction count is below
    ``threshold_fraction`` times the mean count over observed categories.
    """
    if threshold_fraction <= 0:
        raise ValueError(f"threshold_fraction must be positive, got {threshold_fraction}")
    rare, _ = rare_categories(split, threshold_fraction)
    users = split.user_vocabulary
    if not users:
        raise DataError("dataset has no users")
    hit = 0
    for user in users:
        if any(split.category_index.get(ev.item_id) in rare for ev in split.full_sequence(user)):
            hit += 1
    return hit / len(users)


def dataset_statistics(split, threshold_fraction=0.05):
    stats = {
        "n_users": len(split.user_vocabulary),
        "n_items": len(split.item_vocabulary),
        "n_interactions": split.n_interactions(),
        "n_train_events": sum(len(s) for s in split.train.values()),
        "n_validation_events": sum(len(s) for s in split.validation.values()),
        "n_test_events": sum(len(s) for s in split.test.values()),
        "n_train_users": len(split.train),
        "n_test_users": len(split.test),
    }
    if split.category_index:
        counts = category_frequencies(split)
        stats["threshold_fraction"] = threshold_fraction
        stats["rare_user_fraction"] = rare_interaction_user_fraction(split, threshold_fraction)
        stats["category_counts"] = dict(sorted(counts.items()))
    return stats


def write_statistics(stats, path=None):
    text = json.dumps(stats, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text
